//! A small live iterative-calibration campaign: watch the thresholds settle
//! as the agents react to each deployment.
//!
//! Desk-scale budgets keep this to roughly a minute; the bundled configs run
//! the full-size campaigns through the `endoshift` binary.

use endoshift::iterate::{run_icp, IterationConfig};
use endoshift::predictor::PredictorModel;

fn main() {
    let mut cfg = IterationConfig::two_agent_default(21);
    cfg.calibration_episodes = 100;
    cfg.max_iterations = 8;

    println!(
        "running ICP: K = {} episodes/iteration, gamma = {}, phi = {}",
        cfg.calibration_episodes, cfg.cp.gamma, cfg.cp.phi
    );
    let outcome = run_icp(&cfg, &PredictorModel::ConstantVelocity).unwrap();
    let report = &outcome.report;

    println!("\n iter  delta_q   misdetection  collisions  q[1]    q[10]");
    for rec in &report.records {
        let q = &rec.deployed_q[0];
        println!(
            "  {:2}   {:7.3}   {:>10}  {:>9}  {:5.2}  {:6.2}",
            rec.iteration,
            rec.delta_q_raw,
            rec.misdetection
                .as_ref()
                .map(|m| format!("{:5.1}%", 100.0 * m.overall))
                .unwrap_or_else(|| "-".into()),
            rec.metrics
                .as_ref()
                .map(|m| format!("{:4.1}%", m.collision_rate))
                .unwrap_or_default(),
            q.get(0).as_f64(),
            q.get(9).as_f64(),
        );
    }
    match report.converged_at {
        Some(r) => println!("\nconverged at iteration {r} (delta_q <= phi)"),
        None => println!("\nhit the iteration cap before converging"),
    }
    println!(
        "final thresholds: q[1] = {:.3} m ... q[10] = {:.3} m",
        report.final_q[0].get(0).as_f64(),
        report.final_q[0].get(9).as_f64()
    );
    if let Some(shift) = report.shift.first() {
        if let Some(rate) = shift.estimate.contraction_rate() {
            println!("empirical contraction ratio of the score shift: {rate:.3}");
        }
    }
}
