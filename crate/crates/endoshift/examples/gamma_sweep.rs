//! How the smoothing weight trades convergence speed for stability, shown on
//! a stationary stub world where the true thresholds never move.

use endoshift::iterate::{run_icp_with, IterationConfig, StationaryEnvironment};

fn main() {
    println!("gamma   rounds-to-stop   final q[1]   delta_q trace");
    for gamma in [0.2, 0.8, 0.9] {
        let mut cfg = IterationConfig::two_agent_default(1);
        cfg.episode.horizon = 5;
        cfg.calibration_episodes = 400;
        cfg.cp.gamma = gamma;
        cfg.cp.phi = 0.05;
        cfg.max_iterations = 12;
        let mut env = StationaryEnvironment::new(9, 1.0, 0.3, 5, 2, vec![true, false]);
        let outcome = run_icp_with(&cfg, &mut env).unwrap();
        let report = outcome.report;
        let trace: Vec<String> = report
            .records
            .iter()
            .map(|r| format!("{:.3}", r.delta_q_raw))
            .collect();
        println!(
            "{gamma:4}   {:>14}   {:10.3}   {}",
            report
                .converged_at
                .map(|r| (r + 1).to_string())
                .unwrap_or_else(|| format!(">{}", cfg.max_iterations)),
            report.final_q[0].get(0).as_f64(),
            trace.join(" -> ")
        );
    }
    println!("\nsmaller gamma damps harder: slower approach, smoother trace.");
    println!("the live gamma sweep runs via: endoshift sweep --config configs/two_agent.cfg --param gamma --values 0.2,0.8,0.9");
}
