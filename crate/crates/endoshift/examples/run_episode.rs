//! Run one closed-loop two-agent episode and dump it as JSONL.

use endoshift::conformal::QuantileVector;
use endoshift::predictor::PredictorModel;
use endoshift::sim::{generate_scenario, run_episode, EpisodeParams, PolicySpec};

fn main() {
    let params = EpisodeParams::default();
    let scenario = generate_scenario(2, 10.0, 3, &params.sim).unwrap();
    println!("scenario (seed 3):");
    for (j, (start, goal)) in scenario.starts.iter().zip(&scenario.goals).enumerate() {
        println!(
            "  agent {j}: start ({:6.2}, {:6.2}) -> goal ({:6.2}, {:6.2})",
            start.x, start.y, goal.x, goal.y
        );
    }

    let policies: Vec<PolicySpec> = (0..2)
        .map(|_| {
            PolicySpec::avoiding(
                QuantileVector::zeros(params.horizon),
                PredictorModel::ConstantVelocity,
            )
        })
        .collect();
    let log = run_episode(&scenario, &policies, &params).unwrap();

    println!("\nepisode: {} steps ({:.1}s)", log.len(), log.len() as f64 * log.dt);
    for (j, reached) in log.events.goal_reached_step.iter().enumerate() {
        match reached {
            Some(t) => println!("  agent {j} reached its goal at t = {:.1}s", *t as f64 * log.dt),
            None => println!("  agent {j} never reached its goal"),
        }
    }
    match log.events.collision_step {
        Some(t) => println!("  collision at t = {:.1}s", t as f64 * log.dt),
        None => println!("  no collision"),
    }

    let min_gap = log
        .states
        .iter()
        .map(|s| s[0].position().distance(&s[1].position()))
        .fold(f64::INFINITY, f64::min);
    println!("  closest approach: {min_gap:.3} m");

    let path = std::env::temp_dir().join("endoshift_episode.jsonl");
    let file = std::fs::File::create(&path).unwrap();
    log.write_jsonl(std::io::BufWriter::new(file)).unwrap();
    println!("\nwrote {}", path.display());
}
