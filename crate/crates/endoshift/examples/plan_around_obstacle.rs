//! Plan around a predicted obstacle with and without conformal tightening
//! and show how the enforced clearance grows.

use endoshift::conformal::{QuantileVector, Threshold};
use endoshift::dynamics::{AgentState, DynamicsParams};
use endoshift::mpc::{plan, MpcProblem};
use endoshift::trajectory::Position;

fn main() {
    let horizon = 10;
    let start = AgentState::new(0.0, 0.0, 0.0, 1.0);
    let goal = AgentState::new(5.0, 0.0, 0.0, 0.0);
    let prob = MpcProblem::new(horizon, goal, DynamicsParams::default());

    // Obstacle predicted to drift slowly across the straight-line path.
    let obstacle: Vec<Position> = (0..horizon)
        .map(|k| Position::new(2.0, 0.3 - 0.05 * k as f64))
        .collect();
    let obstacles = vec![obstacle.clone()];

    for (label, q) in [
        ("q = 0 (no uncertainty)", QuantileVector::zeros(horizon)),
        (
            "q = 0.4 m at every step",
            QuantileVector::new(vec![Threshold::Finite(0.4); horizon]).unwrap(),
        ),
    ] {
        let result = plan(&start, &obstacles, &q, &prob, None).unwrap();
        let clearance = result
            .states
            .iter()
            .enumerate()
            .map(|(k, s)| s.position().distance(&obstacle[k]))
            .fold(f64::INFINITY, f64::min);
        println!("{label}:");
        println!("  status {:?}, cost {:.2}", result.status, result.cost);
        println!(
            "  min predicted clearance {clearance:.3} m (constraint {:.3} m)",
            prob.safe_distance + q.get(0).as_f64()
        );
        println!(
            "  first control: steering {:.3} rad, acceleration {:.3} m/s^2\n",
            result.controls[0].phi, result.controls[0].a
        );
    }
}
