//! Integrate the kinematic bicycle model open-loop: accelerate, hold a
//! steering angle, and print the resulting arc.

use endoshift::dynamics::{rollout, AgentState, Control, DynamicsParams};

fn main() {
    let params = DynamicsParams::default();
    let start = AgentState::new(0.0, 0.0, 0.0, 0.0);

    // Ten steps of full throttle, then a constant left turn.
    let mut controls = vec![Control::new(0.0, params.a_max); 10];
    controls.extend(vec![Control::new(0.3, 0.0); 20]);

    let states = rollout(&start, &controls, &params).expect("controls in bounds");
    println!("  t      x       y    theta      v");
    for (k, s) in states.iter().enumerate() {
        if k % 3 == 0 {
            println!(
                "{:4.1}  {:6.2}  {:6.2}  {:6.2}  {:5.2}",
                (k + 1) as f64 * params.dt,
                s.x,
                s.y,
                s.theta,
                s.v
            );
        }
    }
    let last = states.last().unwrap();
    println!(
        "\nafter {:.1}s: position ({:.2}, {:.2}), heading {:.2} rad, speed {:.2} m/s",
        controls.len() as f64 * params.dt,
        last.x,
        last.y,
        last.theta,
        last.v
    );
}
