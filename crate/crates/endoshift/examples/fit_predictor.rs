//! Fit the ridge autoregressive forecaster on synthetic trajectories and
//! compare its multi-step forecasts with the constant-velocity baseline.

use endoshift::predictor::{fit, predict, ObservationHistory, PredictorModel};
use endoshift::trajectory::{Position, Trajectory};

fn spiral(n_steps: usize, phase: f64) -> Trajectory {
    // Two agents on gently curving paths.
    let steps = (0..n_steps)
        .map(|t| {
            let t = t as f64 * 0.1;
            vec![
                Position::new(t + phase, (0.8 * t + phase).sin() * 0.5),
                Position::new(3.0 - t, 1.0 + (0.6 * t + phase).cos() * 0.4),
            ]
        })
        .collect();
    Trajectory::new(steps).unwrap()
}

fn main() {
    let dataset: Vec<Trajectory> = (0..30).map(|i| spiral(40, 0.37 * i as f64)).collect();
    let model = fit(&dataset, 5, 1e-6).expect("enough training rows");

    let fresh = spiral(40, 10.123);
    let history =
        ObservationHistory::new(fresh.steps()[..20].to_vec(), 0).expect("non-empty history");
    let horizon = 10;

    for (name, m) in [("autoregressive", &model), ("constant-velocity", &PredictorModel::ConstantVelocity)] {
        let forecast = predict(m, &history, horizon).expect("history long enough");
        let mut worst = 0.0_f64;
        for k in 1..=horizon {
            for agent in 0..2 {
                let err = forecast.track(agent)[k - 1].distance(&fresh.position(19 + k, agent));
                worst = worst.max(err);
            }
        }
        println!("{name:>18}: worst {horizon}-step error {worst:.4} m");
    }

    if let PredictorModel::Autoregressive(ar) = &model {
        println!(
            "\nmodel: window {}, ridge {:.0e}, {}x{} weight matrix",
            ar.window,
            ar.ridge,
            ar.weights.len(),
            ar.weights[0].len()
        );
    }
}
