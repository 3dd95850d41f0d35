//! Calibrate per-step thresholds from synthetic nonconformity scores, check
//! them against fresh test scores, and print the dataset-conditional
//! coverage bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use endoshift::conformal::{calibrate, coverage_lower_bound, misdetection, smooth, ScoreMatrix};

fn draw_scores(rng: &mut ChaCha8Rng, n: usize, horizon: usize) -> ScoreMatrix {
    // Errors grow with the horizon step, like a real forecaster's.
    let rows = (0..n)
        .map(|_| {
            (1..=horizon)
                .map(|k| {
                    let scale = 0.1 * k as f64;
                    scale * (1.0 - rng.gen::<f64>()).ln().abs()
                })
                .collect()
        })
        .collect();
    ScoreMatrix::from_rows(rows).unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (k, eps, delta) = (250usize, 0.15, 0.01);
    let horizon = 10;

    let calibration = draw_scores(&mut rng, k, horizon);
    let q_hat = calibrate(&calibration, eps).unwrap();
    println!("calibrated thresholds (K = {k}, epsilon = {eps}):");
    for (i, t) in q_hat.thresholds().iter().enumerate() {
        println!("  step {:2}: {:.3} m", i + 1, t.as_f64());
    }

    let test = draw_scores(&mut rng, 2000, horizon);
    let stats = misdetection(&test, &q_hat).unwrap();
    println!(
        "\nmisdetection on 2000 fresh rows: {:.2}% (target <= {:.0}%)",
        100.0 * stats.overall,
        100.0 * eps
    );

    let bound = coverage_lower_bound(k, eps, delta).unwrap();
    println!("dataset-conditional coverage bound (delta = {delta}): {bound:.4}");

    // The smoothing filter damps a threshold update.
    let next = calibrate(&draw_scores(&mut rng, k, horizon), eps).unwrap();
    let smoothed = smooth(&q_hat, &next, 0.8).unwrap();
    println!(
        "\nsmoothing with gamma = 0.8: step 10 goes {:.3} -> {:.3} (raw recalibration {:.3})",
        q_hat.get(9).as_f64(),
        smoothed.get(9).as_f64(),
        next.get(9).as_f64()
    );
}
