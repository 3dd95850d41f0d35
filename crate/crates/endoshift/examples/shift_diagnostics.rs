//! Estimate the contraction rate of a geometrically shifting score
//! distribution from finite samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use endoshift::analysis::contraction_estimate;
use endoshift::conformal::{calibrate, QuantileVector, ScoreMatrix};

fn main() {
    // Each round's scores drift toward a limit point with rate delta = 0.6;
    // the estimator only sees 500 samples per round.
    let delta: f64 = 0.6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rounds: Vec<ScoreMatrix> = (0..6)
        .map(|r| {
            let mean = 1.0 + 4.0 * delta.powi(r);
            let rows: Vec<Vec<f64>> = (0..500)
                .map(|_| {
                    (0..5)
                        .map(|_| (mean + rng.gen_range(-0.05..0.05)).max(0.0))
                        .collect()
                })
                .collect();
            ScoreMatrix::from_rows(rows).unwrap()
        })
        .collect();
    let q_hats: Vec<QuantileVector> = rounds.iter().map(|m| calibrate(m, 0.15).unwrap()).collect();

    let estimate = contraction_estimate(&rounds, &q_hats, None, 32, 1).unwrap();
    println!("round-to-round shift:");
    println!(" from   W1(pooled)   ratio   CP-Lipschitz proxy");
    for t in &estimate.transitions {
        println!(
            "  {:2}    {:8.4}    {:>5}   {:>6}",
            t.from_round,
            t.w1_pooled,
            t.contraction_ratio
                .map(|r| format!("{r:.3}"))
                .unwrap_or_else(|| "-".into()),
            t.cp_lipschitz_proxy
                .map(|l| format!("{l:.3}"))
                .unwrap_or_else(|| "-".into()),
        );
    }
    println!(
        "\nestimated contraction rate {:.3} (generator uses {delta})",
        estimate.contraction_rate().unwrap()
    );
}
