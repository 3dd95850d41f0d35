//! Distribution-shift diagnostics between calibration rounds: exact 1-D
//! Wasserstein distances on score distributions, sliced Wasserstein on
//! trajectory sets, and empirical contraction ratios of the round-to-round
//! shift.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{QuantileVector, ScoreMatrix};
use crate::trajectory::Trajectory;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AnalysisError {
    #[error("empty sample set")]
    EmptySamples,
    #[error("need at least {required} rounds, got {found}")]
    TooFewRounds { required: usize, found: usize },
    #[error("rounds disagree on the score horizon")]
    HorizonMismatch,
    #[error("quantile sequence length {found} does not match round count {expected}")]
    QuantileCountMismatch { expected: usize, found: usize },
}

/// Exact empirical 1-Wasserstein distance between two 1-D sample sets.
///
/// Equal sizes reduce to the mean absolute gap of matched order statistics;
/// unequal sizes integrate |F_a - F_b| over the merged support, which is the
/// same piecewise-constant quantile-function integral.
pub fn w1_1d(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::EmptySamples);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable_by(f64::total_cmp);
    sb.sort_unstable_by(f64::total_cmp);
    if sa.len() == sb.len() {
        let sum: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
        return Ok(sum / sa.len() as f64);
    }
    // CDF difference integrated over the union of sample points.
    let mut grid: Vec<f64> = sa.iter().chain(sb.iter()).copied().collect();
    grid.sort_unstable_by(f64::total_cmp);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut total = 0.0;
    for w in grid.windows(2) {
        while ia < sa.len() && sa[ia] <= w[0] {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= w[0] {
            ib += 1;
        }
        let fa = ia as f64 / na;
        let fb = ib as f64 / nb;
        total += (fa - fb).abs() * (w[1] - w[0]);
    }
    Ok(total)
}

/// Flatten a trajectory set to equal-length vectors: truncate to the
/// shortest common length across both sets (holding the final state when a
/// longer target is ever requested) and splay out positions step-major.
fn flatten_trajectories(set: &[Trajectory], len: usize) -> Vec<Vec<f64>> {
    set.iter()
        .map(|traj| {
            let mut v = Vec::with_capacity(len * traj.n_agents() * 2);
            for t in 0..len {
                let t = t.min(traj.len() - 1); // hold final state beyond the end
                for j in 0..traj.n_agents() {
                    let p = traj.position(t, j);
                    v.push(p.x);
                    v.push(p.y);
                }
            }
            v
        })
        .collect()
}

/// Monte-Carlo sliced 1-Wasserstein distance between two trajectory sets:
/// the average of `w1_1d` over `n_proj` random unit-vector projections.
/// Deterministic in the seed.
pub fn sliced_w1(
    a: &[Trajectory],
    b: &[Trajectory],
    n_proj: usize,
    seed: u64,
) -> Result<f64, AnalysisError> {
    if a.is_empty() || b.is_empty() || n_proj == 0 {
        return Err(AnalysisError::EmptySamples);
    }
    let len = a
        .iter()
        .chain(b.iter())
        .map(Trajectory::len)
        .min()
        .expect("sets checked non-empty");
    let fa = flatten_trajectories(a, len);
    let fb = flatten_trajectories(b, len);
    let dim = fa[0].len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions: Vec<Vec<f64>> = (0..n_proj)
        .map(|_| {
            let raw: Vec<f64> = (0..dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            raw.iter().map(|x| x / norm).collect()
        })
        .collect();

    let distances: Vec<f64> = directions
        .par_iter()
        .map(|u| {
            let project = |rows: &[Vec<f64>]| -> Vec<f64> {
                rows.iter()
                    .map(|r| r.iter().zip(u).map(|(x, w)| x * w).sum())
                    .collect()
            };
            w1_1d(&project(&fa), &project(&fb)).expect("projections are non-empty")
        })
        .collect();
    Ok(distances.iter().sum::<f64>() / n_proj as f64)
}

/// Shift between consecutive rounds r and r+1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftTransition {
    pub from_round: usize,
    /// W1 between the pooled score distributions of the two rounds.
    pub w1_pooled: f64,
    /// W1 per horizon step.
    pub w1_per_step: Vec<f64>,
    /// Sliced W1 between the rounds' trajectory sets, when trajectories were
    /// recorded.
    pub sliced_w1_trajectories: Option<f64>,
    /// rho_r = W1(r+1, r+2) / W1(r, r+1); absent on the last transition or
    /// when the denominator degenerates.
    pub contraction_ratio: Option<f64>,
    /// |q_hat^(r+2) - q_hat^(r+1)| / W1(scores_r+1, scores_r): how strongly
    /// the calibrated thresholds respond to score-space shift.
    pub cp_lipschitz_proxy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftEstimate {
    pub transitions: Vec<ShiftTransition>,
}

impl ShiftEstimate {
    /// Geometric mean of the defined contraction ratios.
    pub fn contraction_rate(&self) -> Option<f64> {
        let ratios: Vec<f64> = self
            .transitions
            .iter()
            .filter_map(|t| t.contraction_ratio)
            .collect();
        if ratios.is_empty() {
            return None;
        }
        let log_mean = ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64;
        Some(log_mean.exp())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let steps = self
            .transitions
            .first()
            .map(|t| t.w1_per_step.len())
            .unwrap_or(0);
        let mut header = vec!["from_round".to_string(), "w1_pooled".to_string()];
        header.extend((1..=steps).map(|k| format!("w1_step_{k}")));
        header.push("sliced_w1_traj".into());
        header.push("contraction_ratio".into());
        header.push("cp_lipschitz_proxy".into());
        writeln!(w, "{}", header.join(","))?;
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &self.transitions {
            let mut row = vec![t.from_round.to_string(), t.w1_pooled.to_string()];
            row.extend(t.w1_per_step.iter().map(|v| v.to_string()));
            row.push(opt(&t.sliced_w1_trajectories));
            row.push(opt(&t.contraction_ratio));
            row.push(opt(&t.cp_lipschitz_proxy));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

const DEGENERATE_SHIFT: f64 = 1e-9;

/// Estimate the round-to-round distribution shift and its contraction
/// behavior from stored per-round score matrices (and optionally trajectory
/// sets). `q_hats` are the raw calibrated thresholds, one per round, used
/// for the CP-Lipschitz proxy.
pub fn contraction_estimate(
    score_rounds: &[ScoreMatrix],
    q_hats: &[QuantileVector],
    trajectory_rounds: Option<&[Vec<Trajectory>]>,
    n_proj: usize,
    seed: u64,
) -> Result<ShiftEstimate, AnalysisError> {
    if score_rounds.len() < 3 {
        return Err(AnalysisError::TooFewRounds {
            required: 3,
            found: score_rounds.len(),
        });
    }
    if q_hats.len() != score_rounds.len() {
        return Err(AnalysisError::QuantileCountMismatch {
            expected: score_rounds.len(),
            found: q_hats.len(),
        });
    }
    let horizon = score_rounds[0].horizon();
    if score_rounds.iter().any(|m| m.horizon() != horizon) {
        return Err(AnalysisError::HorizonMismatch);
    }

    let n_transitions = score_rounds.len() - 1;
    let mut pooled = Vec::with_capacity(n_transitions);
    let mut per_step = Vec::with_capacity(n_transitions);
    for r in 0..n_transitions {
        let (a, b) = (&score_rounds[r], &score_rounds[r + 1]);
        pooled.push(w1_1d(&a.pooled(), &b.pooled())?);
        per_step.push(
            (0..horizon)
                .map(|k| w1_1d(&a.column(k), &b.column(k)))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }

    let mut transitions = Vec::with_capacity(n_transitions);
    for r in 0..n_transitions {
        let contraction_ratio = if r + 1 < n_transitions && pooled[r] > DEGENERATE_SHIFT {
            Some(pooled[r + 1] / pooled[r])
        } else {
            None
        };
        // q_hat response across the same transition.
        let cp_lipschitz_proxy = if pooled[r] > DEGENERATE_SHIFT {
            q_hats[r + 1]
                .l2_distance(&q_hats[r])
                .ok()
                .filter(|d| d.is_finite())
                .map(|d| d / pooled[r])
        } else {
            None
        };
        let sliced_w1_trajectories = match trajectory_rounds {
            Some(rounds) if rounds.len() == score_rounds.len() => Some(sliced_w1(
                &rounds[r],
                &rounds[r + 1],
                n_proj,
                seed.wrapping_add(r as u64),
            )?),
            _ => None,
        };
        transitions.push(ShiftTransition {
            from_round: r,
            w1_pooled: pooled[r],
            w1_per_step: per_step[r].clone(),
            sliced_w1_trajectories,
            contraction_ratio,
            cp_lipschitz_proxy,
        });
    }
    Ok(ShiftEstimate { transitions })
}
