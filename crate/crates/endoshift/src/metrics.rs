//! Evaluation metrics over a set of episodes: collision rate, misdetection,
//! success rate, average navigation time, and deviation from the reference
//! path. Rates are percentages; the reference path of an agent is the
//! straight segment from its start to its goal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{self, QuantileVector, ScoreMatrix};
use crate::sim::EpisodeLog;
use crate::trajectory::Position;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percentage of episodes in which any agent collided.
    pub collision_rate: f64,
    /// Pooled misdetection percentage and per-step breakdown; absent when no
    /// agent deployed a calibrated threshold.
    pub misdetection_rate: Option<f64>,
    pub misdetection_per_step: Option<Vec<f64>>,
    /// Percentage of episodes where the ego reached its goal in time and no
    /// collision occurred anywhere.
    pub success_rate: f64,
    /// Mean time (s) to goal over successful attempts; absent when nothing
    /// succeeded.
    pub avg_nav_time_s: Option<f64>,
    /// Mean distance (m) to the start-goal segment, ego and others.
    pub deviation_ego: f64,
    pub deviation_other: f64,
    pub n_episodes: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("metrics need at least one episode")]
    EmptyEpisodeSet,
    #[error("expected {expected} per-agent threshold slots, got {found}")]
    QuantileSlotMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Conformal(conformal::ConformalError),
}

fn point_segment_distance(p: &Position, a: &Position, b: &Position) -> f64 {
    let abx = b.x - a.x;
    let aby = b.y - a.y;
    let len2 = abx * abx + aby * aby;
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = ((p.x - a.x) * abx + (p.y - a.y) * aby) / len2;
    let t = t.clamp(0.0, 1.0);
    let proj = Position::new(a.x + t * abx, a.y + t * aby);
    p.distance(&proj)
}

struct EpisodeSummary {
    collided: bool,
    ego_success: bool,
    /// Goal-reach times (s) of the nav-time agents in collision-free episodes.
    nav_times: Vec<f64>,
    deviation_sums: Vec<f64>,
    deviation_counts: Vec<usize>,
    /// Score rows of the CP-aware observers, aligned with `qs`.
    score_rows: Vec<Option<Vec<f64>>>,
}

/// Compute the evaluation metrics over a test set.
///
/// `qs[j]` is the threshold vector agent `j` deployed, or `None` when the
/// agent ran without calibrated uncertainty (its forecasts then contribute no
/// misdetection entries). Navigation time averages over the CP-aware agents'
/// successful attempts; when no agent is CP-aware (the no-calibration
/// baseline) it falls back to the ego agent.
pub fn compute(
    episodes: &[EpisodeLog],
    qs: &[Option<QuantileVector>],
) -> Result<MetricsReport, MetricsError> {
    let first = episodes.first().ok_or(MetricsError::EmptyEpisodeSet)?;
    let n_agents = first.n_agents();
    if qs.len() != n_agents {
        return Err(MetricsError::QuantileSlotMismatch {
            expected: n_agents,
            found: qs.len(),
        });
    }
    let nav_agents: Vec<usize> = {
        let aware: Vec<usize> = (0..n_agents).filter(|j| qs[*j].is_some()).collect();
        if aware.is_empty() {
            vec![0]
        } else {
            aware
        }
    };

    let summaries: Vec<EpisodeSummary> = episodes
        .par_iter()
        .map(|log| summarize(log, qs, &nav_agents))
        .collect::<Result<_, _>>()?;

    let n = summaries.len() as f64;
    let collisions = summaries.iter().filter(|s| s.collided).count();
    let successes = summaries.iter().filter(|s| s.ego_success).count();

    let mut nav_times = Vec::new();
    for s in &summaries {
        nav_times.extend_from_slice(&s.nav_times);
    }
    let avg_nav_time_s = if nav_times.is_empty() {
        None
    } else {
        Some(nav_times.iter().sum::<f64>() / nav_times.len() as f64)
    };

    let mut dev_sum = vec![0.0_f64; n_agents];
    let mut dev_count = vec![0usize; n_agents];
    for s in &summaries {
        for j in 0..n_agents {
            dev_sum[j] += s.deviation_sums[j];
            dev_count[j] += s.deviation_counts[j];
        }
    }
    let agent_dev = |j: usize| -> f64 {
        if dev_count[j] == 0 {
            0.0
        } else {
            dev_sum[j] / dev_count[j] as f64
        }
    };
    let deviation_ego = agent_dev(0);
    let deviation_other = if n_agents > 1 {
        let sum: f64 = (1..n_agents).map(agent_dev).sum();
        sum / (n_agents - 1) as f64
    } else {
        0.0
    };

    // Pool misdetections over all CP-aware observers.
    let mut misdetection_rate = None;
    let mut misdetection_per_step = None;
    let horizon = first.horizon;
    let aware: Vec<usize> = (0..n_agents).filter(|j| qs[*j].is_some()).collect();
    if !aware.is_empty() {
        let mut per_step_misses = vec![0usize; horizon];
        let mut per_step_counts = vec![0usize; horizon];
        for (slot, j) in aware.iter().enumerate() {
            let q = qs[*j].as_ref().unwrap();
            let rows: Vec<Vec<f64>> = summaries
                .iter()
                .filter_map(|s| s.score_rows[slot].clone())
                .collect();
            if rows.is_empty() {
                continue;
            }
            let stats = conformal::misdetection(
                &ScoreMatrix::from_rows(rows.clone()).map_err(MetricsError::Conformal)?,
                q,
            )
            .map_err(MetricsError::Conformal)?;
            for k in 0..horizon {
                per_step_misses[k] += (stats.per_step[k] * rows.len() as f64).round() as usize;
                per_step_counts[k] += rows.len();
            }
        }
        if per_step_counts[0] > 0 {
            let per_step: Vec<f64> = (0..horizon)
                .map(|k| 100.0 * per_step_misses[k] as f64 / per_step_counts[k] as f64)
                .collect();
            let total_misses: usize = per_step_misses.iter().sum();
            let total_cells: usize = per_step_counts.iter().sum();
            misdetection_rate = Some(100.0 * total_misses as f64 / total_cells as f64);
            misdetection_per_step = Some(per_step);
        }
    }

    Ok(MetricsReport {
        collision_rate: 100.0 * collisions as f64 / n,
        misdetection_rate,
        misdetection_per_step,
        success_rate: 100.0 * successes as f64 / n,
        avg_nav_time_s,
        deviation_ego,
        deviation_other,
        n_episodes: summaries.len(),
    })
}

fn summarize(
    log: &EpisodeLog,
    qs: &[Option<QuantileVector>],
    nav_agents: &[usize],
) -> Result<EpisodeSummary, MetricsError> {
    let n_agents = log.n_agents();
    let collided = log.events.collision_step.is_some();
    let max_steps = (log.sim.timeout_s / log.dt).round() as usize;
    let reached_in_time = |j: usize| -> Option<usize> {
        log.events.goal_reached_step[j].filter(|t| *t <= max_steps)
    };
    let ego_success = !collided && reached_in_time(0).is_some();

    let mut nav_times = Vec::new();
    if !collided {
        for &j in nav_agents {
            if let Some(t) = reached_in_time(j) {
                nav_times.push(t as f64 * log.dt);
            }
        }
    }

    let mut deviation_sums = vec![0.0_f64; n_agents];
    let mut deviation_counts = vec![0usize; n_agents];
    for step in &log.states {
        for j in 0..n_agents {
            let d = point_segment_distance(
                &step[j].position(),
                &log.scenario.starts[j].position(),
                &log.scenario.goals[j],
            );
            deviation_sums[j] += d;
            deviation_counts[j] += 1;
        }
    }

    let mut score_rows = Vec::new();
    for (j, q) in qs.iter().enumerate() {
        if q.is_none() {
            continue;
        }
        // Episodes that terminate before any prediction resolves (an
        // immediate collision) contribute no misdetection row.
        score_rows.push(match log.score(j) {
            Ok(row) => Some(row),
            Err(conformal::ConformalError::EpisodeTooShort) => None,
            Err(e) => return Err(MetricsError::Conformal(e)),
        });
    }

    Ok(EpisodeSummary {
        collided,
        ego_success,
        nav_times,
        deviation_sums,
        deviation_counts,
        score_rows,
    })
}
