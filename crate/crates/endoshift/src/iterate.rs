//! The outer calibration loops: iterative recalibration with a fixed
//! predictor (ICP), the retraining variant (ISCP), the one-shot baseline
//! (BCP), and the uncalibrated baseline (NCP).
//!
//! Each iteration deploys the current per-agent thresholds, collects a fresh
//! batch of episodes, scores them, calibrates raw thresholds, smooths them
//! into the next deployment, and stops once the raw update
//! `max_j ||q_hat_j^(r+1) - q_j^(r)||_2` falls to the tolerance. Episode
//! collection sits behind the [`Environment`] trait so the loop can be
//! exercised against deterministic stubs as well as the live simulator.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, AnalysisError, ShiftEstimate};
use crate::conformal::{
    self, ConformalError, CpConfig, MisdetectionStats, QuantileVector, ScoreMatrix,
};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::predictor::{self, PredictorError, PredictorModel};
use crate::sim::{self, EpisodeLog, EpisodeParams, PlannerMode, PolicySpec, Scenario, SimError};
use crate::trajectory::Trajectory;

/// Everything one campaign needs: calibration hyperparameters, budgets, the
/// agent roster, and the episode machinery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    pub cp: CpConfig,
    /// Calibration episodes per iteration (K).
    pub calibration_episodes: usize,
    /// Retraining episodes per iteration (K_tune, ISCP only).
    pub tuning_episodes: usize,
    /// Hard cap on iterations; the loop may oscillate past its stopping
    /// point, so a cap is required.
    pub max_iterations: usize,
    /// Calibration budget of the one-shot baseline.
    pub bcp_budget: usize,
    pub n_agents: usize,
    /// Which agents deploy calibrated thresholds (the rest keep zeros).
    pub cp_aware: Vec<bool>,
    pub root_seed: u64,
    /// Arena circle diameter (m).
    pub diameter: f64,
    /// Predictor window and ridge coefficient, used wherever a model is
    /// (re)fit.
    pub window: usize,
    pub ridge: f64,
    /// Projections for the sliced trajectory-shift diagnostic.
    pub n_projections: usize,
    pub episode: EpisodeParams,
}

impl IterationConfig {
    pub fn two_agent_default(root_seed: u64) -> Self {
        Self {
            cp: CpConfig {
                epsilon: 0.15,
                delta: 0.01,
                gamma: 0.8,
                phi: 0.1,
            },
            calibration_episodes: 250,
            tuning_episodes: 250,
            max_iterations: 12,
            bcp_budget: 1000,
            n_agents: 2,
            cp_aware: vec![true, false],
            root_seed,
            diameter: 10.0,
            window: 5,
            ridge: 1e-6,
            n_projections: 64,
            episode: EpisodeParams::default(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.episode.horizon
    }

    pub fn validate(&self) -> Result<(), IterateError> {
        self.cp.validate().map_err(IterateError::Conformal)?;
        if self.calibration_episodes == 0 {
            return Err(IterateError::InvalidConfig("calibration_episodes must be >= 1"));
        }
        if self.max_iterations == 0 {
            return Err(IterateError::InvalidConfig("max_iterations must be >= 1"));
        }
        if self.episode.horizon == 0 {
            return Err(IterateError::InvalidConfig("horizon must be >= 1"));
        }
        if self.cp_aware.len() != self.n_agents {
            return Err(IterateError::InvalidConfig(
                "cp_aware must list one flag per agent",
            ));
        }
        if self.n_agents < 2 {
            return Err(IterateError::InvalidConfig("need at least two agents"));
        }
        Ok(())
    }

    fn aware_agents(&self) -> Vec<usize> {
        (0..self.n_agents).filter(|j| self.cp_aware[*j]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ncp,
    Bcp,
    Icp,
    Iscp,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ncp => "ncp",
            Method::Bcp => "bcp",
            Method::Icp => "icp",
            Method::Iscp => "iscp",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IterateError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("round produced no usable calibration scores")]
    NoScores,
    #[error(transparent)]
    Conformal(ConformalError),
    #[error(transparent)]
    Sim(SimError),
    #[error(transparent)]
    Predictor(PredictorError),
    #[error(transparent)]
    Metrics(MetricsError),
    #[error(transparent)]
    Analysis(AnalysisError),
}

/// Stable per-episode seed derivation (splitmix-style), so any episode can
/// be reproduced from (root, stream, index) regardless of thread count.
pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    let mut z = root
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const CALIBRATION_STREAM: u64 = 1;
const TUNING_STREAM: u64 = 2;
const TEST_STREAM: u64 = 3;

/// One collected calibration round.
pub struct RoundData {
    /// Per-agent score matrices; populated for CP-aware agents.
    pub scores: Vec<Option<ScoreMatrix>>,
    /// The episodes behind the scores; stubs may leave this empty.
    pub episodes: Vec<EpisodeLog>,
}

/// Source of calibration data under a deployed set of thresholds. The live
/// implementation runs the simulator; tests substitute deterministic stubs.
pub trait Environment {
    /// Deploy `qs` (one vector per agent) and collect `k` scored episodes.
    fn calibration_round(
        &mut self,
        qs: &[QuantileVector],
        mode: PlannerMode,
        k: usize,
        round: usize,
    ) -> Result<RoundData, IterateError>;

    /// Collect `k` fresh episodes under the current policy and refit the
    /// predictor on the cumulative pool.
    fn tuning_round(
        &mut self,
        qs: &[QuantileVector],
        mode: PlannerMode,
        k: usize,
        round: usize,
    ) -> Result<(), IterateError>;

    /// Snapshot of the predictor agents currently deploy.
    fn predictor(&self) -> PredictorModel;
}

/// Simulator-backed environment.
pub struct LiveEnvironment {
    cfg: IterationConfig,
    predictor: PredictorModel,
    tuning_pool: Vec<Trajectory>,
}

impl LiveEnvironment {
    pub fn new(cfg: &IterationConfig, predictor: PredictorModel) -> Self {
        Self {
            cfg: cfg.clone(),
            predictor,
            tuning_pool: Vec::new(),
        }
    }

    fn collect(
        &self,
        qs: &[QuantileVector],
        mode: PlannerMode,
        k: usize,
        stream: u64,
        round: usize,
    ) -> Result<Vec<EpisodeLog>, IterateError> {
        let policies: Vec<PolicySpec> = (0..self.cfg.n_agents)
            .map(|j| PolicySpec {
                quantile: qs[j].clone(),
                predictor: self.predictor.clone(),
                mode,
            })
            .collect();
        (0..k as u64)
            .into_par_iter()
            .map(|i| {
                let seed = derive_seed(self.cfg.root_seed, stream * 1000 + round as u64, i);
                let scenario =
                    sim::generate_scenario(self.cfg.n_agents, self.cfg.diameter, seed, &self.cfg.episode.sim)
                        .map_err(IterateError::Sim)?;
                sim::run_episode(&scenario, &policies, &self.cfg.episode).map_err(IterateError::Sim)
            })
            .collect()
    }
}

/// Score a batch of episodes for every CP-aware agent. Episodes too short to
/// resolve any prediction (immediate collisions) drop out of the matrix.
fn score_batch(
    episodes: &[EpisodeLog],
    aware: &[usize],
    n_agents: usize,
) -> Result<Vec<Option<ScoreMatrix>>, IterateError> {
    let mut scores: Vec<Option<ScoreMatrix>> = vec![None; n_agents];
    for &j in aware {
        let rows: Vec<Vec<f64>> = episodes
            .iter()
            .filter_map(|log| match log.score(j) {
                Ok(row) => Some(Ok(row)),
                Err(ConformalError::EpisodeTooShort) => None,
                Err(e) => Some(Err(IterateError::Conformal(e))),
            })
            .collect::<Result<_, _>>()?;
        if rows.is_empty() {
            return Err(IterateError::NoScores);
        }
        scores[j] = Some(ScoreMatrix::from_rows(rows).map_err(IterateError::Conformal)?);
    }
    Ok(scores)
}

impl Environment for LiveEnvironment {
    fn calibration_round(
        &mut self,
        qs: &[QuantileVector],
        mode: PlannerMode,
        k: usize,
        round: usize,
    ) -> Result<RoundData, IterateError> {
        let episodes = self.collect(qs, mode, k, CALIBRATION_STREAM, round)?;
        let scores = score_batch(&episodes, &self.cfg.aware_agents(), self.cfg.n_agents)?;
        Ok(RoundData { scores, episodes })
    }

    fn tuning_round(
        &mut self,
        qs: &[QuantileVector],
        mode: PlannerMode,
        k: usize,
        round: usize,
    ) -> Result<(), IterateError> {
        let episodes = self.collect(qs, mode, k, TUNING_STREAM, round)?;
        self.tuning_pool
            .extend(episodes.iter().map(EpisodeLog::trajectory));
        self.predictor = predictor::fit(&self.tuning_pool, self.cfg.window, self.cfg.ridge)
            .map_err(IterateError::Predictor)?;
        Ok(())
    }

    fn predictor(&self) -> PredictorModel {
        self.predictor.clone()
    }
}

/// Stub environment whose calibration rounds return preset score matrices in
/// order, regardless of the deployed thresholds. Exercises the loop
/// arithmetic in isolation.
pub struct FixedScoreEnvironment {
    pub rounds: Vec<ScoreMatrix>,
    pub n_agents: usize,
    pub cp_aware: Vec<bool>,
    cursor: usize,
}

impl FixedScoreEnvironment {
    pub fn new(rounds: Vec<ScoreMatrix>, n_agents: usize, cp_aware: Vec<bool>) -> Self {
        Self {
            rounds,
            n_agents,
            cp_aware,
            cursor: 0,
        }
    }
}

impl Environment for FixedScoreEnvironment {
    fn calibration_round(
        &mut self,
        _qs: &[QuantileVector],
        _mode: PlannerMode,
        _k: usize,
        _round: usize,
    ) -> Result<RoundData, IterateError> {
        let matrix = self
            .rounds
            .get(self.cursor)
            .cloned()
            .ok_or(IterateError::NoScores)?;
        self.cursor += 1;
        let scores = (0..self.n_agents)
            .map(|j| self.cp_aware[j].then(|| matrix.clone()))
            .collect();
        Ok(RoundData {
            scores,
            episodes: Vec::new(),
        })
    }

    fn tuning_round(
        &mut self,
        _qs: &[QuantileVector],
        _mode: PlannerMode,
        _k: usize,
        _round: usize,
    ) -> Result<(), IterateError> {
        Ok(())
    }

    fn predictor(&self) -> PredictorModel {
        PredictorModel::ConstantVelocity
    }
}

/// Stub environment drawing every score cell i.i.d. from a fixed
/// distribution: uniform on [base, base + spread). The closed loop sees a
/// stationary world, so the thresholds must settle.
pub struct StationaryEnvironment {
    pub seed: u64,
    pub base: f64,
    pub spread: f64,
    pub horizon: usize,
    pub n_agents: usize,
    pub cp_aware: Vec<bool>,
    draws: u64,
}

impl StationaryEnvironment {
    pub fn new(seed: u64, base: f64, spread: f64, horizon: usize, n_agents: usize, cp_aware: Vec<bool>) -> Self {
        Self {
            seed,
            base,
            spread,
            horizon,
            n_agents,
            cp_aware,
            draws: 0,
        }
    }

    fn draw_matrix(&mut self, k: usize) -> ScoreMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 7, self.draws));
        self.draws += 1;
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                (0..self.horizon)
                    .map(|_| self.base + rng.gen_range(0.0..self.spread))
                    .collect()
            })
            .collect();
        ScoreMatrix::from_rows(rows).expect("stub scores are valid")
    }
}

impl Environment for StationaryEnvironment {
    fn calibration_round(
        &mut self,
        _qs: &[QuantileVector],
        _mode: PlannerMode,
        k: usize,
        _round: usize,
    ) -> Result<RoundData, IterateError> {
        let matrix = self.draw_matrix(k);
        let scores = (0..self.n_agents)
            .map(|j| self.cp_aware[j].then(|| matrix.clone()))
            .collect();
        Ok(RoundData {
            scores,
            episodes: Vec::new(),
        })
    }

    fn tuning_round(
        &mut self,
        _qs: &[QuantileVector],
        _mode: PlannerMode,
        _k: usize,
        _round: usize,
    ) -> Result<(), IterateError> {
        Ok(())
    }

    fn predictor(&self) -> PredictorModel {
        PredictorModel::ConstantVelocity
    }
}

/// One iteration's bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Thresholds deployed during this round's collection, per agent.
    pub deployed_q: Vec<QuantileVector>,
    /// Raw calibrated thresholds from this round (CP-aware agents).
    pub q_hat: Vec<Option<QuantileVector>>,
    /// Smoothed thresholds that the next round deploys.
    pub next_q: Vec<QuantileVector>,
    /// max_j ||q_hat_j^(r+1) - q_j^(r)||_2 (the stopping statistic;
    /// infinite when a sentinel appears).
    pub delta_q_raw: f64,
    /// max_j ||q_j^(r+1) - q_j^(r)||_2 for reference.
    pub delta_q_smoothed: f64,
    /// Misdetection of this round's scores against the deployed thresholds,
    /// pooled over CP-aware agents; absent when the deployment was
    /// uncalibrated (all zeros).
    pub misdetection: Option<MisdetectionStats>,
    /// Episode metrics of the deployed policy; absent for stub environments.
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentShift {
    pub agent: usize,
    pub estimate: ShiftEstimate,
}

/// Raw per-round score matrices of one CP-aware agent, kept for audit and
/// offline re-calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentScores {
    pub agent: usize,
    pub rounds: Vec<ScoreMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub method: Method,
    pub records: Vec<IterationRecord>,
    /// Thresholds after the final smoothing step, per agent.
    pub final_q: Vec<QuantileVector>,
    /// Iteration index at which the stopping criterion fired.
    pub converged_at: Option<usize>,
    pub calibration_episodes_consumed: usize,
    pub tuning_episodes_consumed: usize,
    /// Score-space shift diagnostics per CP-aware agent (needs >= 3 rounds).
    pub shift: Vec<AgentShift>,
    /// Raw calibration scores per CP-aware agent and round.
    pub scores: Vec<AgentScores>,
}

fn pooled_misdetection(
    scores: &[Option<ScoreMatrix>],
    qs: &[QuantileVector],
    aware: &[usize],
) -> Result<Option<MisdetectionStats>, IterateError> {
    if aware.iter().all(|j| qs[*j].is_all_zero()) {
        return Ok(None);
    }
    let horizon = qs[aware[0]].len();
    let mut misses = vec![0.0_f64; horizon];
    let mut counts = vec![0.0_f64; horizon];
    for &j in aware {
        let matrix = scores[j].as_ref().ok_or(IterateError::NoScores)?;
        let stats = conformal::misdetection(matrix, &qs[j]).map_err(IterateError::Conformal)?;
        let n = matrix.n_trajectories() as f64;
        for k in 0..horizon {
            misses[k] += stats.per_step[k] * n;
            counts[k] += n;
        }
    }
    let per_step: Vec<f64> = (0..horizon).map(|k| misses[k] / counts[k]).collect();
    let overall = misses.iter().sum::<f64>() / counts.iter().sum::<f64>();
    Ok(Some(MisdetectionStats { per_step, overall }))
}

struct LoopState {
    records: Vec<IterationRecord>,
    qs: Vec<QuantileVector>,
    converged_at: Option<usize>,
    score_history: Vec<Vec<ScoreMatrix>>,
    qhat_history: Vec<Vec<QuantileVector>>,
    trajectory_rounds: Vec<Vec<Trajectory>>,
    episodes_with_logs: bool,
}

fn run_loop<E: Environment>(
    cfg: &IterationConfig,
    env: &mut E,
    method: Method,
) -> Result<(LoopState, usize, usize), IterateError> {
    cfg.validate()?;
    let aware = cfg.aware_agents();
    if aware.is_empty() {
        return Err(IterateError::InvalidConfig(
            "iterative methods need at least one CP-aware agent",
        ));
    }
    let h = cfg.horizon();
    let mut state = LoopState {
        records: Vec::new(),
        qs: vec![QuantileVector::zeros(h); cfg.n_agents],
        converged_at: None,
        score_history: vec![Vec::new(); cfg.n_agents],
        qhat_history: vec![Vec::new(); cfg.n_agents],
        trajectory_rounds: Vec::new(),
        episodes_with_logs: true,
    };
    let mut calibration_consumed = 0usize;
    let mut tuning_consumed = 0usize;

    for r in 0..cfg.max_iterations {
        // ISCP iteration 0 seeds predictor training with agents that ignore
        // each other; calibration always deploys the current (avoiding)
        // policy so the scores carry interaction spread.
        if method == Method::Iscp && cfg.tuning_episodes > 0 {
            let tuning_mode = if r == 0 {
                PlannerMode::IgnoreOthers
            } else {
                PlannerMode::Avoiding
            };
            env.tuning_round(&state.qs, tuning_mode, cfg.tuning_episodes, r)?;
            tuning_consumed += cfg.tuning_episodes;
        }
        let data =
            env.calibration_round(&state.qs, PlannerMode::Avoiding, cfg.calibration_episodes, r)?;
        calibration_consumed += cfg.calibration_episodes;

        let mut q_hat: Vec<Option<QuantileVector>> = vec![None; cfg.n_agents];
        for &j in &aware {
            let matrix = data.scores[j].as_ref().ok_or(IterateError::NoScores)?;
            let calibrated =
                conformal::calibrate(matrix, cfg.cp.epsilon).map_err(IterateError::Conformal)?;
            state.score_history[j].push(matrix.clone());
            state.qhat_history[j].push(calibrated.clone());
            q_hat[j] = Some(calibrated);
        }

        // Stopping statistic on the raw thresholds, max over agents.
        let mut delta_raw = 0.0_f64;
        for &j in &aware {
            let d = q_hat[j]
                .as_ref()
                .unwrap()
                .l2_distance(&state.qs[j])
                .map_err(IterateError::Conformal)?;
            delta_raw = delta_raw.max(d);
        }

        let mut next_q = state.qs.clone();
        for &j in &aware {
            next_q[j] = conformal::smooth(&state.qs[j], q_hat[j].as_ref().unwrap(), cfg.cp.gamma)
                .map_err(IterateError::Conformal)?;
        }
        let mut delta_smoothed = 0.0_f64;
        for &j in &aware {
            let d = next_q[j]
                .l2_distance(&state.qs[j])
                .map_err(IterateError::Conformal)?;
            delta_smoothed = delta_smoothed.max(d);
        }

        let misdetection = pooled_misdetection(&data.scores, &state.qs, &aware)?;
        let metrics = if data.episodes.is_empty() {
            state.episodes_with_logs = false;
            None
        } else {
            let q_slots: Vec<Option<QuantileVector>> = (0..cfg.n_agents)
                .map(|j| {
                    (cfg.cp_aware[j] && !state.qs[j].is_all_zero()).then(|| state.qs[j].clone())
                })
                .collect();
            state
                .trajectory_rounds
                .push(data.episodes.iter().map(EpisodeLog::trajectory).collect());
            Some(metrics::compute(&data.episodes, &q_slots).map_err(IterateError::Metrics)?)
        };

        state.records.push(IterationRecord {
            iteration: r,
            deployed_q: state.qs.clone(),
            q_hat,
            next_q: next_q.clone(),
            delta_q_raw: delta_raw,
            delta_q_smoothed: delta_smoothed,
            misdetection,
            metrics,
        });
        state.qs = next_q;

        if delta_raw <= cfg.cp.phi {
            state.converged_at = Some(r);
            break;
        }
    }
    Ok((state, calibration_consumed, tuning_consumed))
}

fn shift_diagnostics(
    cfg: &IterationConfig,
    state: &LoopState,
) -> Result<Vec<AgentShift>, IterateError> {
    let mut shifts = Vec::new();
    let trajectories = (state.episodes_with_logs
        && state.trajectory_rounds.len() == state.records.len())
    .then_some(state.trajectory_rounds.as_slice());
    for j in cfg.aware_agents() {
        if state.score_history[j].len() < 3 {
            continue;
        }
        let estimate = analysis::contraction_estimate(
            &state.score_history[j],
            &state.qhat_history[j],
            trajectories,
            cfg.n_projections,
            derive_seed(cfg.root_seed, 11, j as u64),
        )
        .map_err(IterateError::Analysis)?;
        shifts.push(AgentShift {
            agent: j,
            estimate,
        });
    }
    Ok(shifts)
}

fn report_from_loop(
    cfg: &IterationConfig,
    method: Method,
    state: LoopState,
    calibration: usize,
    tuning: usize,
) -> Result<IterationReport, IterateError> {
    let shift = shift_diagnostics(cfg, &state)?;
    let scores = cfg
        .aware_agents()
        .into_iter()
        .map(|agent| AgentScores {
            agent,
            rounds: state.score_history[agent].clone(),
        })
        .collect();
    Ok(IterationReport {
        method,
        final_q: state.qs,
        converged_at: state.converged_at,
        calibration_episodes_consumed: calibration,
        tuning_episodes_consumed: tuning,
        shift,
        scores,
        records: state.records,
    })
}

/// A finished campaign: the report plus what a test deployment needs.
pub struct MethodOutcome {
    pub report: IterationReport,
    pub predictor: PredictorModel,
}

/// Iterative conformal prediction with a fixed, pre-trained predictor.
pub fn run_icp(cfg: &IterationConfig, predictor: &PredictorModel) -> Result<MethodOutcome, IterateError> {
    let mut env = LiveEnvironment::new(cfg, predictor.clone());
    run_icp_with(cfg, &mut env)
}

pub fn run_icp_with<E: Environment>(cfg: &IterationConfig, env: &mut E) -> Result<MethodOutcome, IterateError> {
    let (state, calibration, tuning) = run_loop(cfg, env, Method::Icp)?;
    Ok(MethodOutcome {
        report: report_from_loop(cfg, Method::Icp, state, calibration, tuning)?,
        predictor: env.predictor(),
    })
}

/// Iterative split conformal prediction: every iteration first augments the
/// tuning pool and refits the predictor, then calibrates on fresh episodes.
/// With a zero tuning budget this degenerates to [`run_icp`] on the initial
/// predictor.
pub fn run_iscp(cfg: &IterationConfig, initial: &PredictorModel) -> Result<MethodOutcome, IterateError> {
    let mut env = LiveEnvironment::new(cfg, initial.clone());
    run_iscp_with(cfg, &mut env)
}

pub fn run_iscp_with<E: Environment>(cfg: &IterationConfig, env: &mut E) -> Result<MethodOutcome, IterateError> {
    let (state, calibration, tuning) = run_loop(cfg, env, Method::Iscp)?;
    Ok(MethodOutcome {
        report: report_from_loop(cfg, Method::Iscp, state, calibration, tuning)?,
        predictor: env.predictor(),
    })
}

/// One-shot baseline: a single calibration round under the nominal policy
/// with the whole episode budget, deployed without smoothing.
pub fn run_bcp(cfg: &IterationConfig, predictor: &PredictorModel) -> Result<MethodOutcome, IterateError> {
    let mut env = LiveEnvironment::new(cfg, predictor.clone());
    run_bcp_with(cfg, &mut env)
}

pub fn run_bcp_with<E: Environment>(cfg: &IterationConfig, env: &mut E) -> Result<MethodOutcome, IterateError> {
    cfg.validate()?;
    let aware = cfg.aware_agents();
    if aware.is_empty() {
        return Err(IterateError::InvalidConfig(
            "BCP needs at least one CP-aware agent",
        ));
    }
    if cfg.bcp_budget == 0 {
        return Err(IterateError::InvalidConfig("bcp_budget must be >= 1"));
    }
    let h = cfg.horizon();
    let zeros = vec![QuantileVector::zeros(h); cfg.n_agents];
    let data = env.calibration_round(&zeros, PlannerMode::Avoiding, cfg.bcp_budget, 0)?;

    let mut q_hat: Vec<Option<QuantileVector>> = vec![None; cfg.n_agents];
    let mut final_q = zeros.clone();
    let mut delta_raw = 0.0_f64;
    for &j in &aware {
        let matrix = data.scores[j].as_ref().ok_or(IterateError::NoScores)?;
        let calibrated =
            conformal::calibrate(matrix, cfg.cp.epsilon).map_err(IterateError::Conformal)?;
        delta_raw = delta_raw.max(
            calibrated
                .l2_distance(&zeros[j])
                .map_err(IterateError::Conformal)?,
        );
        final_q[j] = calibrated.clone();
        q_hat[j] = Some(calibrated);
    }
    let misdetection = pooled_misdetection(&data.scores, &zeros, &aware)?;
    let metrics = if data.episodes.is_empty() {
        None
    } else {
        let slots: Vec<Option<QuantileVector>> = vec![None; cfg.n_agents];
        Some(metrics::compute(&data.episodes, &slots).map_err(IterateError::Metrics)?)
    };
    let record = IterationRecord {
        iteration: 0,
        deployed_q: zeros,
        q_hat,
        next_q: final_q.clone(),
        delta_q_raw: delta_raw,
        delta_q_smoothed: delta_raw,
        misdetection,
        metrics,
    };
    let scores = aware
        .iter()
        .map(|&agent| AgentScores {
            agent,
            rounds: vec![data.scores[agent].clone().expect("aware agent scored")],
        })
        .collect();
    Ok(MethodOutcome {
        report: IterationReport {
            method: Method::Bcp,
            records: vec![record],
            final_q,
            converged_at: None,
            calibration_episodes_consumed: cfg.bcp_budget,
            tuning_episodes_consumed: 0,
            shift: Vec::new(),
            scores,
        },
        predictor: env.predictor(),
    })
}

/// Uncalibrated baseline: no calibration rounds, zero thresholds deployed.
pub fn run_ncp(cfg: &IterationConfig, predictor: &PredictorModel) -> Result<MethodOutcome, IterateError> {
    cfg.validate()?;
    Ok(MethodOutcome {
        report: IterationReport {
            method: Method::Ncp,
            records: Vec::new(),
            final_q: vec![QuantileVector::zeros(cfg.horizon()); cfg.n_agents],
            converged_at: None,
            calibration_episodes_consumed: 0,
            tuning_episodes_consumed: 0,
            shift: Vec::new(),
            scores: Vec::new(),
        },
        predictor: predictor.clone(),
    })
}

/// Result of deploying a policy on a test set.
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub episodes: Vec<EpisodeLog>,
    pub scenario_fingerprints: Vec<String>,
}

/// Fresh seeded test scenarios, shared across methods for paired comparison.
pub fn test_scenarios(
    cfg: &IterationConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<Scenario>, IterateError> {
    (0..n as u64)
        .map(|i| {
            sim::generate_scenario(
                cfg.n_agents,
                cfg.diameter,
                derive_seed(seed, TEST_STREAM, i),
                &cfg.episode.sim,
            )
            .map_err(IterateError::Sim)
        })
        .collect()
}

/// Deploy per-agent thresholds with a predictor on explicit scenarios and
/// evaluate the outcome.
pub fn evaluate_policy(
    cfg: &IterationConfig,
    qs: &[QuantileVector],
    predictor: &PredictorModel,
    scenarios: &[Scenario],
) -> Result<Evaluation, IterateError> {
    cfg.validate()?;
    let policies: Vec<PolicySpec> = (0..cfg.n_agents)
        .map(|j| PolicySpec::avoiding(qs[j].clone(), predictor.clone()))
        .collect();
    let episodes: Vec<EpisodeLog> = scenarios
        .par_iter()
        .map(|scenario| sim::run_episode(scenario, &policies, &cfg.episode).map_err(IterateError::Sim))
        .collect::<Result<_, _>>()?;
    let q_slots: Vec<Option<QuantileVector>> = (0..cfg.n_agents)
        .map(|j| (cfg.cp_aware[j] && !qs[j].is_all_zero()).then(|| qs[j].clone()))
        .collect();
    let metrics = metrics::compute(&episodes, &q_slots).map_err(IterateError::Metrics)?;
    let scenario_fingerprints = scenarios.iter().map(Scenario::fingerprint).collect();
    Ok(Evaluation {
        metrics,
        episodes,
        scenario_fingerprints,
    })
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl IterationReport {
    /// Per-iteration metrics table: one row per iteration in the layout of
    /// the per-method iteration tables, plus the update statistics.
    pub fn write_iterations_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "iteration,collision_pct,deviation_ego_m,deviation_other_m,misdetection_pct,avg_nav_time_s,success_pct,delta_q_raw,delta_q_smoothed"
        )?;
        for rec in &self.records {
            let (collision, dev_e, dev_o, nav, success) = match &rec.metrics {
                Some(m) => (
                    m.collision_rate.to_string(),
                    m.deviation_ego.to_string(),
                    m.deviation_other.to_string(),
                    csv_opt(m.avg_nav_time_s),
                    m.success_rate.to_string(),
                ),
                None => Default::default(),
            };
            let misdetection = rec
                .misdetection
                .as_ref()
                .map(|m| (100.0 * m.overall).to_string())
                .unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                rec.iteration,
                collision,
                dev_e,
                dev_o,
                misdetection,
                nav,
                success,
                rec.delta_q_raw,
                rec.delta_q_smoothed
            )?;
        }
        Ok(())
    }

    /// Per-step misdetection per iteration (percent), one row per iteration.
    pub fn write_misdetection_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let h = self
            .records
            .iter()
            .find_map(|r| r.misdetection.as_ref().map(|m| m.per_step.len()))
            .unwrap_or(0);
        let mut header = vec!["iteration".to_string(), "all_steps".to_string()];
        header.extend((1..=h).map(|k| format!("step_{k}")));
        writeln!(w, "{}", header.join(","))?;
        for rec in &self.records {
            if let Some(m) = &rec.misdetection {
                let mut row = vec![rec.iteration.to_string(), (100.0 * m.overall).to_string()];
                row.extend(m.per_step.iter().map(|v| (100.0 * v).to_string()));
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }

    /// Deployed and raw thresholds over the horizon for every iteration and
    /// CP-aware agent.
    pub fn write_quantiles_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,agent,step,q_deployed,q_hat")?;
        for rec in &self.records {
            for (agent, q_hat) in rec.q_hat.iter().enumerate() {
                let Some(q_hat) = q_hat else { continue };
                let deployed = &rec.deployed_q[agent];
                for k in 0..deployed.len() {
                    writeln!(
                        w,
                        "{},{},{},{},{}",
                        rec.iteration,
                        agent,
                        k + 1,
                        deployed.get(k).as_f64(),
                        q_hat.get(k).as_f64()
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Shift diagnostics keyed by agent and transition.
    pub fn write_shift_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let steps = self
            .shift
            .first()
            .and_then(|s| s.estimate.transitions.first())
            .map(|t| t.w1_per_step.len())
            .unwrap_or(0);
        let mut header = vec![
            "agent".to_string(),
            "from_round".to_string(),
            "w1_pooled".to_string(),
        ];
        header.extend((1..=steps).map(|k| format!("w1_step_{k}")));
        header.push("sliced_w1_traj".into());
        header.push("contraction_ratio".into());
        header.push("cp_lipschitz_proxy".into());
        writeln!(w, "{}", header.join(","))?;
        for s in &self.shift {
            for t in &s.estimate.transitions {
                let mut row = vec![
                    s.agent.to_string(),
                    t.from_round.to_string(),
                    t.w1_pooled.to_string(),
                ];
                row.extend(t.w1_per_step.iter().map(|v| v.to_string()));
                row.push(csv_opt(t.sliced_w1_trajectories));
                row.push(csv_opt(t.contraction_ratio));
                row.push(csv_opt(t.cp_lipschitz_proxy));
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}
