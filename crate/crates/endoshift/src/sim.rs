//! Scenario generation and closed-loop multi-agent episode execution.
//!
//! Agents start on a circle with goals near the diametrically opposite
//! point. At every step each agent observes the joint history so far,
//! forecasts the other agents, plans with its own tightened constraints, and
//! applies the first control; all agents then step simultaneously so that no
//! index order is advantaged. Episodes end when every agent has touched its
//! goal region, at the first collision, or at the 30-second wall.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conformal::{self, QuantileVector};
use crate::dynamics::{self, AgentState, Control, DynamicsParams};
use crate::mpc::{self, MpcProblem, SolverOptions};
use crate::predictor::{self, ObservationHistory, PredictedTrajectory, PredictorModel};
use crate::trajectory::{Position, Trajectory};

/// Arena and event-detection parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Episode wall clock (s).
    pub timeout_s: f64,
    /// Pairwise distance below which a collision is declared (m).
    pub collision_radius: f64,
    /// Distance to the goal point that counts as reached (m).
    pub goal_radius: f64,
    /// Minimum pairwise start distance when sampling scenarios (m).
    pub min_start_separation: f64,
    /// Half-width of the goal-angle jitter around diagonal opposition (rad).
    pub goal_jitter: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            timeout_s: 30.0,
            collision_radius: 0.3,
            goal_radius: 0.3,
            min_start_separation: 2.0,
            goal_jitter: 0.35,
        }
    }
}

/// Start states and goal positions for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub starts: Vec<AgentState>,
    pub goals: Vec<Position>,
    pub diameter: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn n_agents(&self) -> usize {
        self.starts.len()
    }

    /// Content hash, used to verify that paired-seed runs share scenarios.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("need at least two agents, got {0}")]
    TooFewAgents(usize),
    #[error("could not satisfy the start-separation constraint in {0} attempts")]
    SeparationUnsatisfiable(usize),
    #[error("expected one policy per agent ({agents} agents, {policies} policies)")]
    PolicyCountMismatch { agents: usize, policies: usize },
    #[error("policy {agent} carries a quantile vector of length {found}, expected {expected}")]
    QuantileLength { agent: usize, expected: usize, found: usize },
    #[error(transparent)]
    Mpc(mpc::MpcError),
    #[error(transparent)]
    Predictor(predictor::PredictorError),
    #[error(transparent)]
    Conformal(conformal::ConformalError),
    #[error("jsonl error: {0}")]
    Jsonl(String),
}

/// Sample starts uniformly on the circle with goals biased toward diagonal
/// opposition (antipode plus jitter), rejection-resampling the whole draw
/// until all pairwise start distances clear the separation floor. Initial
/// headings face the goal and initial speeds are zero. Deterministic in the
/// seed.
pub fn generate_scenario(
    n_agents: usize,
    diameter: f64,
    seed: u64,
    params: &SimParams,
) -> Result<Scenario, SimError> {
    const MAX_ATTEMPTS: usize = 1000;
    if n_agents < 2 {
        return Err(SimError::TooFewAgents(n_agents));
    }
    let radius = diameter / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'attempt: for _ in 0..MAX_ATTEMPTS {
        let mut starts = Vec::with_capacity(n_agents);
        let mut goals = Vec::with_capacity(n_agents);
        for _ in 0..n_agents {
            let start_angle = rng.gen_range(0.0..2.0 * PI);
            let jitter = rng.gen_range(-params.goal_jitter..=params.goal_jitter);
            let goal_angle = start_angle + PI + jitter;
            let start = Position::new(radius * start_angle.cos(), radius * start_angle.sin());
            let goal = Position::new(radius * goal_angle.cos(), radius * goal_angle.sin());
            let heading = (goal.y - start.y).atan2(goal.x - start.x);
            starts.push(AgentState::new(start.x, start.y, heading, 0.0));
            goals.push(goal);
        }
        for i in 0..n_agents {
            for j in i + 1..n_agents {
                let d = starts[i].position().distance(&starts[j].position());
                if d < params.min_start_separation {
                    continue 'attempt;
                }
            }
        }
        return Ok(Scenario {
            starts,
            goals,
            diameter,
            seed,
        });
    }
    Err(SimError::SeparationUnsatisfiable(MAX_ATTEMPTS))
}

/// Whether a planner avoids the other agents or drives as if alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlannerMode {
    Avoiding,
    IgnoreOthers,
}

/// Per-agent closed-loop policy: the planner's tightening thresholds, the
/// forecaster it feeds, and whether obstacles are enforced at all.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    pub quantile: QuantileVector,
    pub predictor: PredictorModel,
    pub mode: PlannerMode,
}

impl PolicySpec {
    pub fn avoiding(quantile: QuantileVector, predictor: PredictorModel) -> Self {
        Self {
            quantile,
            predictor,
            mode: PlannerMode::Avoiding,
        }
    }
}

/// Everything an episode needs beyond the scenario and the policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeParams {
    pub horizon: usize,
    pub sim: SimParams,
    pub dynamics: DynamicsParams,
    /// Base clearance of the collision constraint (m).
    pub safe_distance: f64,
    pub solver: SolverOptions,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        Self {
            horizon: 10,
            sim: SimParams::default(),
            dynamics: DynamicsParams::default(),
            safe_distance: 0.5,
            solver: SolverOptions::default(),
        }
    }
}

impl EpisodeParams {
    pub fn max_steps(&self) -> usize {
        (self.sim.timeout_s / self.dynamics.dt).round() as usize
    }
}

/// Terminal events of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEvents {
    /// First step at which some pairwise distance fell below the collision
    /// radius.
    pub collision_step: Option<usize>,
    /// First step at which each agent touched its goal region.
    pub goal_reached_step: Vec<Option<usize>>,
    /// The step budget ran out before all goals were reached.
    pub timed_out: bool,
}

/// Full record of one episode: joint states, every forecast issued, and the
/// detected events.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub scenario: Scenario,
    pub sim: SimParams,
    pub dt: f64,
    pub horizon: usize,
    /// `states[t][j]`: agent j at step t.
    pub states: Vec<Vec<AgentState>>,
    /// `predictions[t][j]`: forecast issued by agent j at step t. One entry
    /// per non-terminal step.
    pub predictions: Vec<Vec<PredictedTrajectory>>,
    pub events: EpisodeEvents,
}

impl EpisodeLog {
    pub fn n_agents(&self) -> usize {
        self.scenario.n_agents()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Joint positions over time.
    pub fn trajectory(&self) -> Trajectory {
        let steps = self
            .states
            .iter()
            .map(|step| step.iter().map(AgentState::position).collect())
            .collect();
        Trajectory::new(steps).expect("episode log holds at least the start states")
    }

    /// Nonconformity score row for `observer`'s forecasts of the others.
    pub fn score(&self, observer: usize) -> Result<Vec<f64>, conformal::ConformalError> {
        let truth = self.trajectory();
        let per_observer: Vec<PredictedTrajectory> = self
            .predictions
            .iter()
            .map(|step| step[observer].clone())
            .collect();
        conformal::score_episode(&truth, &per_observer, observer, self.horizon)
    }
}

/// Recompute the events from the raw states; `run_episode` stores exactly
/// this, so a mismatch indicates a corrupted log.
pub fn detect_events(log: &EpisodeLog) -> EpisodeEvents {
    let n = log.n_agents();
    let max_steps = (log.sim.timeout_s / log.dt).round() as usize;
    let mut collision_step = None;
    let mut goal_reached_step = vec![None; n];
    for (t, step) in log.states.iter().enumerate() {
        for (j, state) in step.iter().enumerate() {
            if goal_reached_step[j].is_none()
                && state.position().distance(&log.scenario.goals[j]) <= log.sim.goal_radius
            {
                goal_reached_step[j] = Some(t);
            }
        }
        if collision_step.is_none() {
            'pairs: for i in 0..n {
                for j in i + 1..n {
                    if step[i].position().distance(&step[j].position()) < log.sim.collision_radius {
                        collision_step = Some(t);
                        break 'pairs;
                    }
                }
            }
        }
        if collision_step.is_some() {
            break;
        }
    }
    let all_reached = goal_reached_step.iter().all(Option::is_some);
    let timed_out =
        collision_step.is_none() && !all_reached && log.states.len() > max_steps;
    EpisodeEvents {
        collision_step,
        goal_reached_step,
        timed_out,
    }
}

/// Run one closed-loop episode. All agents plan against the joint history up
/// to the current step and then move together; every forecast issued is kept
/// for later scoring. Planner infeasibility is absorbed by the braking
/// fallback, so the episode always runs to a terminal event.
pub fn run_episode(
    scenario: &Scenario,
    policies: &[PolicySpec],
    params: &EpisodeParams,
) -> Result<EpisodeLog, SimError> {
    let n = scenario.n_agents();
    if policies.len() != n {
        return Err(SimError::PolicyCountMismatch {
            agents: n,
            policies: policies.len(),
        });
    }
    for (i, p) in policies.iter().enumerate() {
        if p.quantile.len() != params.horizon {
            return Err(SimError::QuantileLength {
                agent: i,
                expected: params.horizon,
                found: p.quantile.len(),
            });
        }
    }

    let problems: Vec<MpcProblem> = (0..n)
        .map(|i| {
            let start = &scenario.starts[i];
            let goal = &scenario.goals[i];
            let heading = (goal.y - start.y).atan2(goal.x - start.x);
            let mut prob = MpcProblem::new(
                params.horizon,
                AgentState::new(goal.x, goal.y, heading, 0.0),
                params.dynamics,
            );
            prob.safe_distance = params.safe_distance;
            prob.solver = params.solver.clone();
            prob
        })
        .collect();

    let max_steps = params.max_steps();
    let mut states: Vec<Vec<AgentState>> = vec![scenario.starts.clone()];
    let mut predictions: Vec<Vec<PredictedTrajectory>> = Vec::new();
    let mut warm: Vec<Option<Vec<Control>>> = vec![None; n];
    let mut collision_step = None;
    let mut goal_reached_step: Vec<Option<usize>> = vec![None; n];
    let mut timed_out = false;

    for t in 0.. {
        let current = states.last().unwrap().clone();
        for (j, state) in current.iter().enumerate() {
            if goal_reached_step[j].is_none()
                && state.position().distance(&scenario.goals[j]) <= params.sim.goal_radius
            {
                goal_reached_step[j] = Some(t);
            }
        }
        let mut collided = false;
        'pairs: for i in 0..n {
            for j in i + 1..n {
                if current[i].position().distance(&current[j].position())
                    < params.sim.collision_radius
                {
                    collided = true;
                    break 'pairs;
                }
            }
        }
        if collided {
            collision_step = Some(t);
            break;
        }
        if goal_reached_step.iter().all(Option::is_some) {
            break;
        }
        if t >= max_steps {
            timed_out = true;
            break;
        }

        // Plan for every agent against the history through t, then step all
        // agents at once.
        let mut step_predictions = Vec::with_capacity(n);
        let mut controls = Vec::with_capacity(n);
        for i in 0..n {
            let policy = &policies[i];
            let need = policy.predictor.min_history();
            let tail_from = states.len().saturating_sub(need + 1);
            let tail: Vec<Vec<Position>> = states[tail_from..]
                .iter()
                .map(|step| step.iter().map(AgentState::position).collect())
                .collect();
            let history = ObservationHistory::new(tail, i)
                .map_err(SimError::Predictor)?
                .padded_to(need);
            let forecast = predictor::predict(&policy.predictor, &history, params.horizon)
                .map_err(SimError::Predictor)?;

            let obstacles: Vec<Vec<Position>> = match policy.mode {
                PlannerMode::IgnoreOthers => Vec::new(),
                PlannerMode::Avoiding => (0..n)
                    .filter(|j| *j != i)
                    .map(|j| forecast.track(j).to_vec())
                    .collect(),
            };
            let plan = mpc::plan(
                &current[i],
                &obstacles,
                &policy.quantile,
                &problems[i],
                warm[i].as_deref(),
            )
            .map_err(SimError::Mpc)?;
            controls.push(plan.controls[0]);
            warm[i] = Some(plan.controls);
            step_predictions.push(forecast);
        }
        predictions.push(step_predictions);

        let next: Vec<AgentState> = current
            .iter()
            .zip(&controls)
            .map(|(s, u)| {
                dynamics::step(s, u, &params.dynamics)
                    .expect("planner returns in-bounds controls")
                    .state
            })
            .collect();
        states.push(next);
    }

    Ok(EpisodeLog {
        scenario: scenario.clone(),
        sim: params.sim,
        dt: params.dynamics.dt,
        horizon: params.horizon,
        states,
        predictions,
        events: EpisodeEvents {
            collision_step,
            goal_reached_step,
            timed_out,
        },
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum JsonlRecord {
    Header {
        scenario: Scenario,
        sim: SimParams,
        dt: f64,
        horizon: usize,
    },
    Step {
        t: usize,
        states: Vec<AgentState>,
        #[serde(skip_serializing_if = "Option::is_none")]
        predictions: Option<Vec<PredictedTrajectory>>,
    },
    Events(EpisodeEvents),
}

impl EpisodeLog {
    /// One JSON record per line: header, each step with the forecasts issued
    /// there, then the events.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        let emit = |w: &mut W, record: &JsonlRecord| -> Result<(), SimError> {
            let line = serde_json::to_string(record).map_err(|e| SimError::Jsonl(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| SimError::Jsonl(e.to_string()))
        };
        emit(
            &mut w,
            &JsonlRecord::Header {
                scenario: self.scenario.clone(),
                sim: self.sim,
                dt: self.dt,
                horizon: self.horizon,
            },
        )?;
        for (t, step) in self.states.iter().enumerate() {
            emit(
                &mut w,
                &JsonlRecord::Step {
                    t,
                    states: step.clone(),
                    predictions: self.predictions.get(t).cloned(),
                },
            )?;
        }
        emit(&mut w, &JsonlRecord::Events(self.events.clone()))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, SimError> {
        let mut header = None;
        let mut states = Vec::new();
        let mut predictions = Vec::new();
        let mut events = None;
        for line in r.lines() {
            let line = line.map_err(|e| SimError::Jsonl(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: JsonlRecord =
                serde_json::from_str(&line).map_err(|e| SimError::Jsonl(e.to_string()))?;
            match record {
                JsonlRecord::Header {
                    scenario,
                    sim,
                    dt,
                    horizon,
                } => header = Some((scenario, sim, dt, horizon)),
                JsonlRecord::Step {
                    states: s,
                    predictions: p,
                    ..
                } => {
                    states.push(s);
                    if let Some(p) = p {
                        predictions.push(p);
                    }
                }
                JsonlRecord::Events(e) => events = Some(e),
            }
        }
        let (scenario, sim, dt, horizon) =
            header.ok_or_else(|| SimError::Jsonl("missing header record".into()))?;
        let events = events.ok_or_else(|| SimError::Jsonl("missing events record".into()))?;
        if states.is_empty() {
            return Err(SimError::Jsonl("no step records".into()));
        }
        Ok(EpisodeLog {
            scenario,
            sim,
            dt,
            horizon,
            states,
            predictions,
            events,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::QuantileVector;

    fn params() -> EpisodeParams {
        EpisodeParams::default()
    }

    #[test]
    fn scenario_starts_on_circle_with_long_chords() {
        let p = SimParams::default();
        let s = generate_scenario(2, 10.0, 7, &p).unwrap();
        for (start, goal) in s.starts.iter().zip(&s.goals) {
            let r_start = (start.x * start.x + start.y * start.y).sqrt();
            assert!((r_start - 5.0).abs() < 1e-9);
            let chord = start.position().distance(goal);
            assert!(chord >= 10.0 * (0.35_f64).cos() * 0.9, "chord {chord}");
            // Heading faces the goal, speed starts at zero.
            let heading = (goal.y - start.y).atan2(goal.x - start.x);
            assert_eq!(start.theta, heading);
            assert_eq!(start.v, 0.0);
        }
    }

    #[test]
    fn scenario_deterministic_in_seed() {
        let p = SimParams::default();
        let a = generate_scenario(3, 15.0, 99, &p).unwrap();
        let b = generate_scenario(3, 15.0, 99, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = generate_scenario(3, 15.0, 100, &p).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn scenario_separation_holds_across_seeds() {
        let p = SimParams::default();
        for seed in 0..500 {
            let s = generate_scenario(3, 15.0, seed, &p).unwrap();
            for i in 0..3 {
                for j in i + 1..3 {
                    let d = s.starts[i].position().distance(&s.starts[j].position());
                    assert!(d >= 2.0, "seed {seed}: pair ({i},{j}) at {d}");
                }
            }
        }
    }

    #[test]
    fn too_few_agents_rejected() {
        let p = SimParams::default();
        assert_eq!(
            generate_scenario(1, 10.0, 0, &p),
            Err(SimError::TooFewAgents(1))
        );
    }

    fn parallel_paths_scenario() -> Scenario {
        Scenario {
            starts: vec![
                AgentState::new(0.0, 0.0, 0.0, 0.0),
                AgentState::new(0.0, 5.0, 0.0, 0.0),
            ],
            goals: vec![Position::new(6.0, 0.0), Position::new(6.0, 5.0)],
            diameter: 10.0,
            seed: 0,
        }
    }

    fn cv_policies(n: usize, horizon: usize) -> Vec<PolicySpec> {
        (0..n)
            .map(|_| PolicySpec::avoiding(QuantileVector::zeros(horizon), PredictorModel::ConstantVelocity))
            .collect()
    }

    #[test]
    fn parallel_agents_reach_goals_without_collision() {
        let scenario = parallel_paths_scenario();
        let p = params();
        let log = run_episode(&scenario, &cv_policies(2, p.horizon), &p).unwrap();
        assert_eq!(log.events.collision_step, None);
        assert!(!log.events.timed_out);
        for (j, reached) in log.events.goal_reached_step.iter().enumerate() {
            let t = reached.unwrap_or_else(|| panic!("agent {j} never reached goal"));
            let d = log.states[t][j].position().distance(&scenario.goals[j]);
            assert!(d <= p.sim.goal_radius);
        }
    }

    #[test]
    fn overlapping_starts_collide_at_step_zero() {
        let mut scenario = parallel_paths_scenario();
        scenario.starts[1] = AgentState::new(0.1, 0.0, 0.0, 0.0);
        let p = params();
        let log = run_episode(&scenario, &cv_policies(2, p.horizon), &p).unwrap();
        assert_eq!(log.events.collision_step, Some(0));
        assert_eq!(log.len(), 1);
        assert!(log.predictions.is_empty());
    }

    #[test]
    fn episodes_are_bit_identical_across_reruns() {
        let scenario = {
            let p = SimParams::default();
            generate_scenario(2, 10.0, 3, &p).unwrap()
        };
        let p = params();
        let a = run_episode(&scenario, &cv_policies(2, p.horizon), &p).unwrap();
        let b = run_episode(&scenario, &cv_policies(2, p.horizon), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stored_events_match_recomputation() {
        let scenario = {
            let p = SimParams::default();
            generate_scenario(2, 10.0, 5, &p).unwrap()
        };
        let p = params();
        let log = run_episode(&scenario, &cv_policies(2, p.horizon), &p).unwrap();
        assert_eq!(log.events, detect_events(&log));
    }

    fn hand_log(states: Vec<Vec<AgentState>>, events: EpisodeEvents) -> EpisodeLog {
        EpisodeLog {
            scenario: parallel_paths_scenario(),
            sim: SimParams::default(),
            dt: 0.1,
            horizon: 2,
            states,
            predictions: Vec::new(),
            events,
        }
    }

    #[test]
    fn detect_events_on_hand_built_logs() {
        let clean_events = EpisodeEvents {
            collision_step: None,
            goal_reached_step: vec![Some(1), Some(1)],
            timed_out: false,
        };
        let clean = hand_log(
            vec![
                vec![AgentState::new(0.0, 0.0, 0.0, 0.0), AgentState::new(0.0, 5.0, 0.0, 0.0)],
                vec![AgentState::new(6.0, 0.0, 0.0, 0.0), AgentState::new(6.0, 5.0, 0.0, 0.0)],
            ],
            clean_events.clone(),
        );
        assert_eq!(detect_events(&clean), clean_events);

        let colliding_events = EpisodeEvents {
            collision_step: Some(1),
            goal_reached_step: vec![None, None],
            timed_out: false,
        };
        let colliding = hand_log(
            vec![
                vec![AgentState::new(0.0, 0.0, 0.0, 0.0), AgentState::new(0.0, 5.0, 0.0, 0.0)],
                vec![AgentState::new(3.0, 2.5, 0.0, 0.0), AgentState::new(3.1, 2.5, 0.0, 0.0)],
            ],
            colliding_events.clone(),
        );
        assert_eq!(detect_events(&colliding), colliding_events);

        // 302 recorded states = 301 steps > 300-step budget, nobody done.
        let stuck = vec![
            vec![AgentState::new(0.0, 0.0, 0.0, 0.0), AgentState::new(0.0, 5.0, 0.0, 0.0)];
            302
        ];
        let timeout_events = EpisodeEvents {
            collision_step: None,
            goal_reached_step: vec![None, None],
            timed_out: true,
        };
        let timed = hand_log(stuck, timeout_events.clone());
        assert_eq!(detect_events(&timed), timeout_events);
    }

    #[test]
    fn every_prediction_has_indexable_ground_truth() {
        let scenario = {
            let p = SimParams::default();
            generate_scenario(2, 10.0, 11, &p).unwrap()
        };
        let p = params();
        let log = run_episode(&scenario, &cv_policies(2, p.horizon), &p).unwrap();
        assert_eq!(log.predictions.len(), log.states.len() - 1);
        // Scoring consumes every resolvable (t, kappa) pair without panicking.
        let row = log.score(0).unwrap();
        assert_eq!(row.len(), p.horizon);
        assert!(row.iter().all(|s| s.is_finite() && *s >= 0.0));
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let scenario = {
            let p = SimParams::default();
            generate_scenario(2, 10.0, 13, &p).unwrap()
        };
        let p = params();
        let log = run_episode(&scenario, &cv_policies(2, p.horizon), &p).unwrap();
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let back = EpisodeLog::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(log, back);
    }
}
