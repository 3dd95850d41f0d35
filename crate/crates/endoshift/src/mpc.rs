//! Receding-horizon planner with conformal-tightened collision constraints.
//!
//! The planner minimizes a goal-tracking cost over a control sequence,
//! subject to the bicycle dynamics (exact by construction via single
//! shooting), box bounds on the controls (by projection), and per-step
//! clearance constraints against each predicted obstacle position:
//!
//! ```text
//! || p_{t+k|t} - Yhat_{t+k|t,j} ||  >=  safe_distance + q[k]
//! ```
//!
//! Constraints enter as quadratic hinge penalties with an escalating weight
//! schedule; within each penalty level the control sequence descends along
//! the analytic gradient (reverse-mode through the rollout) with projected
//! backtracking steps. When the final iterate still violates a constraint by
//! more than the tolerance, or when any threshold is the unbounded sentinel,
//! the planner returns a maximal-braking fallback instead of aborting.

use serde::{Deserialize, Serialize};

use crate::conformal::QuantileVector;
use crate::dynamics::{self, AgentState, Control, DynamicsParams};
use crate::trajectory::Position;

/// Linear speed term of the stage cost.
const SPEED_COST: f64 = 0.01;

/// Armijo sufficient-decrease constant for the projected gradient steps.
const ARMIJO_SIGMA: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Quadratic penalty weights, applied in order.
    pub penalty_schedule: Vec<f64>,
    /// Gradient iterations per penalty level.
    pub iterations_per_level: usize,
    /// Constraint shortfall (m) above which the result is a fallback.
    pub violation_tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            penalty_schedule: vec![10.0, 100.0, 1000.0, 10000.0],
            iterations_per_level: 60,
            violation_tolerance: 1e-2,
        }
    }
}

/// One planning instance: horizon, weights, goal, and the dynamics box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcProblem {
    pub horizon: usize,
    /// Diagonal state weights on (x, y, theta, v).
    pub q: [f64; 4],
    /// Diagonal control weights on (phi, a).
    pub r: [f64; 2],
    /// Diagonal terminal weights on (x, y, theta, v).
    pub q_terminal: [f64; 4],
    /// Goal state; the speed component is zero for a stop-at-goal objective.
    pub goal: AgentState,
    /// Base clearance added below every conformal threshold.
    pub safe_distance: f64,
    pub dynamics: DynamicsParams,
    pub solver: SolverOptions,
}

impl MpcProblem {
    pub fn new(horizon: usize, goal: AgentState, dynamics: DynamicsParams) -> Self {
        Self {
            horizon,
            q: [1.0, 1.0, 0.001, 0.1],
            r: [0.001, 0.01],
            q_terminal: [5.0, 5.0, 0.01, 5.5],
            goal,
            safe_distance: 0.5,
            dynamics,
            solver: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon == 0 {
            return Err(MpcError::BadHorizon);
        }
        if self.q.iter().chain(&self.r).chain(&self.q_terminal).any(|w| *w < 0.0) {
            return Err(MpcError::NegativeWeight);
        }
        self.dynamics.validate().map_err(MpcError::Dynamics)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    /// Constraints satisfied to tolerance at an approximately stationary point.
    OptimalApprox,
    /// Maximal braking; the constrained problem was not solved to tolerance.
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub controls: Vec<Control>,
    /// Shooting rollout of `controls` from the planning state; dynamics
    /// feasibility is structural.
    pub states: Vec<AgentState>,
    pub status: SolverStatus,
    /// Largest remaining constraint shortfall (m), floored at zero.
    pub max_violation: f64,
    /// Unpenalized objective value of the returned sequence.
    pub cost: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MpcError {
    #[error("horizon must be at least 1")]
    BadHorizon,
    #[error("weights must be non-negative")]
    NegativeWeight,
    #[error("planning state is not finite")]
    NonFiniteState,
    #[error("obstacle {index} provides {found} predicted steps, expected {expected}")]
    ObstacleLengthMismatch { index: usize, expected: usize, found: usize },
    #[error("quantile vector has {found} steps, expected {expected}")]
    QuantileLengthMismatch { expected: usize, found: usize },
    #[error("states and controls have mismatched lengths ({states} vs {controls})")]
    CostLengthMismatch { states: usize, controls: usize },
    #[error(transparent)]
    Dynamics(dynamics::DynamicsError),
}

/// Goal-tracking cost of a state/control sequence: per-step quadratic state
/// and control terms plus the linear speed term, and the terminal quadratic.
pub fn evaluate_cost(
    states: &[AgentState],
    controls: &[Control],
    prob: &MpcProblem,
) -> Result<f64, MpcError> {
    if states.len() != controls.len() || states.is_empty() {
        return Err(MpcError::CostLengthMismatch {
            states: states.len(),
            controls: controls.len(),
        });
    }
    let g = &prob.goal;
    let mut total = 0.0;
    for (s, u) in states.iter().zip(controls) {
        let dx = s.x - g.x;
        let dy = s.y - g.y;
        let dth = s.theta - g.theta;
        let dv = s.v - g.v;
        total += prob.q[0] * dx * dx
            + prob.q[1] * dy * dy
            + prob.q[2] * dth * dth
            + prob.q[3] * dv * dv
            + prob.r[0] * u.phi * u.phi
            + prob.r[1] * u.a * u.a
            + SPEED_COST * s.v;
    }
    let s = states.last().unwrap();
    let dx = s.x - g.x;
    let dy = s.y - g.y;
    let dth = s.theta - g.theta;
    let dv = s.v - g.v;
    total += prob.q_terminal[0] * dx * dx
        + prob.q_terminal[1] * dy * dy
        + prob.q_terminal[2] * dth * dth
        + prob.q_terminal[3] * dv * dv;
    Ok(total)
}

/// Largest shortfall of the clearance constraints along a state sequence
/// (positive means violated). Used by the solver and by feasibility checks.
pub fn max_constraint_shortfall(
    states: &[AgentState],
    obstacles: &[Vec<Position>],
    margins: &[f64],
) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for (k, s) in states.iter().enumerate() {
        let p = s.position();
        for obs in obstacles {
            let shortfall = margins[k] - p.distance(&obs[k]);
            if shortfall > worst {
                worst = shortfall;
            }
        }
    }
    if worst == f64::NEG_INFINITY {
        0.0
    } else {
        worst
    }
}

struct StepCache {
    cos_th: f64,
    sin_th: f64,
    v: f64,
    tan_phi: f64,
    sec2_phi: f64,
    clamped: bool,
}

struct Objective<'a> {
    prob: &'a MpcProblem,
    start: AgentState,
    obstacles: &'a [Vec<Position>],
    margins: &'a [f64],
    mu: f64,
}

impl Objective<'_> {
    fn forward(&self, controls: &[Control]) -> (Vec<AgentState>, Vec<StepCache>) {
        let p = &self.prob.dynamics;
        let mut states = Vec::with_capacity(controls.len());
        let mut cache = Vec::with_capacity(controls.len());
        let mut s = self.start;
        for u in controls {
            cache.push(StepCache {
                cos_th: s.theta.cos(),
                sin_th: s.theta.sin(),
                v: s.v,
                tan_phi: u.phi.tan(),
                sec2_phi: 1.0 / (u.phi.cos() * u.phi.cos()),
                clamped: {
                    let raw = s.v + p.dt * u.a;
                    raw < p.v_min || raw > p.v_max
                },
            });
            // The same update as dynamics::step, so the returned states are
            // bit-identical to an external rollout of the controls.
            s = dynamics::step(&s, u, p).expect("projected controls stay in bounds").state;
            states.push(s);
        }
        (states, cache)
    }

    fn penalty(&self, states: &[AgentState]) -> f64 {
        if self.obstacles.is_empty() || self.mu == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        for (k, s) in states.iter().enumerate() {
            let p = s.position();
            for obs in self.obstacles {
                let h = self.margins[k] - p.distance(&obs[k]);
                if h > 0.0 {
                    total += h * h;
                }
            }
        }
        self.mu * total
    }

    fn value(&self, controls: &[Control]) -> f64 {
        let (states, _) = self.forward(controls);
        evaluate_cost(&states, controls, self.prob).expect("lengths match by construction")
            + self.penalty(&states)
    }

    /// Direct gradient of stage cost plus penalty with respect to the state
    /// at horizon slot `k` (0-based).
    fn state_grad(&self, s: &AgentState, k: usize, terminal: bool) -> [f64; 4] {
        let g = &self.prob.goal;
        let mut grad = [
            2.0 * self.prob.q[0] * (s.x - g.x),
            2.0 * self.prob.q[1] * (s.y - g.y),
            2.0 * self.prob.q[2] * (s.theta - g.theta),
            2.0 * self.prob.q[3] * (s.v - g.v) + SPEED_COST,
        ];
        if terminal {
            grad[0] += 2.0 * self.prob.q_terminal[0] * (s.x - g.x);
            grad[1] += 2.0 * self.prob.q_terminal[1] * (s.y - g.y);
            grad[2] += 2.0 * self.prob.q_terminal[2] * (s.theta - g.theta);
            grad[3] += 2.0 * self.prob.q_terminal[3] * (s.v - g.v);
        }
        if self.mu > 0.0 {
            let p = s.position();
            for obs in self.obstacles {
                let target = &obs[k];
                let d = p.distance(target);
                let h = self.margins[k] - d;
                if h > 0.0 {
                    // Gradient of mu * h^2, with a fixed +x direction when the
                    // prediction coincides with the ego position.
                    let (ux, uy) = if d < 1e-12 {
                        (1.0, 0.0)
                    } else {
                        ((p.x - target.x) / d, (p.y - target.y) / d)
                    };
                    let coeff = 2.0 * self.mu * h;
                    grad[0] -= coeff * ux;
                    grad[1] -= coeff * uy;
                }
            }
        }
        grad
    }

    /// Objective value and analytic gradient via the adjoint of the shooting
    /// rollout.
    fn value_and_grad(&self, controls: &[Control]) -> (f64, Vec<Control>) {
        let h = controls.len();
        let p = &self.prob.dynamics;
        let (states, cache) = self.forward(controls);
        let value = evaluate_cost(&states, controls, self.prob).expect("lengths match")
            + self.penalty(&states);

        let mut grad = vec![Control::ZERO; h];
        // lam = d(objective)/d(state at slot k), accumulated backwards.
        let mut lam = self.state_grad(&states[h - 1], h - 1, true);
        for k in (0..h).rev() {
            let c = &cache[k];
            let u = &controls[k];
            grad[k].phi =
                2.0 * self.prob.r[0] * u.phi + lam[2] * p.dt * c.v / p.l * c.sec2_phi;
            grad[k].a = 2.0 * self.prob.r[1] * u.a
                + if c.clamped { 0.0 } else { lam[3] * p.dt };
            if k > 0 {
                // Pull lam back through the transition at (s_{k-1}, u_k).
                let pulled = [
                    lam[0],
                    lam[1],
                    lam[2] - lam[0] * p.dt * c.v * c.sin_th + lam[1] * p.dt * c.v * c.cos_th,
                    lam[0] * p.dt * c.cos_th
                        + lam[1] * p.dt * c.sin_th
                        + lam[2] * p.dt / p.l * c.tan_phi
                        + if c.clamped { 0.0 } else { lam[3] },
                ];
                let direct = self.state_grad(&states[k - 1], k - 1, false);
                lam = [
                    pulled[0] + direct[0],
                    pulled[1] + direct[1],
                    pulled[2] + direct[2],
                    pulled[3] + direct[3],
                ];
            }
        }
        (value, grad)
    }
}

fn project(controls: &mut [Control], p: &DynamicsParams) {
    for u in controls {
        *u = u.clamped(p);
    }
}

fn braking_fallback(
    state: &AgentState,
    obstacles: &[Vec<Position>],
    margins: &[f64],
    prob: &MpcProblem,
) -> PlanResult {
    let controls = vec![Control::new(0.0, -prob.dynamics.a_max); prob.horizon];
    let states = dynamics::rollout(state, &controls, &prob.dynamics)
        .expect("braking control is always in bounds");
    let cost = evaluate_cost(&states, &controls, prob).expect("lengths match");
    let max_violation = if obstacles.is_empty() {
        0.0
    } else {
        max_constraint_shortfall(&states, obstacles, margins).max(0.0)
    };
    PlanResult {
        controls,
        states,
        status: SolverStatus::Fallback,
        max_violation,
        cost,
    }
}

/// Plan a control sequence from `state` against per-obstacle predicted
/// positions, with clearance `safe_distance + q[k]` at horizon step `k`.
///
/// `warm_start` is the previous solution; it is shifted by one step with the
/// last control repeated. An unbounded threshold or a final violation above
/// the solver tolerance yields the braking fallback; the call never fails on
/// infeasibility.
pub fn plan(
    state: &AgentState,
    obstacles: &[Vec<Position>],
    q: &QuantileVector,
    prob: &MpcProblem,
    warm_start: Option<&[Control]>,
) -> Result<PlanResult, MpcError> {
    prob.validate()?;
    if !state.is_finite() {
        return Err(MpcError::NonFiniteState);
    }
    if q.len() != prob.horizon {
        return Err(MpcError::QuantileLengthMismatch {
            expected: prob.horizon,
            found: q.len(),
        });
    }
    for (index, obs) in obstacles.iter().enumerate() {
        if obs.len() != prob.horizon {
            return Err(MpcError::ObstacleLengthMismatch {
                index,
                expected: prob.horizon,
                found: obs.len(),
            });
        }
    }

    let margins: Vec<f64> = match finite_margins(q, prob.safe_distance) {
        Some(m) => m,
        None => {
            let zeros = vec![0.0; prob.horizon];
            return Ok(braking_fallback(state, obstacles, &zeros, prob));
        }
    };

    let mut controls = match warm_start {
        Some(prev) if prev.len() == prob.horizon => {
            let mut shifted: Vec<Control> = prev[1..].to_vec();
            shifted.push(*prev.last().unwrap());
            shifted
        }
        _ => vec![Control::ZERO; prob.horizon],
    };
    project(&mut controls, &prob.dynamics);

    for &mu in &prob.solver.penalty_schedule {
        let objective = Objective {
            prob,
            start: *state,
            obstacles,
            margins: &margins,
            mu,
        };
        let mut alpha = 1.0_f64;
        for _ in 0..prob.solver.iterations_per_level {
            let (f, grad) = objective.value_and_grad(&controls);
            let mut accepted = false;
            let mut step = alpha;
            for _ in 0..30 {
                let mut candidate: Vec<Control> = controls
                    .iter()
                    .zip(&grad)
                    .map(|(u, g)| Control::new(u.phi - step * g.phi, u.a - step * g.a))
                    .collect();
                project(&mut candidate, &prob.dynamics);
                let dist2: f64 = candidate
                    .iter()
                    .zip(&controls)
                    .map(|(a, b)| (a.phi - b.phi).powi(2) + (a.a - b.a).powi(2))
                    .sum();
                if dist2 == 0.0 {
                    break; // projected stationary point
                }
                let f_new = objective.value(&candidate);
                if f - f_new >= ARMIJO_SIGMA / step * dist2 {
                    controls = candidate;
                    alpha = (step * 1.5).min(100.0);
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break; // no descent direction left at this level
            }
        }
    }

    let states = dynamics::rollout(state, &controls, &prob.dynamics)
        .expect("projected controls stay in bounds");
    let cost = evaluate_cost(&states, &controls, prob)?;
    let shortfall = if obstacles.is_empty() {
        0.0
    } else {
        max_constraint_shortfall(&states, obstacles, &margins)
    };
    if shortfall > prob.solver.violation_tolerance {
        return Ok(braking_fallback(state, obstacles, &margins, prob));
    }
    Ok(PlanResult {
        controls,
        states,
        status: SolverStatus::OptimalApprox,
        max_violation: shortfall.max(0.0),
        cost,
    })
}

fn finite_margins(q: &QuantileVector, safe_distance: f64) -> Option<Vec<f64>> {
    let mut margins = Vec::with_capacity(q.len());
    for t in q.thresholds() {
        match t {
            crate::conformal::Threshold::Finite(v) => margins.push(safe_distance + v),
            crate::conformal::Threshold::Infinite => return None,
        }
    }
    Some(margins)
}

/// Merit value of a control sequence: goal-tracking cost plus the hinge
/// penalty at the solver's final weight. This is the quantity the last
/// penalty level minimizes; exposed for optimality oracles and diagnostics.
/// Infinite when any threshold is the unbounded sentinel.
pub fn penalized_objective(
    state: &AgentState,
    obstacles: &[Vec<Position>],
    q: &QuantileVector,
    prob: &MpcProblem,
    controls: &[Control],
) -> f64 {
    let Some(margins) = finite_margins(q, prob.safe_distance) else {
        return f64::INFINITY;
    };
    let objective = Objective {
        prob,
        start: *state,
        obstacles,
        margins: &margins,
        mu: prob.solver.penalty_schedule.last().copied().unwrap_or(0.0),
    };
    objective.value(controls)
}

/// [`penalized_objective`] together with its analytic gradient through the
/// shooting rollout.
pub fn penalized_objective_with_gradient(
    state: &AgentState,
    obstacles: &[Vec<Position>],
    q: &QuantileVector,
    prob: &MpcProblem,
    controls: &[Control],
) -> (f64, Vec<Control>) {
    let Some(margins) = finite_margins(q, prob.safe_distance) else {
        return (f64::INFINITY, vec![Control::ZERO; controls.len()]);
    };
    let objective = Objective {
        prob,
        start: *state,
        obstacles,
        margins: &margins,
        mu: prob.solver.penalty_schedule.last().copied().unwrap_or(0.0),
    };
    objective.value_and_grad(controls)
}
