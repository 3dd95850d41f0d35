//! Kinematic bicycle model shared by the simulator and the planner.
//!
//! The discrete update is
//!
//! ```text
//! x'     = x + dt * v * cos(theta)
//! y'     = y + dt * v * sin(theta)
//! theta' = theta + (dt * v / l) * tan(phi)
//! v'     = clamp(v + dt * a, v_min, v_max)
//! ```
//!
//! Heading is kept unwrapped: the update performs no angle normalization, so
//! repeated turning accumulates past ±pi. Speed is clamped to the state box so
//! that open-loop rollouts stay physical even without an optimizer enforcing
//! the constraint.

use serde::{Deserialize, Serialize};

use crate::trajectory::Position;

/// Bicycle state: planar position (m), heading (rad, unwrapped), speed (m/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        Self { x, y, theta, v }
    }

    pub fn position(&self) -> Position {
        Position::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite() && self.v.is_finite()
    }
}

/// Control input: steering angle (rad) and acceleration (m/s^2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub phi: f64,
    pub a: f64,
}

impl Control {
    pub const ZERO: Control = Control { phi: 0.0, a: 0.0 };

    pub fn new(phi: f64, a: f64) -> Self {
        Self { phi, a }
    }

    pub fn is_finite(&self) -> bool {
        self.phi.is_finite() && self.a.is_finite()
    }

    /// Project onto the control box.
    pub fn clamped(&self, p: &DynamicsParams) -> Control {
        Control {
            phi: self.phi.clamp(-p.phi_max, p.phi_max),
            a: self.a.clamp(-p.a_max, p.a_max),
        }
    }

    pub fn within_bounds(&self, p: &DynamicsParams) -> bool {
        self.phi.abs() <= p.phi_max && self.a.abs() <= p.a_max
    }
}

/// Model parameters and the input/state boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    /// Wheelbase (m).
    pub l: f64,
    /// Sampling time (s).
    pub dt: f64,
    /// Steering bound (rad); must stay below pi/2 so tan(phi) is defined.
    pub phi_max: f64,
    /// Acceleration bound (m/s^2).
    pub a_max: f64,
    /// Speed box (m/s).
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            l: 1.0,
            dt: 0.1,
            phi_max: 0.6,
            a_max: 2.0,
            v_min: -1.0,
            v_max: 3.0,
        }
    }
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        // NaN fields fail these comparisons and are rejected too.
        let geometry_ok = self.l > 0.0 && self.dt > 0.0;
        let steering_ok = self.phi_max > 0.0 && self.phi_max < std::f64::consts::FRAC_PI_2;
        let limits_ok = self.a_max > 0.0 && self.v_min < self.v_max;
        if geometry_ok && steering_ok && limits_ok {
            Ok(())
        } else {
            Err(DynamicsError::InvalidParams)
        }
    }
}

/// One integration step plus whether the speed clamp fired.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: AgentState,
    pub speed_clamped: bool,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite state or control")]
    NonFinite,
    #[error("control outside bounds (|phi| <= phi_max, |a| <= a_max)")]
    ControlOutOfBounds,
    #[error("invalid dynamics parameters")]
    InvalidParams,
    #[error("rollout requires at least one control")]
    EmptyRollout,
}

/// Advance one sampling period. The caller is responsible for keeping the
/// control inside the input box; out-of-bounds inputs are rejected rather
/// than silently clamped.
pub fn step(s: &AgentState, u: &Control, p: &DynamicsParams) -> Result<StepOutcome, DynamicsError> {
    if !s.is_finite() || !u.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    if !u.within_bounds(p) {
        return Err(DynamicsError::ControlOutOfBounds);
    }
    let x = s.x + p.dt * s.v * s.theta.cos();
    let y = s.y + p.dt * s.v * s.theta.sin();
    let theta = s.theta + p.dt * s.v / p.l * u.phi.tan();
    let v_raw = s.v + p.dt * u.a;
    let v = v_raw.clamp(p.v_min, p.v_max);
    Ok(StepOutcome {
        state: AgentState::new(x, y, theta, v),
        speed_clamped: v != v_raw,
    })
}

/// Shooting rollout: element `k` is `step` applied `k + 1` times to `s0`.
pub fn rollout(
    s0: &AgentState,
    controls: &[Control],
    p: &DynamicsParams,
) -> Result<Vec<AgentState>, DynamicsError> {
    if controls.is_empty() {
        return Err(DynamicsError::EmptyRollout);
    }
    let mut out = Vec::with_capacity(controls.len());
    let mut s = *s0;
    for u in controls {
        s = step(&s, u, p)?.state;
        out.push(s);
    }
    Ok(out)
}
