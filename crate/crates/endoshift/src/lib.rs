//! Closed-loop multi-agent simulation with iteratively calibrated conformal
//! prediction sets for uncertainty-aware model predictive control.
//!
//! Agents navigate a shared arena under receding-horizon control. Each agent
//! forecasts the others with a pluggable trajectory predictor, and the
//! collision-avoidance constraints are tightened by per-horizon-step
//! thresholds calibrated with split conformal prediction. Because tightening
//! the constraints changes how the other (reactive) agents behave, the
//! calibration data drifts under deployment; the [`iterate`] module closes
//! that loop by recalibrating over damped iterations until the thresholds
//! stop moving.
//!
//! # Module map
//!
//! - [`dynamics`] — kinematic bicycle model and control bounds
//! - [`predictor`] — constant-velocity and ridge-autoregressive forecasters
//! - [`conformal`] — nonconformity scores, quantile calibration, coverage bounds
//! - [`mpc`] — penalty-method receding-horizon planner with tightened constraints
//! - [`sim`] — scenario generation and closed-loop episode execution
//! - [`iterate`] — the iterative recalibration loop and the NCP/BCP/ICP/ISCP methods
//! - [`metrics`] — collision / misdetection / success / nav-time / deviation evaluation
//! - [`analysis`] — Wasserstein shift diagnostics and contraction-ratio estimates
//! - [`cli`] — config-driven campaign runner behind the `endoshift` binary
//!
//! # Examples
//!
//! Each major capability has a runnable example:
//!
//! ```bash
//! cargo run --example bicycle_rollout
//! cargo run --example fit_predictor
//! cargo run --example calibrate_thresholds
//! cargo run --example plan_around_obstacle
//! cargo run --example run_episode
//! cargo run --example icp_campaign
//! cargo run --example shift_diagnostics
//! cargo run --example gamma_sweep
//! ```
//!
//! The `endoshift` binary drives full campaigns from a config file; see the
//! [`cli`] module and the bundled `configs/two_agent.cfg`.

pub mod analysis;
pub mod cli;
pub mod conformal;
pub mod dynamics;
pub mod iterate;
pub mod metrics;
pub mod mpc;
pub mod predictor;
pub mod sim;
pub mod trajectory;

pub use conformal::{CpConfig, QuantileVector, ScoreMatrix, Threshold};
pub use dynamics::{AgentState, Control, DynamicsParams};
pub use trajectory::{Position, Trajectory};
