//! Trajectory predictors producing recursive H-step forecasts of every agent
//! in the scene.
//!
//! Two variants: a constant-velocity extrapolator, and a ridge-regularized
//! autoregression on flattened joint position deltas. Both roll forward
//! recursively, feeding each predicted step back as input for the next, so a
//! forecast of any horizon is a prefix-consistent extension of a shorter one.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::trajectory::{Position, Trajectory};

/// Past joint states observed by one agent. `states[t][j]` is agent `j`'s
/// position at observation `t` (oldest first). Predictors only consume the
/// tail they need, so callers may pass a suffix of the true history.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationHistory {
    states: Vec<Vec<Position>>,
    observer: usize,
}

impl ObservationHistory {
    pub fn new(states: Vec<Vec<Position>>, observer: usize) -> Result<Self, PredictorError> {
        let first = states.first().ok_or(PredictorError::EmptyHistory)?;
        let n = first.len();
        if n == 0 || observer >= n {
            return Err(PredictorError::EmptyHistory);
        }
        if states.iter().any(|s| s.len() != n) {
            return Err(PredictorError::RaggedHistory);
        }
        Ok(Self { states, observer })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.states[0].len()
    }

    pub fn observer(&self) -> usize {
        self.observer
    }

    pub fn states(&self) -> &[Vec<Position>] {
        &self.states
    }

    /// Pad the front by repeating the first observation until the history is
    /// at least `len` long. Used at episode start where fewer than a full
    /// window of observations exist.
    pub fn padded_to(&self, len: usize) -> ObservationHistory {
        if self.states.len() >= len {
            return self.clone();
        }
        let mut states = vec![self.states[0].clone(); len - self.states.len()];
        states.extend(self.states.iter().cloned());
        ObservationHistory {
            states,
            observer: self.observer,
        }
    }
}

/// H-step forecast for every agent in the scene. `track(j)[k]` is agent `j`'s
/// predicted position k+1 steps ahead of the issue time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedTrajectory {
    tracks: Vec<Vec<Position>>,
    horizon: usize,
}

impl PredictedTrajectory {
    pub fn new(tracks: Vec<Vec<Position>>, horizon: usize) -> Result<Self, PredictorError> {
        if tracks.is_empty() {
            return Err(PredictorError::EmptyHistory);
        }
        for track in &tracks {
            if track.len() != horizon {
                return Err(PredictorError::BadTrackLength {
                    expected: horizon,
                    found: track.len(),
                });
            }
            if track.iter().any(|p| !p.is_finite()) {
                return Err(PredictorError::NonFinitePrediction);
            }
        }
        Ok(Self { tracks, horizon })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_agents(&self) -> usize {
        self.tracks.len()
    }

    pub fn track(&self, agent: usize) -> &[Position] {
        &self.tracks[agent]
    }
}

/// Ridge autoregression on joint position deltas: the last `window` flattened
/// deltas map linearly to the next joint delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub n_agents: usize,
    pub window: usize,
    pub ridge: f64,
    /// Row-major weights, one row per output component (2 * n_agents rows,
    /// window * 2 * n_agents columns).
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PredictorModel {
    ConstantVelocity,
    Autoregressive(ArModel),
}

impl PredictorModel {
    /// Minimum number of observations `predict` needs.
    pub fn min_history(&self) -> usize {
        match self {
            PredictorModel::ConstantVelocity => 2,
            PredictorModel::Autoregressive(m) => m.window.max(2),
        }
    }

    pub fn save_json<W: Write>(&self, w: W) -> Result<(), PredictorError> {
        serde_json::to_writer(w, self).map_err(|e| PredictorError::Io(e.to_string()))
    }

    pub fn load_json<R: Read>(r: R) -> Result<Self, PredictorError> {
        serde_json::from_reader(r).map_err(|e| PredictorError::Io(e.to_string()))
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PredictorError {
    #[error("observation history is empty or observer index out of range")]
    EmptyHistory,
    #[error("observation history has inconsistent agent counts")]
    RaggedHistory,
    #[error("history of {found} observations is shorter than the required {required}")]
    ShortHistory { required: usize, found: usize },
    #[error("model was fit for {expected} agents, history has {found}")]
    AgentCountMismatch { expected: usize, found: usize },
    #[error("predicted track has length {found}, expected {expected}")]
    BadTrackLength { expected: usize, found: usize },
    #[error("prediction produced a non-finite position")]
    NonFinitePrediction,
    #[error("training set yields {found} regression rows, need at least {required}")]
    InsufficientData { required: usize, found: usize },
    #[error("window must be at least 1")]
    BadWindow,
    #[error("ridge coefficient must be finite and non-negative")]
    BadRidge,
    #[error("normal equations could not be solved even with regularization")]
    SingularSystem,
    #[error("io error: {0}")]
    Io(String),
}

fn flatten_delta(prev: &[Position], next: &[Position]) -> Vec<f64> {
    let mut d = Vec::with_capacity(prev.len() * 2);
    for (p, n) in prev.iter().zip(next) {
        d.push(n.x - p.x);
        d.push(n.y - p.y);
    }
    d
}

/// Fit the autoregressive delta model on a set of trajectories by ridge
/// least squares on the mean squared error. Normalizing the normal equations
/// by the row count makes the fit invariant to duplicating the dataset.
/// Deterministic given the dataset order.
pub fn fit(
    dataset: &[Trajectory],
    window: usize,
    ridge: f64,
) -> Result<PredictorModel, PredictorError> {
    if window == 0 {
        return Err(PredictorError::BadWindow);
    }
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(PredictorError::BadRidge);
    }
    let first = dataset.first().ok_or(PredictorError::InsufficientData {
        required: 1,
        found: 0,
    })?;
    let n_agents = first.n_agents();
    let out_dim = 2 * n_agents;
    let feat_dim = window * out_dim;

    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<Vec<f64>> = Vec::new();
    for traj in dataset {
        if traj.n_agents() != n_agents {
            return Err(PredictorError::AgentCountMismatch {
                expected: n_agents,
                found: traj.n_agents(),
            });
        }
        let t_len = traj.len();
        if t_len < window + 2 {
            continue;
        }
        let deltas: Vec<Vec<f64>> = (1..t_len)
            .map(|t| flatten_delta(traj.step(t - 1), traj.step(t)))
            .collect();
        // deltas[i] is the step from state i to state i + 1
        for t in window..=t_len - 2 {
            let mut row = Vec::with_capacity(feat_dim);
            for d in &deltas[t - window..t] {
                row.extend_from_slice(d);
            }
            features.push(row);
            targets.push(deltas[t].clone());
        }
    }
    let rows = features.len();
    let required = feat_dim + 1;
    if rows < required {
        return Err(PredictorError::InsufficientData {
            required,
            found: rows,
        });
    }

    // Accumulate G = Phi' Phi / rows and C = Phi' D / rows.
    let mut gram = DMatrix::<f64>::zeros(feat_dim, feat_dim);
    let mut cross = DMatrix::<f64>::zeros(feat_dim, out_dim);
    for (f, y) in features.iter().zip(&targets) {
        for i in 0..feat_dim {
            for j in i..feat_dim {
                gram[(i, j)] += f[i] * f[j];
            }
            for j in 0..out_dim {
                cross[(i, j)] += f[i] * y[j];
            }
        }
    }
    let inv_rows = 1.0 / rows as f64;
    for i in 0..feat_dim {
        for j in i..feat_dim {
            gram[(i, j)] *= inv_rows;
            gram[(j, i)] = gram[(i, j)];
        }
    }
    cross *= inv_rows;

    // Solve (G + lambda I) beta = c through the eigendecomposition of the
    // symmetric Gram matrix. Eigenvalues below a relative floor are dropped,
    // which gives the minimum-norm exact solution on rank-deficient data at
    // lambda = 0 instead of erroring out.
    let eigen = gram.clone().symmetric_eigen();
    let max_eig = eigen.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let floor = max_eig * 1e-12;
    let mut usable = false;
    let mut weights = vec![vec![0.0; feat_dim]; out_dim];
    for j in 0..out_dim {
        let rhs = DVector::from_iterator(feat_dim, (0..feat_dim).map(|i| cross[(i, j)]));
        let projected = eigen.eigenvectors.transpose() * &rhs;
        let mut beta = DVector::zeros(feat_dim);
        for (i, &e) in eigen.eigenvalues.iter().enumerate() {
            let denom = e + ridge;
            if denom > floor && denom > 0.0 {
                usable = true;
                beta += eigen.eigenvectors.column(i) * (projected[i] / denom);
            }
        }
        for i in 0..feat_dim {
            weights[j][i] = beta[i];
        }
    }
    if !usable {
        return Err(PredictorError::SingularSystem);
    }
    Ok(PredictorModel::Autoregressive(ArModel {
        n_agents,
        window,
        ridge,
        weights,
    }))
}

/// Recursive H-step forecast of all agents. Each predicted step is appended
/// to the input window before predicting the next. `horizon == 0` yields
/// empty tracks.
pub fn predict(
    model: &PredictorModel,
    history: &ObservationHistory,
    horizon: usize,
) -> Result<PredictedTrajectory, PredictorError> {
    let required = model.min_history();
    if history.len() < required {
        return Err(PredictorError::ShortHistory {
            required,
            found: history.len(),
        });
    }
    let n_agents = history.n_agents();
    match model {
        PredictorModel::ConstantVelocity => {
            let last = history.states().last().unwrap();
            let prev = &history.states()[history.len() - 2];
            let velocity = flatten_delta(prev, last);
            let mut tracks: Vec<Vec<Position>> = vec![Vec::with_capacity(horizon); n_agents];
            let mut current: Vec<Position> = last.clone();
            for _ in 0..horizon {
                for (j, track) in tracks.iter_mut().enumerate() {
                    let p = Position::new(
                        current[j].x + velocity[2 * j],
                        current[j].y + velocity[2 * j + 1],
                    );
                    track.push(p);
                    current[j] = p;
                }
            }
            PredictedTrajectory::new(tracks, horizon)
        }
        PredictorModel::Autoregressive(ar) => {
            if ar.n_agents != n_agents {
                return Err(PredictorError::AgentCountMismatch {
                    expected: ar.n_agents,
                    found: n_agents,
                });
            }
            // The window needs `window` deltas, hence window + 1 states; pad
            // one extra repeated first observation if the history is exactly
            // window long (the padded delta is zero).
            let padded = history.padded_to(ar.window + 1);
            let states = padded.states();
            let start = states.len() - (ar.window + 1);
            let mut window: Vec<Vec<f64>> = (start + 1..states.len())
                .map(|t| flatten_delta(&states[t - 1], &states[t]))
                .collect();
            let out_dim = 2 * n_agents;
            let mut tracks: Vec<Vec<Position>> = vec![Vec::with_capacity(horizon); n_agents];
            let mut current: Vec<Position> = states.last().unwrap().clone();
            for _ in 0..horizon {
                let mut delta = vec![0.0; out_dim];
                for (row, d) in ar.weights.iter().zip(delta.iter_mut()) {
                    let mut acc = 0.0;
                    let mut idx = 0;
                    for w in &window {
                        for &f in w {
                            acc += row[idx] * f;
                            idx += 1;
                        }
                    }
                    *d = acc;
                }
                for (j, track) in tracks.iter_mut().enumerate() {
                    let p = Position::new(current[j].x + delta[2 * j], current[j].y + delta[2 * j + 1]);
                    track.push(p);
                    current[j] = p;
                }
                window.remove(0);
                window.push(delta);
            }
            PredictedTrajectory::new(tracks, horizon)
        }
    }
}
