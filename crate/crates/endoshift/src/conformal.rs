//! Split conformal calibration of per-horizon-step uncertainty thresholds.
//!
//! A calibration round produces a [`ScoreMatrix`] of nonconformity scores:
//! for trajectory `i` and horizon step `kappa`, the largest Euclidean gap
//! between any non-ego agent's realized position and the position that was
//! predicted for it `kappa` steps earlier, taken over all prediction times in
//! the episode. Column-wise order statistics of that matrix give the
//! [`QuantileVector`] used to tighten the planner's collision constraints,
//! and the smoothing filter damps the thresholds between calibration rounds
//! so that the closed-loop trajectory distribution drifts gradually.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::predictor::PredictedTrajectory;
use crate::trajectory::Trajectory;

/// A per-step threshold. The unbounded sentinel appears when the requested
/// order statistic exceeds the sample count; the planner treats it as an
/// unsatisfiable constraint rather than a float infinity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Threshold {
    Finite(f64),
    Infinite,
}

impl Threshold {
    pub fn is_finite(&self) -> bool {
        matches!(self, Threshold::Finite(_))
    }

    /// Finite value, or `f64::INFINITY` for reporting purposes.
    pub fn as_f64(&self) -> f64 {
        match self {
            Threshold::Finite(v) => *v,
            Threshold::Infinite => f64::INFINITY,
        }
    }

    /// True when `score` falls outside the prediction set of this radius.
    pub fn misses(&self, score: f64) -> bool {
        match self {
            Threshold::Finite(q) => score > *q,
            Threshold::Infinite => false,
        }
    }
}

/// Per-horizon-step thresholds calibrated in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileVector {
    thresholds: Vec<Threshold>,
}

impl QuantileVector {
    pub fn new(thresholds: Vec<Threshold>) -> Result<Self, ConformalError> {
        if thresholds.is_empty() {
            return Err(ConformalError::EmptyQuantileVector);
        }
        for t in &thresholds {
            if let Threshold::Finite(v) = t {
                if !v.is_finite() || *v < 0.0 {
                    return Err(ConformalError::InvalidThreshold(*v));
                }
            }
        }
        Ok(Self { thresholds })
    }

    /// The all-zero vector deployed before any calibration.
    pub fn zeros(horizon: usize) -> Self {
        Self {
            thresholds: vec![Threshold::Finite(0.0); horizon.max(1)],
        }
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// Threshold for horizon step `kappa` (0-based index).
    pub fn get(&self, k: usize) -> Threshold {
        self.thresholds[k]
    }

    pub fn thresholds(&self) -> &[Threshold] {
        &self.thresholds
    }

    pub fn is_all_finite(&self) -> bool {
        self.thresholds.iter().all(Threshold::is_finite)
    }

    pub fn is_all_zero(&self) -> bool {
        self.thresholds
            .iter()
            .all(|t| matches!(t, Threshold::Finite(v) if *v == 0.0))
    }

    /// Values with the sentinel rendered as `f64::INFINITY`.
    pub fn as_f64_vec(&self) -> Vec<f64> {
        self.thresholds.iter().map(Threshold::as_f64).collect()
    }

    /// Euclidean distance between two vectors of equal length. Any sentinel
    /// entry on either side makes the distance infinite: an unbounded
    /// threshold never counts as converged.
    pub fn l2_distance(&self, other: &QuantileVector) -> Result<f64, ConformalError> {
        if self.len() != other.len() {
            return Err(ConformalError::LengthMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        let mut sum = 0.0;
        for (a, b) in self.thresholds.iter().zip(&other.thresholds) {
            match (a, b) {
                (Threshold::Finite(x), Threshold::Finite(y)) => sum += (x - y) * (x - y),
                _ => return Ok(f64::INFINITY),
            }
        }
        Ok(sum.sqrt())
    }

    /// Write as CSV with one row per horizon step; the sentinel serializes
    /// as the literal `inf`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,q")?;
        for (k, t) in self.thresholds.iter().enumerate() {
            match t {
                Threshold::Finite(v) => writeln!(w, "{},{}", k + 1, v)?,
                Threshold::Infinite => writeln!(w, "{},inf", k + 1)?,
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, ConformalError> {
        let mut thresholds = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| ConformalError::Csv(e.to_string()))?;
            if i == 0 {
                continue; // header
            }
            let field = line
                .split(',')
                .nth(1)
                .ok_or_else(|| ConformalError::Csv(format!("line {}: missing q column", i + 1)))?;
            if field == "inf" {
                thresholds.push(Threshold::Infinite);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| ConformalError::Csv(format!("line {}: bad value {field:?}", i + 1)))?;
                thresholds.push(Threshold::Finite(v));
            }
        }
        QuantileVector::new(thresholds)
    }
}

/// K x H nonconformity scores from one calibration round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    rows: Vec<Vec<f64>>,
    horizon: usize,
}

impl ScoreMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, ConformalError> {
        let first = rows.first().ok_or(ConformalError::EmptyScoreMatrix)?;
        let horizon = first.len();
        if horizon == 0 {
            return Err(ConformalError::EmptyScoreMatrix);
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != horizon {
                return Err(ConformalError::RaggedRow { row: i });
            }
            for &v in row {
                if !v.is_finite() || v < 0.0 {
                    return Err(ConformalError::InvalidScore { row: i, value: v });
                }
            }
        }
        Ok(Self { rows, horizon })
    }

    pub fn n_trajectories(&self) -> usize {
        self.rows.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Scores of horizon step `kappa` (0-based) across all trajectories.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[k]).collect()
    }

    /// Every cell in row-major order.
    pub fn pooled(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<String> = (1..=self.horizon).map(|k| format!("step_{k}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, ConformalError> {
        let mut rows = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| ConformalError::Csv(e.to_string()))?;
            if i == 0 || line.is_empty() {
                continue;
            }
            let row: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
            rows.push(row.map_err(|_| ConformalError::Csv(format!("line {}: bad row", i + 1)))?);
        }
        ScoreMatrix::from_rows(rows)
    }
}

/// Calibration hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpConfig {
    /// Failure probability; coverage target is 1 - epsilon.
    pub epsilon: f64,
    /// Confidence for the dataset-conditional coverage bound.
    pub delta: f64,
    /// Smoothing weight on the threshold update.
    pub gamma: f64,
    /// Stopping tolerance (m) on the threshold change between rounds.
    pub phi: f64,
}

impl CpConfig {
    pub fn validate(&self) -> Result<(), ConformalError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(ConformalError::InvalidConfig("epsilon must lie in (0,1)"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(ConformalError::InvalidConfig("delta must lie in (0,1)"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(ConformalError::InvalidConfig("gamma must lie in [0,1]"));
        }
        if !(self.phi >= 0.0 && self.phi.is_finite()) {
            return Err(ConformalError::InvalidConfig("phi must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConformalError {
    #[error("score matrix needs at least one row and one column")]
    EmptyScoreMatrix,
    #[error("score matrix row {row} has inconsistent length")]
    RaggedRow { row: usize },
    #[error("score at row {row} is invalid: {value}")]
    InvalidScore { row: usize, value: f64 },
    #[error("quantile vector must be non-empty")]
    EmptyQuantileVector,
    #[error("threshold must be finite and non-negative, got {0}")]
    InvalidThreshold(f64),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("episode too short: no prediction resolves inside it")]
    EpisodeTooShort,
    #[error("prediction horizon {found} does not match requested {expected}")]
    HorizonMismatch { expected: usize, found: usize },
    #[error("prediction covers {found} agents but the trajectory has {expected}")]
    AgentCountMismatch { expected: usize, found: usize },
    #[error("observer index {observer} out of range for {n_agents} agents")]
    ObserverOutOfRange { observer: usize, n_agents: usize },
    #[error("csv error: {0}")]
    Csv(String),
}

/// Nonconformity scores of one episode from `observer`'s point of view.
///
/// `predictions[t]` must be the forecast issued at step `t`. Entry `kappa` of
/// the returned row is the largest gap `|Y_{t+kappa,j} - Yhat_{t+kappa|t,j}|`
/// over every prediction time `t` whose `kappa`-step prediction resolves
/// inside the episode and every non-ego agent `j`. A step with no resolved
/// pair contributes zero (nothing was predicted and realized, so nothing can
/// fall outside the set); an episode where nothing resolves at all is an
/// error.
pub fn score_episode(
    truth: &Trajectory,
    predictions: &[PredictedTrajectory],
    observer: usize,
    horizon: usize,
) -> Result<Vec<f64>, ConformalError> {
    let n_agents = truth.n_agents();
    if observer >= n_agents {
        return Err(ConformalError::ObserverOutOfRange { observer, n_agents });
    }
    let mut row = vec![0.0_f64; horizon];
    let mut resolved_any = false;
    for (t, pred) in predictions.iter().enumerate() {
        if pred.horizon() != horizon {
            return Err(ConformalError::HorizonMismatch {
                expected: horizon,
                found: pred.horizon(),
            });
        }
        if pred.n_agents() != n_agents {
            return Err(ConformalError::AgentCountMismatch {
                expected: n_agents,
                found: pred.n_agents(),
            });
        }
        for k in 1..=horizon {
            if t + k >= truth.len() {
                break;
            }
            resolved_any = true;
            for j in 0..n_agents {
                if j == observer {
                    continue;
                }
                let gap = truth.position(t + k, j).distance(&pred.track(j)[k - 1]);
                if gap > row[k - 1] {
                    row[k - 1] = gap;
                }
            }
        }
    }
    if !resolved_any {
        return Err(ConformalError::EpisodeTooShort);
    }
    Ok(row)
}

/// The (K+1)(1-epsilon) order-statistic rank, guarded against float noise
/// when the product is mathematically an integer.
fn conformal_rank(k: usize, epsilon: f64) -> usize {
    let t = (k as f64 + 1.0) * (1.0 - epsilon);
    if (t - t.round()).abs() < 1e-9 {
        t.round() as usize
    } else {
        t.ceil() as usize
    }
}

/// Per-step split-conformal thresholds: for every horizon step, the p-th
/// smallest score with p = ceil((K+1)(1-epsilon)), or the unbounded sentinel
/// when p exceeds K.
pub fn calibrate(scores: &ScoreMatrix, epsilon: f64) -> Result<QuantileVector, ConformalError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ConformalError::InvalidConfig("epsilon must lie in (0,1)"));
    }
    let k = scores.n_trajectories();
    let p = conformal_rank(k, epsilon);
    let mut thresholds = Vec::with_capacity(scores.horizon());
    for col in 0..scores.horizon() {
        if p > k {
            thresholds.push(Threshold::Infinite);
            continue;
        }
        let mut column = scores.column(col);
        column.sort_unstable_by(f64::total_cmp);
        thresholds.push(Threshold::Finite(column[p - 1]));
    }
    QuantileVector::new(thresholds)
}

/// Elementwise convex combination `(1-gamma) * q_prev + gamma * q_hat`.
/// A sentinel on either side survives whenever its weight is nonzero.
pub fn smooth(
    q_prev: &QuantileVector,
    q_hat: &QuantileVector,
    gamma: f64,
) -> Result<QuantileVector, ConformalError> {
    if q_prev.len() != q_hat.len() {
        return Err(ConformalError::LengthMismatch {
            left: q_prev.len(),
            right: q_hat.len(),
        });
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(ConformalError::InvalidConfig("gamma must lie in [0,1]"));
    }
    let mut out = Vec::with_capacity(q_prev.len());
    for (a, b) in q_prev.thresholds().iter().zip(q_hat.thresholds()) {
        let t = match (a, b) {
            (Threshold::Finite(x), Threshold::Finite(y)) => {
                Threshold::Finite((1.0 - gamma) * x + gamma * y)
            }
            (Threshold::Infinite, _) if gamma < 1.0 => Threshold::Infinite,
            (Threshold::Infinite, y) => *y,
            (_, Threshold::Infinite) if gamma > 0.0 => Threshold::Infinite,
            (x, Threshold::Infinite) => *x,
        };
        out.push(t);
    }
    QuantileVector::new(out)
}

/// Per-step and pooled misdetection rates of test scores against deployed
/// thresholds, as fractions in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisdetectionStats {
    pub per_step: Vec<f64>,
    pub overall: f64,
}

/// Fraction of test scores falling outside the prediction sets. An unbounded
/// threshold misses nothing.
pub fn misdetection(
    test_scores: &ScoreMatrix,
    q: &QuantileVector,
) -> Result<MisdetectionStats, ConformalError> {
    if test_scores.horizon() != q.len() {
        return Err(ConformalError::LengthMismatch {
            left: test_scores.horizon(),
            right: q.len(),
        });
    }
    let n = test_scores.n_trajectories() as f64;
    let mut per_step = Vec::with_capacity(q.len());
    let mut total_misses = 0usize;
    for k in 0..q.len() {
        let threshold = q.get(k);
        let misses = test_scores
            .rows()
            .iter()
            .filter(|row| threshold.misses(row[k]))
            .count();
        total_misses += misses;
        per_step.push(misses as f64 / n);
    }
    let cells = n * q.len() as f64;
    Ok(MisdetectionStats {
        per_step,
        overall: total_misses as f64 / cells,
    })
}

/// Natural log of the gamma function (Lanczos approximation, g = 7).
#[allow(clippy::excessive_precision)] // published coefficient table
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (Lentz's algorithm).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-16;
    const FPMIN: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m_f = m as f64;
        let m2 = 2.0 * m_f;
        // Even step
        let aa = m_f * (b - m_f) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step
        let aa = -(a + m_f) * (qab + m_f) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Quantile of the Beta(a, b) distribution by bisection on I_x(a, b).
fn inv_reg_inc_beta(a: f64, b: f64, p: f64) -> f64 {
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    // I_x is monotone increasing in x; 1e-12 interval width comfortably
    // beats the documented 1e-10 tolerance.
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if reg_inc_beta(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Dataset-conditional coverage lower bound: the delta-quantile of
/// Beta(K+1-v, v) with v = floor((K+1) epsilon). With v = 0 the calibrated
/// quantile is the sample maximum or beyond, so the bound is exactly 1.
pub fn coverage_lower_bound(k: usize, epsilon: f64, delta: f64) -> Result<f64, ConformalError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ConformalError::InvalidConfig("epsilon must lie in (0,1)"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ConformalError::InvalidConfig("delta must lie in (0,1)"));
    }
    let v = ((k as f64 + 1.0) * epsilon).floor();
    if v < 1.0 {
        return Ok(1.0);
    }
    let a = k as f64 + 1.0 - v;
    Ok(inv_reg_inc_beta(a, v, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::PredictedTrajectory;
    use crate::trajectory::{Position, Trajectory};
    use proptest::prelude::*;

    fn matrix(rows: Vec<Vec<f64>>) -> ScoreMatrix {
        ScoreMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn calibrate_forced_arithmetic() {
        // K=19, eps=0.10: p = ceil(20 * 0.9) = 18 -> 18th smallest of 1..19.
        let rows: Vec<Vec<f64>> = (1..=19).map(|i| vec![i as f64]).collect();
        let q = calibrate(&matrix(rows), 0.10).unwrap();
        assert_eq!(q.get(0), Threshold::Finite(18.0));

        // K=1000, eps=0.15: p = ceil(0.85 * 1001) = 851.
        assert_eq!(conformal_rank(1000, 0.15), 851);

        // K=3, eps=0.1: p = ceil(3.6) = 4 > 3 -> sentinel.
        let rows = vec![vec![1.0], vec![2.0], vec![3.0]];
        let q = calibrate(&matrix(rows), 0.1).unwrap();
        assert_eq!(q.get(0), Threshold::Infinite);
    }

    // Smallest threshold covering at least p of the K samples; infinite when
    // even the largest sample is not enough.
    fn brute_force_quantile(column: &[f64], epsilon: f64) -> Threshold {
        let k = column.len();
        let p = conformal_rank(k, epsilon);
        if p > k {
            return Threshold::Infinite;
        }
        let mut candidates = column.to_vec();
        candidates.sort_unstable_by(f64::total_cmp);
        for &t in &candidates {
            let covered = column.iter().filter(|&&s| s <= t).count();
            if covered >= p {
                return Threshold::Finite(t);
            }
        }
        Threshold::Infinite
    }

    #[test]
    fn calibrate_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let k = rng.gen_range(1..=50);
            let h = rng.gen_range(1..=10);
            let eps = rng.gen_range(0.01..0.5);
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..h).map(|_| rng.gen_range(0.0..10.0)).collect())
                .collect();
            let m = matrix(rows);
            let q = calibrate(&m, eps).unwrap();
            for col in 0..h {
                assert_eq!(q.get(col), brute_force_quantile(&m.column(col), eps));
            }
        }
    }

    proptest! {
        #[test]
        fn calibrate_monotone_in_scores(
            mut rows in proptest::collection::vec(
                proptest::collection::vec(0.0f64..100.0, 4), 1..20),
            bump in 0.0f64..50.0,
            eps in 0.05f64..0.5,
        ) {
            let before = calibrate(&matrix(rows.clone()), eps).unwrap();
            rows[0][2] += bump;
            let after = calibrate(&matrix(rows), eps).unwrap();
            for k in 0..4 {
                match (before.get(k), after.get(k)) {
                    (Threshold::Finite(a), Threshold::Finite(b)) => prop_assert!(b >= a),
                    (Threshold::Finite(_), Threshold::Infinite) => {}
                    (Threshold::Infinite, Threshold::Infinite) => {}
                    (Threshold::Infinite, Threshold::Finite(_)) => prop_assert!(false),
                }
            }
        }
    }

    #[test]
    fn smooth_examples_and_endpoints() {
        let a = QuantileVector::new(vec![Threshold::Finite(1.0)]).unwrap();
        let b = QuantileVector::new(vec![Threshold::Finite(2.0)]).unwrap();
        let s = smooth(&a, &b, 0.8).unwrap();
        assert!((s.get(0).as_f64() - 1.8).abs() < 1e-15);
        assert_eq!(smooth(&a, &b, 0.0).unwrap(), a);
        assert_eq!(smooth(&a, &b, 1.0).unwrap(), b);
    }

    #[test]
    fn smooth_geometric_series() {
        let c = 3.7;
        let q_hat = QuantileVector::new(vec![Threshold::Finite(c)]).unwrap();
        let mut q = QuantileVector::zeros(1);
        let expected = [0.9 * c, 0.99 * c, 0.999 * c, 0.9999 * c];
        for e in expected {
            q = smooth(&q, &q_hat, 0.9).unwrap();
            assert!((q.get(0).as_f64() - e).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_sentinel_propagation() {
        let fin = QuantileVector::new(vec![Threshold::Finite(1.0)]).unwrap();
        let inf = QuantileVector::new(vec![Threshold::Infinite]).unwrap();
        assert_eq!(smooth(&fin, &inf, 0.5).unwrap().get(0), Threshold::Infinite);
        assert_eq!(smooth(&fin, &inf, 0.0).unwrap().get(0), Threshold::Finite(1.0));
        assert_eq!(smooth(&inf, &fin, 1.0).unwrap().get(0), Threshold::Finite(1.0));
        assert_eq!(smooth(&inf, &fin, 0.5).unwrap().get(0), Threshold::Infinite);
    }

    proptest! {
        #[test]
        fn smooth_contracts_toward_target(
            a in proptest::collection::vec(0.0f64..50.0, 1..8),
            c in proptest::collection::vec(0.0f64..50.0, 1..8),
            gamma in 0.0f64..=1.0,
        ) {
            let n = a.len().min(c.len());
            let qa = QuantileVector::new(a[..n].iter().map(|&v| Threshold::Finite(v)).collect()).unwrap();
            let qc = QuantileVector::new(c[..n].iter().map(|&v| Threshold::Finite(v)).collect()).unwrap();
            let s = smooth(&qa, &qc, gamma).unwrap();
            let lhs = s.l2_distance(&qc).unwrap();
            let rhs = (1.0 - gamma) * qa.l2_distance(&qc).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
        }
    }

    #[test]
    fn misdetection_counting() {
        let all_low = matrix(vec![vec![0.1, 0.2], vec![0.3, 0.1]]);
        let q = QuantileVector::new(vec![Threshold::Finite(1.0), Threshold::Finite(1.0)]).unwrap();
        let stats = misdetection(&all_low, &q).unwrap();
        assert_eq!(stats.overall, 0.0);

        let q_inf = QuantileVector::new(vec![Threshold::Infinite, Threshold::Infinite]).unwrap();
        let stats = misdetection(&all_low, &q_inf).unwrap();
        assert_eq!(stats.overall, 0.0);

        // 10 hand-set scores, threshold at the median value: exactly the
        // 5 strictly-above entries miss.
        let rows: Vec<Vec<f64>> = (1..=10).map(|i| vec![i as f64]).collect();
        let q = QuantileVector::new(vec![Threshold::Finite(5.0)]).unwrap();
        let stats = misdetection(&matrix(rows), &q).unwrap();
        assert_eq!(stats.overall, 0.5);
        assert_eq!(stats.per_step, vec![0.5]);
    }

    fn straight_trajectory(n_steps: usize, n_agents: usize) -> Trajectory {
        let steps = (0..n_steps)
            .map(|t| {
                (0..n_agents)
                    .map(|j| Position::new(0.1 * t as f64, j as f64))
                    .collect()
            })
            .collect();
        Trajectory::new(steps).unwrap()
    }

    fn exact_predictions(truth: &Trajectory, horizon: usize) -> Vec<PredictedTrajectory> {
        // Prediction issued at t that exactly matches the future, holding the
        // last position wherever the future runs out.
        (0..truth.len() - 1)
            .map(|t| {
                let tracks = (0..truth.n_agents())
                    .map(|j| {
                        (1..=horizon)
                            .map(|k| truth.position((t + k).min(truth.len() - 1), j))
                            .collect()
                    })
                    .collect();
                PredictedTrajectory::new(tracks, horizon).unwrap()
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let truth = straight_trajectory(8, 2);
        let preds = exact_predictions(&truth, 3);
        let row = score_episode(&truth, &preds, 0, 3).unwrap();
        assert_eq!(row, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn euclidean_error_vector() {
        // Two steps, one other agent, prediction off by (3, 4) at kappa = 1.
        let truth = Trajectory::new(vec![
            vec![Position::new(0.0, 0.0), Position::new(1.0, 1.0)],
            vec![Position::new(0.0, 0.0), Position::new(1.0, 1.0)],
        ])
        .unwrap();
        let pred = PredictedTrajectory::new(
            vec![
                vec![Position::new(0.0, 0.0)],
                vec![Position::new(4.0, 5.0)],
            ],
            1,
        )
        .unwrap();
        let row = score_episode(&truth, &[pred], 0, 1).unwrap();
        assert_eq!(row, vec![5.0]);
    }

    #[test]
    fn scores_match_exhaustive_enumeration() {
        // 3-step episode with hand-written predictions; oracle enumerates
        // every (t, kappa, j) triple directly.
        let truth = Trajectory::new(vec![
            vec![Position::new(0.0, 0.0), Position::new(5.0, 0.0), Position::new(0.0, 5.0)],
            vec![Position::new(0.5, 0.0), Position::new(4.5, 0.2), Position::new(0.1, 4.5)],
            vec![Position::new(1.0, 0.0), Position::new(4.0, 0.4), Position::new(0.2, 4.0)],
        ])
        .unwrap();
        let h = 2;
        let preds: Vec<PredictedTrajectory> = (0..2)
            .map(|t| {
                let tracks = (0..3)
                    .map(|j| {
                        (1..=h)
                            .map(|k| {
                                // deliberately biased predictions
                                let p = truth.position((t + k).min(2), j);
                                Position::new(p.x + 0.1 * (j as f64 + 1.0), p.y - 0.2 * k as f64)
                            })
                            .collect()
                    })
                    .collect();
                PredictedTrajectory::new(tracks, h).unwrap()
            })
            .collect();
        let row = score_episode(&truth, &preds, 0, h).unwrap();

        let mut oracle = vec![0.0_f64; h];
        for (t, pred) in preds.iter().enumerate() {
            for k in 1..=h {
                if t + k >= truth.len() {
                    continue;
                }
                for j in 1..3 {
                    let d = truth.position(t + k, j).distance(&pred.track(j)[k - 1]);
                    oracle[k - 1] = oracle[k - 1].max(d);
                }
            }
        }
        assert_eq!(row, oracle);
    }

    #[test]
    fn too_short_episode_errors() {
        let truth = straight_trajectory(1, 2);
        assert_eq!(
            score_episode(&truth, &[], 0, 3),
            Err(ConformalError::EpisodeTooShort)
        );
    }

    #[test]
    fn unresolved_steps_score_zero() {
        // Episode of 3 steps, horizon 5: steps 3..5 never resolve.
        let truth = straight_trajectory(3, 2);
        let preds = exact_predictions(&truth, 5);
        let row = score_episode(&truth, &preds, 0, 5).unwrap();
        assert_eq!(row[2], 0.0);
        assert_eq!(row[4], 0.0);
    }

    #[test]
    fn coverage_bound_degenerate_and_direction() {
        // K=1, eps=0.4: v = floor(2*0.4) = 0 -> exactly 1.
        assert_eq!(coverage_lower_bound(1, 0.4, 0.01).unwrap(), 1.0);
        // Sane magnitude for the workhorse case.
        let b = coverage_lower_bound(1000, 0.15, 0.01).unwrap();
        assert!(b > 0.80 && b < 0.85, "bound {b}");
        // Tighter delta can only lower the bound.
        let b2 = coverage_lower_bound(1000, 0.15, 0.5).unwrap();
        assert!(b2 > b);
    }

    // Independent inversion oracle: bisect on statrs' incomplete-beta CDF
    // (statrs' own inverse_cdf only resolves ~1e-6, too coarse here).
    fn beta_quantile_oracle(a: f64, b: f64, p: f64) -> f64 {
        use statrs::distribution::{Beta, ContinuousCDF};
        let dist = Beta::new(a, b).unwrap();
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if dist.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn coverage_bound_matches_inversion_oracle() {
        for (k, eps, delta) in [
            (1000usize, 0.15, 0.01),
            (250, 0.15, 0.01),
            (500, 0.10, 0.05),
            (100, 0.2, 0.5),
        ] {
            let v = ((k as f64 + 1.0) * eps).floor();
            let oracle = beta_quantile_oracle(k as f64 + 1.0 - v, v, delta);
            let got = coverage_lower_bound(k, eps, delta).unwrap();
            assert!(
                (got - oracle).abs() < 1e-8,
                "K={k} eps={eps} delta={delta}: {got} vs {oracle}"
            );
        }
    }

    #[test]
    fn coverage_bound_median_symmetry() {
        // At delta = 0.5 the bound is the Beta median.
        for (k, eps) in [(1000usize, 0.15), (300, 0.1)] {
            let v = ((k as f64 + 1.0) * eps).floor();
            let median = beta_quantile_oracle(k as f64 + 1.0 - v, v, 0.5);
            let got = coverage_lower_bound(k, eps, 0.5).unwrap();
            assert!((got - median).abs() < 1e-8);
        }
    }

    #[test]
    fn coverage_bound_monotone_in_k() {
        let mut prev = 0.0;
        for i in 0..20 {
            let k = 50 + 100 * i;
            let b = coverage_lower_bound(k, 0.15, 0.01).unwrap();
            assert!(b > prev, "K={k}: {b} <= {prev}");
            prev = b;
        }
    }

    #[test]
    fn marginal_coverage_smoke() {
        // Exchangeable scores: misdetection concentrates at or below epsilon
        // plus sampling slack. The full 20-seed check lives in the
        // acceptance suite.
        use rand::{Rng, SeedableRng};
        let eps = 0.15;
        for seed in 0..3u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(900 + seed);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..250)
                    .map(|_| (0..5).map(|_| -rng.gen::<f64>().ln()).collect())
                    .collect()
            };
            let cal = matrix(draw(&mut rng));
            let q = calibrate(&cal, eps).unwrap();
            let test: Vec<Vec<f64>> = (0..2000)
                .map(|_| (0..5).map(|_| -rng.gen::<f64>().ln()).collect())
                .collect();
            let stats = misdetection(&matrix(test), &q).unwrap();
            assert!(
                stats.overall <= eps + 3.0 * (eps * (1.0 - eps) / 2000.0).sqrt(),
                "seed {seed}: {}",
                stats.overall
            );
        }
    }

    #[test]
    fn csv_round_trips() {
        let m = matrix(vec![vec![0.5, 1.25], vec![2.0, 0.0]]);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = ScoreMatrix::read_csv(buf.as_slice()).unwrap();
        assert_eq!(m, back);

        let q = QuantileVector::new(vec![Threshold::Finite(0.75), Threshold::Infinite]).unwrap();
        let mut buf = Vec::new();
        q.write_csv(&mut buf).unwrap();
        let back = QuantileVector::read_csv(buf.as_slice()).unwrap();
        assert_eq!(q, back);
    }

    #[test]
    fn config_validation() {
        let ok = CpConfig { epsilon: 0.15, delta: 0.01, gamma: 0.8, phi: 0.1 };
        assert!(ok.validate().is_ok());
        assert!(CpConfig { epsilon: 0.0, ..ok }.validate().is_err());
        assert!(CpConfig { delta: 1.0, ..ok }.validate().is_err());
        assert!(CpConfig { gamma: 1.1, ..ok }.validate().is_err());
        assert!(CpConfig { phi: -0.1, ..ok }.validate().is_err());
    }
}
