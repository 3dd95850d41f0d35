//! Shared position and trajectory data carried between the simulator,
//! the predictors, and the scoring pipeline.

use serde::{Deserialize, Serialize};

/// A planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Time-indexed joint agent positions for one episode.
///
/// `positions[t][j]` is agent `j`'s position at step `t`. Every step holds
/// the same number of agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    positions: Vec<Vec<Position>>,
}

impl Trajectory {
    /// Build from time-major joint positions. Requires at least one step and
    /// a consistent agent count across steps.
    pub fn new(positions: Vec<Vec<Position>>) -> Result<Self, TrajectoryError> {
        let first = positions.first().ok_or(TrajectoryError::Empty)?;
        let n = first.len();
        if n == 0 {
            return Err(TrajectoryError::Empty);
        }
        for (t, step) in positions.iter().enumerate() {
            if step.len() != n {
                return Err(TrajectoryError::RaggedStep { step: t });
            }
            if step.iter().any(|p| !p.is_finite()) {
                return Err(TrajectoryError::NonFinite { step: t });
            }
        }
        Ok(Self { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.positions[0].len()
    }

    pub fn position(&self, t: usize, agent: usize) -> Position {
        self.positions[t][agent]
    }

    pub fn step(&self, t: usize) -> &[Position] {
        &self.positions[t]
    }

    pub fn steps(&self) -> &[Vec<Position>] {
        &self.positions
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory has no steps or no agents")]
    Empty,
    #[error("step {step} has a different agent count than step 0")]
    RaggedStep { step: usize },
    #[error("non-finite position at step {step}")]
    NonFinite { step: usize },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_ragged() {
        assert_eq!(Trajectory::new(vec![]), Err(TrajectoryError::Empty));
        assert_eq!(Trajectory::new(vec![vec![]]), Err(TrajectoryError::Empty));
        let ragged = vec![
            vec![Position::new(0.0, 0.0), Position::new(1.0, 0.0)],
            vec![Position::new(0.0, 0.1)],
        ];
        assert_eq!(
            Trajectory::new(ragged),
            Err(TrajectoryError::RaggedStep { step: 1 })
        );
    }

    #[test]
    fn rejects_non_finite() {
        let bad = vec![vec![Position::new(f64::NAN, 0.0)]];
        assert_eq!(Trajectory::new(bad), Err(TrajectoryError::NonFinite { step: 0 }));
    }

    #[test]
    fn euclidean_distance() {
        let a = Position::new(0.0, 0.0);
        let b = Position::new(3.0, 4.0);
        assert_eq!(a.distance(&b), 5.0);
    }
}
