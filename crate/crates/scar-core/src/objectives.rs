//! The four schedule costs: deterministic/stochastic total weighted
//! tardiness (DT, ST) and deterministic/stochastic ratio (DR, SR).
//!
//! Tardiness is the priority-weighted sum of expected per-agent empty times.
//! The ratio variant divides by `n * E[T_max]`, which makes schedules of
//! different lengths comparable: with normalised weights it is the expected
//! proportion of schedule time the fleet spends empty, bounded by [0, 1].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prediction::FleetState;
use crate::prediction::{
    rollout_deterministic, rollout_stochastic, Prediction, PredictionError, RolloutMode,
};
use crate::scenario::{ScenarioConfig, Schedule};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("{weights} weights supplied for {agents} agents")]
    DimensionMismatch { weights: usize, agents: usize },
    #[error("ratio cost is undefined for a schedule of zero total time")]
    ZeroTotalTime,
    #[error(transparent)]
    Rollout(#[from] PredictionError),
}

/// Which objective function drives an optimisation.
#[allow(clippy::upper_case_acronyms)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    DT,
    ST,
    DR,
    SR,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [
        ObjectiveKind::DT,
        ObjectiveKind::ST,
        ObjectiveKind::DR,
        ObjectiveKind::SR,
    ];

    /// Stochastic kinds fold parameter uncertainty into the expected value;
    /// deterministic kinds evaluate at parameter means.
    pub fn is_stochastic(self) -> bool {
        matches!(self, ObjectiveKind::ST | ObjectiveKind::SR)
    }

    pub fn is_ratio(self) -> bool {
        matches!(self, ObjectiveKind::DR | ObjectiveKind::SR)
    }

    pub fn rollout_mode(self) -> RolloutMode {
        if self.is_stochastic() {
            RolloutMode::Stochastic
        } else {
            RolloutMode::Deterministic
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ObjectiveKind::DT => "dt",
            ObjectiveKind::ST => "st",
            ObjectiveKind::DR => "dr",
            ObjectiveKind::SR => "sr",
        };
        f.write_str(s)
    }
}

impl FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dt" => Ok(ObjectiveKind::DT),
            "st" => Ok(ObjectiveKind::ST),
            "dr" => Ok(ObjectiveKind::DR),
            "sr" => Ok(ObjectiveKind::SR),
            other => Err(format!(
                "unknown objective `{other}` (expected dt, st, dr or sr)"
            )),
        }
    }
}

/// A schedule cost under one objective kind. Lower is better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub value: f64,
    pub kind: ObjectiveKind,
}

/// Priority-weighted expected total tardiness of a prediction.
pub fn tardiness_cost(
    prediction: &Prediction,
    weights: &[f64],
    kind: ObjectiveKind,
) -> Result<Cost, ObjectiveError> {
    if weights.len() != prediction.empty_time.len() {
        return Err(ObjectiveError::DimensionMismatch {
            weights: weights.len(),
            agents: prediction.empty_time.len(),
        });
    }
    let value = weights
        .iter()
        .zip(&prediction.empty_time)
        .map(|(w, e)| w * e.mean)
        .sum();
    Ok(Cost { value, kind })
}

/// Weighted tardiness normalised by `n * E[T_max]`.
pub fn ratio_cost(
    prediction: &Prediction,
    weights: &[f64],
    n: usize,
    kind: ObjectiveKind,
) -> Result<Cost, ObjectiveError> {
    let tardiness = tardiness_cost(prediction, weights, kind)?.value;
    let total = prediction.total_time.mean;
    if !total.is_finite() || total <= 0.0 {
        return Err(ObjectiveError::ZeroTotalTime);
    }
    Ok(Cost {
        value: tardiness / (n as f64 * total),
        kind,
    })
}

/// Roll the schedule out in the mode matching `kind` and apply its formula.
pub fn evaluate(
    kind: ObjectiveKind,
    config: &ScenarioConfig,
    state: &FleetState,
    schedule: &Schedule,
) -> Result<Cost, ObjectiveError> {
    let prediction = if kind.is_stochastic() {
        rollout_stochastic(config, state, schedule)?
    } else {
        rollout_deterministic(config, state, schedule)?
    };
    let weights = config.weights();
    if kind.is_ratio() {
        ratio_cost(&prediction, &weights, config.n_users(), kind)
    } else {
        tardiness_cost(&prediction, &weights, kind)
    }
}
