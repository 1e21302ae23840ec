//! Mutual-information estimators.
//!
//! Every estimator has a value form working on plain tensors and a recorded
//! form working on [`Var`](crate::Var)s, so an estimate can serve directly as
//! a training objective for whatever produced its inputs.

mod critic;
mod dim;
mod gmi;
mod matrix;
mod mine;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use critic::{CriticNet, CriticVars, DvParts, CRITIC_HIDDEN, EMA_DECAY};
pub use dim::{dim_local_mi, dim_local_parts};
pub use gmi::{gmi_edge_term, gmi_feature_parts, gmi_lite, gmi_lite_var, GmiBreakdown, GmiSample};
pub use matrix::{
    gram_matrix, gram_var, matrix_mi, matrix_mi_var, median_bandwidth, renyi_entropy, renyi_entropy_var,
    Bandwidth, GramMatrix, DEFAULT_ALPHA,
};
pub use mine::{mine_dv_bound, mine_parts, mine_train_step};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Matrix,
    Mine,
    DimLocal,
    GmiLite,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Matrix => "matrix",
            EstimatorKind::Mine => "mine",
            EstimatorKind::DimLocal => "dim_local",
            EstimatorKind::GmiLite => "gmi_lite",
        }
    }

    pub fn units(self) -> Units {
        match self {
            EstimatorKind::Matrix => Units::Bits,
            _ => Units::Nats,
        }
    }

    /// Whether the estimator carries a trainable critic.
    pub fn has_critic(self) -> bool {
        self != EstimatorKind::Matrix
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            EstimatorKind::Matrix,
            EstimatorKind::Mine,
            EstimatorKind::DimLocal,
            EstimatorKind::GmiLite,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| Error::Unknown {
            kind: "estimator",
            name: s.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    Bits,
    Nats,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIEstimate {
    pub value: f64,
    pub units: Units,
    pub estimator: EstimatorKind,
    pub batch_size: usize,
}

impl MIEstimate {
    pub(crate) fn new(value: f64, estimator: EstimatorKind, batch_size: usize) -> Self {
        MIEstimate {
            value,
            units: estimator.units(),
            estimator,
            batch_size,
        }
    }

    pub fn bits(&self) -> f64 {
        match self.units {
            Units::Bits => self.value,
            Units::Nats => self.value / std::f64::consts::LN_2,
        }
    }
}
