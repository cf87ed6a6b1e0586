use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::pseudo::SparseTrainConfig;
use crate::error::Error;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Fully supervised detection plus attributes.
    #[serde(rename = "attridet")]
    AttriDet,
    /// Sparse detection: labeled region, pseudo-labels, triplet term.
    SlaDet,
    /// Sparse detection plus attributes.
    SlaDetAttri,
}

impl TrainMode {
    pub fn is_sparse(self) -> bool {
        !matches!(self, TrainMode::AttriDet)
    }

    pub fn uses_attributes(self) -> bool {
        !matches!(self, TrainMode::SlaDet)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::AttriDet => "attridet",
            TrainMode::SlaDet => "sla_det",
            TrainMode::SlaDetAttri => "sla_det_attri",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attridet" => Ok(TrainMode::AttriDet),
            "sla_det" => Ok(TrainMode::SlaDet),
            "sla_det_attri" => Ok(TrainMode::SlaDetAttri),
            other => Err(Error::argument(format!(
                "unknown mode `{other}` (expected attridet, sla_det or sla_det_attri)"
            ))),
        }
    }
}

/// Loss components of one step. `detection` is the summed per-level
/// supervised term: unmasked in `attridet`, region-masked otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub detection: T,
    pub pseudo: T,
    pub triplet: T,
    pub attributes: T,
}

/// Whether the triplet term is active at `epoch` (0-based).
pub fn triplet_active(config: &SparseTrainConfig, epoch: usize) -> bool {
    epoch < config.epochs_triplet_active
}

pub fn total_loss<T: Scalar>(mode: TrainMode, parts: &LossParts<T>, config: &SparseTrainConfig, epoch: usize) -> T {
    match mode {
        TrainMode::AttriDet => parts.detection + parts.attributes,
        TrainMode::SlaDet | TrainMode::SlaDetAttri => {
            let mut total = parts.detection + T::lit(config.w_pl) * parts.pseudo;
            if triplet_active(config, epoch) {
                total = total + T::lit(config.w_tri) * parts.triplet;
            }
            if mode == TrainMode::SlaDetAttri {
                total = total + parts.attributes;
            }
            total
        }
    }
}
