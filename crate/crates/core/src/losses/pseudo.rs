//! Pseudo-label selection for the unannotated part of a training image and
//! the loss supervised by the selected labels.

use serde::{Deserialize, Serialize};

use super::detection::{center_cell, multi_level_losses, DetectionTerms, Target};
use crate::annotation::{BoundingBox, Dataset, GridMask};
use crate::detector::{Detection, LevelPrediction, STRIDES};
use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::scalar::Scalar;

/// Confidence of a cell prediction: highest class probability times
/// objectness.
pub fn confidence_score<T: Scalar>(class_probs: &[T], objectness: T) -> Result<T> {
    let max = class_probs
        .iter()
        .copied()
        .reduce(T::max)
        .ok_or_else(|| Error::argument("confidence of an empty class vector"))?;
    Ok(max * objectness)
}

/// Shannon entropy in bits of the class vector after renormalizing it to sum
/// to one. `0 · log 0` is taken as 0.
pub fn class_entropy<T: Scalar>(class_probs: &[T]) -> Result<T> {
    let total: T = class_probs.iter().copied().sum();
    if !(total > T::zero()) {
        return Err(Error::argument("entropy of an all-zero class vector"));
    }
    let mut e = T::zero();
    for &p in class_probs {
        let q = p / total;
        if q > T::zero() {
            e = e - q * q.log2();
        }
    }
    Ok(e.max(T::zero()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletFormula {
    /// `max(0, max_diff + margin - min_same)`
    Hypothesis,
    /// `max(0, min_same - (max_diff + margin))`, kept for comparison
    Reversed,
}

/// Thresholds, weights and schedule of sparse training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparseTrainConfig {
    pub t0: f64,
    pub t1: f64,
    /// Entropy threshold, bits.
    pub t2: f64,
    /// Smallest ground-truth box area (pixels²); derived from the training set
    /// when absent.
    pub area_min: Option<f64>,
    pub w_pl: f64,
    pub w_tri: f64,
    pub margin: f64,
    pub epochs_total: usize,
    pub epochs_triplet_active: usize,
    pub triplet_formula: TripletFormula,
}

impl Default for SparseTrainConfig {
    fn default() -> Self {
        Self {
            t0: 0.70,
            t1: 0.95,
            t2: 2.6,
            area_min: None,
            w_pl: 0.1,
            w_tri: 0.1,
            margin: 0.05,
            epochs_total: 50,
            epochs_triplet_active: 40,
            triplet_formula: TripletFormula::Hypothesis,
        }
    }
}

impl SparseTrainConfig {
    /// Caps `t2` at `log2 C`, the largest entropy a `C`-class vector can have.
    /// The default of 2.6 bits exceeds that bound for fewer than 7 classes.
    pub fn fit_to_classes(&mut self, num_classes: usize) {
        let max_entropy = (num_classes as f64).log2();
        if self.t2 > max_entropy {
            log::warn!("t2 = {} exceeds log2 C = {max_entropy:.4}; capping", self.t2);
            self.t2 = max_entropy;
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.0 <= self.t0 && self.t0 <= self.t1 && self.t1 <= 1.0) {
            return Err(Error::config("sparse.t0/t1", "need 0 <= t0 <= t1 <= 1"));
        }
        let max_entropy = (num_classes as f64).log2();
        if !(self.t2 > 0.0 && self.t2 <= max_entropy + 1e-12) {
            return Err(Error::config(
                "sparse.t2",
                format!("must lie in (0, log2 C = {max_entropy:.4}]"),
            ));
        }
        if self.w_pl < 0.0 || self.w_tri < 0.0 {
            return Err(Error::config("sparse.w_pl/w_tri", "weights must be non-negative"));
        }
        if self.margin < 0.0 {
            return Err(Error::config("sparse.margin", "must be non-negative"));
        }
        if let Some(a) = self.area_min {
            if !(a >= 0.0) {
                return Err(Error::config("sparse.area_min", "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Smallest `w · h` over every annotation of the training set.
pub fn compute_area_min(dataset: &Dataset) -> Result<f64> {
    dataset
        .records
        .iter()
        .flat_map(|r| &r.annotations)
        .map(|a| a.bbox.area())
        .reduce(f64::min)
        .ok_or_else(|| Error::argument("cannot derive area_min from a dataset without annotations"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateResults {
    pub t0: bool,
    pub area: bool,
    pub t1: bool,
    pub entropy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pseudo,
    Candidate,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateReport {
    pub confidence: f64,
    pub entropy_bits: f64,
    pub area: f64,
    pub gates: GateResults,
    pub verdict: Verdict,
}

/// Evaluates the four pseudo-label gates on one prediction.
pub fn classify_prediction<T: Scalar>(det: &Detection<T>, config: &SparseTrainConfig, area_min: f64) -> GateReport {
    let conf = det.confidence.as_f64();
    let entropy = class_entropy(&det.class_probs).map_or(f64::INFINITY, |e| e.as_f64());
    let area = det.bbox.area().as_f64();
    let gates = GateResults {
        t0: conf >= config.t0,
        area: area > area_min,
        t1: conf > config.t1,
        entropy: entropy < config.t2,
    };
    let verdict = if gates.t0 && gates.area && gates.t1 && gates.entropy {
        Verdict::Pseudo
    } else if gates.t0 && conf < config.t1 {
        Verdict::Candidate
    } else {
        Verdict::Discard
    };
    GateReport {
        confidence: conf,
        entropy_bits: entropy,
        area,
        gates,
        verdict,
    }
}

/// A prediction promoted to a training target, with the grid cell holding its
/// center on every level.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel<T> {
    pub class: usize,
    pub bbox: BoundingBox<T>,
    pub confidence: T,
    /// `(level, x, y)`, one entry per level.
    pub footprint: Vec<(usize, usize, usize)>,
}

/// Keeps the unannotated-region predictions that pass all four gates.
pub fn filter_pseudo_labels<T: Scalar>(
    outside: &[&Detection<T>],
    config: &SparseTrainConfig,
    area_min: f64,
    image_dims: (usize, usize),
) -> Vec<PseudoLabel<T>> {
    outside
        .iter()
        .filter(|d| classify_prediction(d, config, area_min).verdict == Verdict::Pseudo)
        .map(|d| PseudoLabel {
            class: d.class,
            bbox: d.bbox,
            confidence: d.confidence,
            footprint: STRIDES
                .iter()
                .enumerate()
                .map(|(v, &s)| {
                    let (gx, gy) = center_cell(&d.bbox, s, image_dims.0 / s, image_dims.1 / s);
                    (v, gx, gy)
                })
                .collect(),
        })
        .collect()
}

/// Unannotated-region predictions with `t0 <= conf < t1`.
pub fn similarity_candidates<'a, T: Scalar>(
    outside: &[&'a Detection<T>],
    config: &SparseTrainConfig,
) -> Vec<&'a Detection<T>> {
    outside
        .iter()
        .copied()
        .filter(|d| {
            let c = d.confidence.as_f64();
            c >= config.t0 && c < config.t1
        })
        .collect()
}

/// Per-level supervision masks covering only the pseudo-label footprints.
pub fn footprint_masks<T: Scalar>(levels: &[LevelPrediction<T>], pseudo: &[PseudoLabel<T>]) -> Vec<GridMask> {
    let mut masks: Vec<GridMask> = levels
        .iter()
        .map(|l| GridMask::filled(l.grid_w(), l.grid_h(), false))
        .collect();
    for p in pseudo {
        for &(v, x, y) in &p.footprint {
            if v < masks.len() && x < masks[v].width && y < masks[v].height {
                masks[v].set(x, y, true);
            }
        }
    }
    masks
}

/// Detection loss supervised by pseudo-labels, masked to their footprints:
/// no cell outside a footprint is treated as background.
pub fn pseudo_label_loss<T: Scalar>(
    levels: &[LevelPrediction<T>],
    pseudo: &[PseudoLabel<T>],
    grads: Option<(&mut [FeatureMap<T>], DetectionTerms<T>)>,
) -> DetectionTerms<T> {
    if pseudo.is_empty() {
        return DetectionTerms::zero();
    }
    let masks = footprint_masks(levels, pseudo);
    let targets: Vec<Target<T>> = pseudo
        .iter()
        .map(|p| Target {
            bbox: p.bbox,
            class: p.class,
        })
        .collect();
    multi_level_losses(levels, &targets, &masks, grads)
}

/// One line of the `filter-debug` dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub conf: f64,
    pub entropy_bits: f64,
    pub area: f64,
    pub gate_results: GateResults,
    pub verdict: Verdict,
}

impl FilterRecord {
    pub fn new<T: Scalar>(image_id: &str, det: &Detection<T>, report: &GateReport) -> Self {
        let b = det.bbox.cast::<f64>();
        Self {
            image_id: image_id.to_string(),
            bbox: [b.x, b.y, b.w, b.h],
            conf: report.confidence,
            entropy_bits: report.entropy_bits,
            area: report.area,
            gate_results: report.gates,
            verdict: report.verdict,
        }
    }
}
