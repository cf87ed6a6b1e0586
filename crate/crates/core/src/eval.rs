//! Detection and attribute metrics: 101-point interpolated AP per class at
//! IoU 0.50:0.05:0.95, and per-attribute F1 on IoU-matched pairs.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotation::{iou, Attribute, BoundingBox, Dataset, NUM_ATTRIBUTES};
use crate::corpus::image_io::RgbImage;
use crate::detector::{decode_predictions, image_to_map, Detector};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// IoU for pairing detections with ground truth in attribute scoring.
    pub attribute_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.001,
            nms_iou: 0.5,
            max_detections: 300,
            attribute_iou: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::config("eval.conf_threshold", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || !(0.0..=1.0).contains(&self.attribute_iou) {
            return Err(Error::config("eval.nms_iou", "IoU thresholds must lie in [0, 1]"));
        }
        if self.max_detections == 0 {
            return Err(Error::config("eval.max_detections", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedBox {
    pub class: usize,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// Attribute probabilities, when computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<[f64; NUM_ATTRIBUTES]>,
}

/// Predictions for one image; `image_id` must match a test record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: String,
    pub boxes: Vec<PredictedBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    pub ground_truth: usize,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeF1 {
    pub attribute: String,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeScores {
    pub matches: usize,
    /// False when nothing matched; every F1 is then reported as 0.
    pub valid: bool,
    pub per_attribute: Vec<AttributeF1>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub images: usize,
    pub ground_truth: usize,
    pub predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map50: f64,
    pub map50_95: f64,
    /// Classes without ground truth are listed but excluded from the means.
    pub per_class: Vec<ClassAp>,
    pub attributes: Option<AttributeScores>,
    pub counts: EvalCounts,
    pub config_fingerprint: String,
    /// Kept out of the serialized report so reports stay reproducible.
    #[serde(skip)]
    pub wallclock_secs: f64,
}

impl EvalReport {
    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>10} {:>10} {:>8}", "class", "AP@50", "AP@50-95", "GT");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<24} {:>10.4} {:>10.4} {:>8}",
                c.class, c.ap50, c.ap50_95, c.ground_truth
            );
        }
        let _ = writeln!(
            s,
            "{:<24} {:>10.4} {:>10.4} {:>8}",
            "mean", self.map50, self.map50_95, self.counts.ground_truth
        );
        if let Some(attr) = &self.attributes {
            let _ = writeln!(s);
            let _ = writeln!(
                s,
                "{:<24} {:>10} {:>6} {:>6} {:>6}",
                "attribute", "F1", "TP", "FP", "FN"
            );
            for a in &attr.per_attribute {
                let _ = writeln!(
                    s,
                    "{:<24} {:>10.4} {:>6} {:>6} {:>6}",
                    a.attribute, a.f1, a.tp, a.fp, a.fn_
                );
            }
            let _ = writeln!(
                s,
                "matched pairs: {}{}",
                attr.matches,
                if attr.valid { "" } else { " (no matches)" }
            );
        }
        let _ = writeln!(
            s,
            "images {}  ground truth {}  predictions {}",
            self.counts.images, self.counts.ground_truth, self.counts.predictions
        );
        s
    }
}

/// Area under the 101-point interpolated precision envelope.
pub fn interpolated_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < envelope.len() {
            sum += envelope[idx];
        }
    }
    sum / 101.0
}

fn ordered<'a>(preds: impl Iterator<Item = (usize, usize, &'a PredictedBox)>) -> Vec<(usize, usize, &'a PredictedBox)> {
    let mut v: Vec<_> = preds.collect();
    v.sort_by(|a, b| {
        b.2.confidence
            .partial_cmp(&a.2.confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    v
}

/// Ground-truth boxes per image for one class.
type ClassGt = Vec<Vec<BoundingBox>>;

/// AP of one class at one IoU threshold; `None` if the class has no ground
/// truth. `preds` are `(image index, prediction index, box)`.
fn class_ap(gt: &ClassGt, preds: &[(usize, usize, &PredictedBox)], threshold: f64) -> Option<f64> {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(preds.len());
    let mut precision = Vec::with_capacity(preds.len());
    for (rank, &(img, _, p)) in preds.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt[img].iter().enumerate() {
            if used[img][j] {
                continue;
            }
            let o = iou(&p.bbox, g);
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[img][j] = true;
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    Some(interpolated_ap(&recall, &precision))
}

fn align<'a>(test: &Dataset, predictions: &'a [ImagePredictions]) -> Result<Vec<Option<&'a ImagePredictions>>> {
    let mut aligned: Vec<Option<&ImagePredictions>> = vec![None; test.records.len()];
    for p in predictions {
        let idx = test
            .records
            .binary_search_by(|r| r.image_id.as_str().cmp(&p.image_id))
            .map_err(|_| Error::argument(format!("predictions for unknown image `{}`", p.image_id)))?;
        if aligned[idx].is_some() {
            return Err(Error::argument(format!(
                "duplicate predictions for image `{}`",
                p.image_id
            )));
        }
        aligned[idx] = Some(p);
    }
    Ok(aligned)
}

/// Per-class AP and their means over classes with ground truth.
pub fn evaluate_detections(test: &Dataset, predictions: &[ImagePredictions]) -> Result<(f64, f64, Vec<ClassAp>)> {
    if test.records.is_empty() {
        return Err(Error::argument("cannot evaluate on an empty test set"));
    }
    let aligned = align(test, predictions)?;
    let mut per_class = Vec::with_capacity(test.num_classes());
    let (mut sum50, mut sum50_95, mut counted) = (0.0, 0.0, 0usize);
    for c in 0..test.num_classes() {
        let gt: ClassGt = test
            .records
            .iter()
            .map(|r| {
                r.annotations
                    .iter()
                    .filter(|a| a.cell_class == c)
                    .map(|a| a.bbox)
                    .collect()
            })
            .collect();
        let preds = ordered(aligned.iter().enumerate().flat_map(|(i, p)| {
            p.iter()
                .flat_map(|p| p.boxes.iter().enumerate())
                .filter(|(_, b)| b.class == c)
                .map(move |(j, b)| (i, j, b))
        }));
        let aps: Vec<Option<f64>> = IOU_THRESHOLDS.iter().map(|&t| class_ap(&gt, &preds, t)).collect();
        let n_gt = gt.iter().map(Vec::len).sum();
        let (ap50, ap50_95) = match aps[0] {
            Some(a50) => {
                let mean = aps.iter().map(|a| a.unwrap_or(0.0)).sum::<f64>() / IOU_THRESHOLDS.len() as f64;
                sum50 += a50;
                sum50_95 += mean;
                counted += 1;
                (a50, mean)
            }
            None => (0.0, 0.0),
        };
        per_class.push(ClassAp {
            class: test.classes[c].clone(),
            ground_truth: n_gt,
            ap50,
            ap50_95,
        });
    }
    if counted == 0 {
        return Ok((0.0, 0.0, per_class));
    }
    Ok((sum50 / counted as f64, sum50_95 / counted as f64, per_class))
}

/// Class-agnostic greedy pairing by descending confidence: each prediction
/// takes the unmatched ground truth of highest IoU, if at least `threshold`.
/// Returns `(prediction index, ground-truth index)`.
pub fn match_predictions(gt: &[BoundingBox], preds: &[PredictedBox], threshold: f64) -> Vec<(usize, usize)> {
    let order = ordered(preds.iter().enumerate().map(|(j, p)| (0, j, p)));
    let mut used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, j, p) in order {
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gt.iter().enumerate() {
            if used[k] {
                continue;
            }
            let o = iou(&p.bbox, g);
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((k, o));
            }
        }
        if let Some((k, _)) = best {
            used[k] = true;
            pairs.push((j, k));
        }
    }
    pairs
}

/// F1 per attribute over all matched pairs, thresholding predictions at 0.5.
/// An attribute with no positives on either side scores 1.
pub fn evaluate_attributes(
    test: &Dataset,
    predictions: &[ImagePredictions],
    iou_match: f64,
) -> Result<AttributeScores> {
    let aligned = align(test, predictions)?;
    let mut tp = [0usize; NUM_ATTRIBUTES];
    let mut fp = [0usize; NUM_ATTRIBUTES];
    let mut fn_ = [0usize; NUM_ATTRIBUTES];
    let mut matches = 0;
    for (record, preds) in test.records.iter().zip(&aligned) {
        let Some(preds) = preds else { continue };
        let gt: Vec<BoundingBox> = record.annotations.iter().map(|a| a.bbox).collect();
        for (j, k) in match_predictions(&gt, &preds.boxes, iou_match) {
            let probs = preds.boxes[j].attributes.ok_or_else(|| {
                Error::argument(format!(
                    "matched prediction {j} of `{}` has no attributes",
                    record.image_id
                ))
            })?;
            matches += 1;
            let truth = record.annotations[k].attributes.0;
            for a in 0..NUM_ATTRIBUTES {
                match (probs[a] >= 0.5, truth[a]) {
                    (true, true) => tp[a] += 1,
                    (true, false) => fp[a] += 1,
                    (false, true) => fn_[a] += 1,
                    (false, false) => {}
                }
            }
        }
    }
    let valid = matches > 0;
    let per_attribute = Attribute::ALL
        .iter()
        .map(|&attr| {
            let a = attr.index();
            let denom = 2 * tp[a] + fp[a] + fn_[a];
            let f1 = if !valid {
                0.0
            } else if denom == 0 {
                1.0
            } else {
                2.0 * tp[a] as f64 / denom as f64
            };
            AttributeF1 {
                attribute: attr.abbreviation().to_string(),
                f1,
                tp: tp[a],
                fp: fp[a],
                fn_: fn_[a],
            }
        })
        .collect();
    Ok(AttributeScores {
        matches,
        valid,
        per_attribute,
    })
}

/// Runs the detector on one image: thresholding, NMS and the top-k cut.
pub fn predict_image<T: Scalar>(
    model: &Detector<T>,
    image: &RgbImage,
    config: &EvalConfig,
) -> Result<(Vec<PredictedBox>, crate::detector::ForwardPass<T>)> {
    let map = image_to_map::<T>(&image.pixels, image.width as usize, image.height as usize);
    let pass = model.forward(&map, false)?;
    let mut dets = decode_predictions(&pass.levels, T::lit(config.conf_threshold), T::lit(config.nms_iou));
    dets.truncate(config.max_detections);
    let (w, h) = (image.width as f64, image.height as f64);
    let boxes = dets
        .into_iter()
        .filter_map(|d| {
            let bbox = d.bbox.cast::<f64>().clamp_to(w, h)?;
            Some(PredictedBox {
                class: d.class,
                confidence: d.confidence.as_f64(),
                bbox,
                attributes: None,
            })
        })
        .collect();
    Ok((boxes, pass))
}

/// Predictions for every test image. Attribute probabilities are computed
/// for the predictions that pair with ground truth (the only ones scored),
/// or for all of them when `all_attributes` is set.
pub fn predict_dataset<T: Scalar>(
    model: &Detector<T>,
    dataset: &Dataset,
    images: &[RgbImage],
    config: &EvalConfig,
    all_attributes: bool,
) -> Result<Vec<ImagePredictions>> {
    let mut out = Vec::with_capacity(dataset.records.len());
    for (record, image) in dataset.records.iter().zip(images) {
        let (mut boxes, pass) = predict_image(model, image, config)?;
        let wanted: Vec<usize> = if all_attributes {
            (0..boxes.len()).collect()
        } else {
            let gt: Vec<BoundingBox> = record.annotations.iter().map(|a| a.bbox).collect();
            match_predictions(&gt, &boxes, config.attribute_iou)
                .into_iter()
                .map(|(j, _)| j)
                .collect()
        };
        for j in wanted {
            let probs = model.predict_attributes(&pass.features, &boxes[j].bbox.cast::<T>(), pass.image_dims)?;
            boxes[j].attributes = Some(probs.map(|p| p.as_f64()));
        }
        out.push(ImagePredictions {
            image_id: record.image_id.clone(),
            boxes,
        });
    }
    Ok(out)
}

/// Full report for a model on a fully annotated test set.
pub fn evaluate_model<T: Scalar>(
    model: &Detector<T>,
    test: &Dataset,
    images: &[RgbImage],
    config: &EvalConfig,
    fingerprint: &str,
) -> Result<EvalReport> {
    config.validate()?;
    if test.records.is_empty() {
        return Err(Error::argument("cannot evaluate on an empty test set"));
    }
    if let Some(r) = test.records.iter().find(|r| !r.is_fully_annotated()) {
        return Err(Error::validation(
            r.image_id.clone(),
            "region",
            "test images must be fully annotated",
        ));
    }
    let start = std::time::Instant::now();
    let predictions = predict_dataset(model, test, images, config, false)?;
    let (map50, map50_95, per_class) = evaluate_detections(test, &predictions)?;
    let attributes = evaluate_attributes(test, &predictions, config.attribute_iou)?;
    Ok(EvalReport {
        map50,
        map50_95,
        per_class,
        attributes: Some(attributes),
        counts: EvalCounts {
            images: test.records.len(),
            ground_truth: test.annotation_count(),
            predictions: predictions.iter().map(|p| p.boxes.len()).sum(),
        },
        config_fingerprint: fingerprint.to_string(),
        wallclock_secs: start.elapsed().as_secs_f64(),
    })
}
