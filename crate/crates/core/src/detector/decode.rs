use std::cmp::Ordering;

use super::level::LevelPrediction;
use crate::annotation::{iou, BoundingBox, HasBox};
use crate::losses::confidence_score;
use crate::scalar::Scalar;

/// One decoded cell prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection<T> {
    pub class: usize,
    pub confidence: T,
    pub bbox: BoundingBox<T>,
    pub objectness: T,
    pub class_probs: Vec<T>,
    pub level: usize,
    /// Grid cell `(x, y)` on its level.
    pub cell: (usize, usize),
}

impl<T> HasBox<T> for Detection<T> {
    fn bbox(&self) -> &BoundingBox<T> {
        &self.bbox
    }
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Every cell of every level, in level/row/column order.
pub fn dense_predictions<T: Scalar>(levels: &[LevelPrediction<T>]) -> Vec<Detection<T>> {
    let mut out = Vec::new();
    for lp in levels {
        for y in 0..lp.grid_h() {
            for x in 0..lp.grid_w() {
                let probs = lp.class_probs(x, y);
                let obj = lp.objectness(x, y);
                out.push(Detection {
                    class: argmax(&probs),
                    confidence: confidence_score(&probs, obj).expect("non-empty class vector"),
                    bbox: lp.decode_box(x, y),
                    objectness: obj,
                    class_probs: probs,
                    level: lp.level,
                    cell: (x, y),
                });
            }
        }
    }
    out
}

fn by_confidence<T: Scalar>(a: &Detection<T>, b: &Detection<T>) -> Ordering {
    b.confidence.partial_cmp(&a.confidence).unwrap_or(Ordering::Equal)
}

/// Greedy class-agnostic suppression: walks detections by descending
/// confidence and drops any whose IoU with a kept box exceeds `iou_threshold`.
pub fn nms<T: Scalar>(mut detections: Vec<Detection<T>>, iou_threshold: T) -> Vec<Detection<T>> {
    detections.sort_by(by_confidence);
    let mut kept: Vec<Detection<T>> = Vec::new();
    for d in detections {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Thresholds cell predictions by confidence, applies NMS, and returns the
/// survivors sorted by descending confidence.
pub fn decode_predictions<T: Scalar>(
    levels: &[LevelPrediction<T>],
    conf_threshold: T,
    nms_iou: T,
) -> Vec<Detection<T>> {
    let candidates = dense_predictions(levels)
        .into_iter()
        .filter(|d| d.confidence >= conf_threshold)
        .collect();
    nms(candidates, nms_iou)
}
