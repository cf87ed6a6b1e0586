//! Supervised detection terms (objectness, class, box) on one level, and
//! the region-masked sum over levels.

use crate::annotation::{region_mask, AnnotatedRegion, Annotation, BoundingBox, GridMask};
use crate::detector::{clamped_exp, LevelPrediction, BOX_CHANNELS, CLASS_OFFSET, OBJ_CHANNEL, STRIDES};
use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::scalar::{bce_with_logit, sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target<T> {
    pub bbox: BoundingBox<T>,
    pub class: usize,
}

impl<T: Scalar> Target<T> {
    pub fn from_annotation(a: &Annotation) -> Self {
        Self {
            bbox: a.bbox.cast(),
            class: a.cell_class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectionTerms<T> {
    pub obj: T,
    pub cls: T,
    pub bbox: T,
}

impl<T: Scalar> DetectionTerms<T> {
    pub fn zero() -> Self {
        Self {
            obj: T::zero(),
            cls: T::zero(),
            bbox: T::zero(),
        }
    }

    pub fn total(&self) -> T {
        self.obj + self.cls + self.bbox
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            obj: self.obj + o.obj,
            cls: self.cls + o.cls,
            bbox: self.bbox + o.bbox,
        }
    }
}

/// Destination for gradients with respect to a level's raw head output.
/// Each term's gradient is multiplied by its weight before accumulation.
pub struct GradSink<'a, T> {
    pub raw: &'a mut FeatureMap<T>,
    pub weights: DetectionTerms<T>,
}

/// Level whose stride is closest (in log scale) to `sqrt(w·h)`; ties go to
/// the coarser level.
pub fn assign_level<T: Scalar>(bbox: &BoundingBox<T>) -> usize {
    let size = (bbox.w * bbox.h).sqrt().as_f64().max(1e-12);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (v, &s) in STRIDES.iter().enumerate() {
        let d = (s as f64 / size).ln().abs();
        if d <= best_d {
            best = v;
            best_d = d;
        }
    }
    best
}

/// Grid cell containing the box center, clamped to the grid.
pub fn center_cell<T: Scalar>(bbox: &BoundingBox<T>, stride: usize, grid_w: usize, grid_h: usize) -> (usize, usize) {
    let (cx, cy) = bbox.center();
    let s = stride as f64;
    let gx = (cx.as_f64() / s).floor().clamp(0.0, (grid_w - 1) as f64) as usize;
    let gy = (cy.as_f64() / s).floor().clamp(0.0, (grid_h - 1) as f64) as usize;
    (gx, gy)
}

/// Positive cells on this level: `(x, y, target index)`. A cell claimed by
/// an earlier target keeps it.
pub fn level_positives<T: Scalar>(
    level: &LevelPrediction<T>,
    targets: &[Target<T>],
    mask: &GridMask,
) -> Vec<(usize, usize, usize)> {
    let mut taken = GridMask::filled(level.grid_w(), level.grid_h(), false);
    let mut out = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if assign_level(&t.bbox) != level.level {
            continue;
        }
        let (x, y) = center_cell(&t.bbox, level.stride, level.grid_w(), level.grid_h());
        if mask.get(x, y) && !taken.get(x, y) {
            taken.set(x, y, true);
            out.push((x, y, i));
        }
    }
    out
}

/// `1 - IoU(pred, target)` and its gradient with respect to the four raw box
/// parameters of cell `(x, y)`.
pub fn iou_loss_with_grad<T: Scalar>(
    params: [T; 4],
    x: usize,
    y: usize,
    stride: usize,
    target: &BoundingBox<T>,
) -> (T, [T; 4]) {
    let zero = T::zero();
    let one = T::one();
    let half = T::lit(0.5);
    let s = T::lit(stride as f64);
    let (sx, sy) = (sigmoid(params[0]), sigmoid(params[1]));
    let (ew, clamp_w) = clamped_exp(params[2]);
    let (eh, clamp_h) = clamped_exp(params[3]);
    let cx = (T::lit(x as f64) + sx) * s;
    let cy = (T::lit(y as f64) + sy) * s;
    let (w, h) = (s * ew, s * eh);
    // same arithmetic as the decoded box, so a prediction compared with its
    // own decoding ties exactly on every edge
    let pred = BoundingBox::from_center(cx, cy, w, h);
    let (x1, x2, y1, y2) = (pred.x, pred.right(), pred.y, pred.bottom());
    let (tx1, tx2, ty1, ty2) = (target.x, target.right(), target.y, target.bottom());

    let iw = x2.min(tx2) - x1.max(tx1);
    let ih = y2.min(ty2) - y1.max(ty1);
    let overlap = iw > zero && ih > zero;
    let inter = if overlap { iw * ih } else { zero };
    let union = pred.area() + target.area() - inter;
    let iou = inter / union;
    let loss = one - iou;
    if !overlap {
        return (loss, [zero; 4]);
    }
    // Partial derivatives of the intersection w.r.t. the predicted edges.
    // Where an edge coincides with the target's, min/max has a kink; taking
    // the midpoint of the one-sided derivatives makes the gradient vanish when
    // the prediction equals its target (as it does for pseudo-labels).
    let edge = |inside: bool, tie: bool, v: T| {
        if tie {
            v * half
        } else if inside {
            v
        } else {
            zero
        }
    };
    let d_x1 = edge(x1 > tx1, x1 == tx1, -ih);
    let d_x2 = edge(x2 < tx2, x2 == tx2, ih);
    let d_y1 = edge(y1 > ty1, y1 == ty1, -iw);
    let d_y2 = edge(y2 < ty2, y2 == ty2, iw);
    let di_dcx = d_x1 + d_x2;
    let di_dcy = d_y1 + d_y2;
    let di_dw = (d_x2 - d_x1) * half;
    let di_dh = (d_y2 - d_y1) * half;
    let u2 = union * union;
    let k_inter = (union + inter) / u2;
    let k_area = inter / u2;
    let diou_dcx = k_inter * di_dcx;
    let diou_dcy = k_inter * di_dcy;
    let diou_dw = k_inter * di_dw - k_area * h;
    let diou_dh = k_inter * di_dh - k_area * w;
    let g = [
        -diou_dcx * s * sx * (one - sx),
        -diou_dcy * s * sy * (one - sy),
        if clamp_w { zero } else { -diou_dw * w },
        if clamp_h { zero } else { -diou_dh * h },
    ];
    (loss, g)
}

/// Detection terms on one level.
///
/// Objectness is binary cross-entropy over every cell with `mask = 1`
/// (positives target 1, the rest 0). Class and box terms are evaluated at
/// positive cells only: class BCE summed over the class vector, and
/// mean `1 - IoU`. Each term is averaged over its own count; an empty set
/// gives 0.
pub fn detection_losses<T: Scalar>(
    level: &LevelPrediction<T>,
    targets: &[Target<T>],
    mask: &GridMask,
    grad: Option<GradSink<'_, T>>,
) -> DetectionTerms<T> {
    assert_eq!(
        (mask.width, mask.height),
        (level.grid_w(), level.grid_h()),
        "mask dims must match level dims"
    );
    let positives = level_positives(level, targets, mask);
    let mut is_pos = GridMask::filled(level.grid_w(), level.grid_h(), false);
    for &(x, y, _) in &positives {
        is_pos.set(x, y, true);
    }
    let n_mask = mask.count();
    let n_pos = positives.len();
    let mut grad = grad;

    let mut obj = T::zero();
    if n_mask > 0 {
        let inv = T::one() / T::lit(n_mask as f64);
        for y in 0..level.grid_h() {
            for x in 0..level.grid_w() {
                if !mask.get(x, y) {
                    continue;
                }
                let target = if is_pos.get(x, y) { T::one() } else { T::zero() };
                let (l, g) = bce_with_logit(level.raw.at(OBJ_CHANNEL, y, x), target);
                obj = obj + l;
                if let Some(sink) = grad.as_mut() {
                    let d = sink.raw.at_mut(OBJ_CHANNEL, y, x);
                    *d = *d + g * inv * sink.weights.obj;
                }
            }
        }
        obj = obj * inv;
    }

    let mut cls = T::zero();
    let mut bbox = T::zero();
    if n_pos > 0 {
        let nc = level.num_classes;
        let inv_cls = T::one() / T::lit(n_pos as f64);
        let inv_box = T::one() / T::lit(n_pos as f64);
        for &(x, y, ti) in &positives {
            let t = &targets[ti];
            for c in 0..nc {
                let target = if c == t.class { T::one() } else { T::zero() };
                let (l, g) = bce_with_logit(level.raw.at(CLASS_OFFSET + c, y, x), target);
                cls = cls + l;
                if let Some(sink) = grad.as_mut() {
                    let d = sink.raw.at_mut(CLASS_OFFSET + c, y, x);
                    *d = *d + g * inv_cls * sink.weights.cls;
                }
            }
            let (l, g) = iou_loss_with_grad(level.box_params(x, y), x, y, level.stride, &t.bbox);
            bbox = bbox + l;
            if let Some(sink) = grad.as_mut() {
                for (k, &ch) in BOX_CHANNELS.iter().enumerate() {
                    let d = sink.raw.at_mut(ch, y, x);
                    *d = *d + g[k] * inv_box * sink.weights.bbox;
                }
            }
        }
        cls = cls * inv_cls;
        bbox = bbox * inv_box;
    }
    DetectionTerms { obj, cls, bbox }
}

/// Sum of per-level detection terms with one mask per level.
pub fn multi_level_losses<T: Scalar>(
    levels: &[LevelPrediction<T>],
    targets: &[Target<T>],
    masks: &[GridMask],
    mut grads: Option<(&mut [FeatureMap<T>], DetectionTerms<T>)>,
) -> DetectionTerms<T> {
    let mut total = DetectionTerms::zero();
    for (v, level) in levels.iter().enumerate() {
        let sink = grads.as_mut().map(|(g, w)| GradSink {
            raw: &mut g[v],
            weights: *w,
        });
        total = total.add(&detection_losses(level, targets, &masks[v], sink));
    }
    total
}

/// Level masks for an annotated region.
pub fn region_masks<T: Scalar>(
    levels: &[LevelPrediction<T>],
    region: &AnnotatedRegion,
    image_dims: (usize, usize),
) -> Result<Vec<GridMask>> {
    levels
        .iter()
        .map(|l| {
            region_mask(
                region,
                (l.grid_w(), l.grid_h()),
                (image_dims.0 as u32, image_dims.1 as u32),
            )
        })
        .collect()
}

/// Detection loss restricted to the annotated region: every level is masked
/// to the cells whose centers lie in the region, so predictions outside it
/// contribute nothing.
pub fn labeled_region_loss<T: Scalar>(
    levels: &[LevelPrediction<T>],
    annotations: &[Annotation],
    region: &AnnotatedRegion,
    image_dims: (usize, usize),
    grads: Option<(&mut [FeatureMap<T>], DetectionTerms<T>)>,
) -> Result<DetectionTerms<T>> {
    for (k, a) in annotations.iter().enumerate() {
        if !region.contains_center(&a.bbox) {
            return Err(Error::validation(
                format!("annotation {k}"),
                "box",
                "center lies outside the annotated region",
            ));
        }
    }
    let masks = region_masks(levels, region, image_dims)?;
    let targets: Vec<Target<T>> = annotations.iter().map(Target::from_annotation).collect();
    Ok(multi_level_losses(levels, &targets, &masks, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::AttributeVector;
    use crate::detector::{decode_box_params, STRIDES};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const W: usize = 96;
    const H: usize = 64;

    fn levels(seed: u64) -> Vec<LevelPrediction<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        STRIDES
            .iter()
            .enumerate()
            .map(|(v, &s)| {
                let (gw, gh) = (W / s, H / s);
                let n = (CLASS_OFFSET + 2) * gw * gh;
                LevelPrediction::new(
                    v,
                    s,
                    2,
                    FeatureMap::from_vec(
                        CLASS_OFFSET + 2,
                        gh,
                        gw,
                        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    ),
                )
            })
            .collect()
    }

    fn ann(x: f64, y: f64, w: f64, h: f64, class: usize) -> Annotation {
        Annotation {
            bbox: BoundingBox { x, y, w, h },
            cell_class: class,
            attributes: AttributeVector::default(),
        }
    }

    fn annotations() -> Vec<Annotation> {
        vec![
            ann(4.0, 6.0, 9.0, 7.0, 0),
            ann(20.0, 18.0, 15.0, 17.0, 1),
            ann(40.0, 10.0, 30.0, 34.0, 0),
        ]
    }

    fn region() -> AnnotatedRegion {
        AnnotatedRegion {
            rect: BoundingBox {
                x: 0.0,
                y: 0.0,
                w: 72.0,
                h: 48.0,
            },
        }
    }

    fn unit_weights() -> DetectionTerms<f64> {
        DetectionTerms {
            obj: 1.0,
            cls: 1.0,
            bbox: 1.0,
        }
    }

    #[test]
    fn levels_follow_box_size() {
        let b = |s: f64| BoundingBox {
            x: 0.0,
            y: 0.0,
            w: s,
            h: s,
        };
        assert_eq!(assign_level(&b(6.0)), 0);
        assert_eq!(assign_level(&b(20.0)), 1);
        assert_eq!(assign_level(&b(60.0)), 2);
        // geometric midpoint of 8 and 16 goes to the coarser level
        assert_eq!(assign_level(&b((8.0f64 * 16.0).sqrt())), 1);
    }

    #[test]
    fn center_cell_is_clamped() {
        let b = BoundingBox {
            x: 90.0,
            y: -10.0,
            w: 20.0,
            h: 4.0,
        };
        assert_eq!(center_cell(&b, 8, 12, 8), (11, 0));
    }

    #[test]
    fn single_cell_hand_values() {
        // one 1x1 level, logits all zero, one positive of class 0
        let raw = FeatureMap::zeros(CLASS_OFFSET + 2, 1, 1);
        let lp = LevelPrediction::new(0, 8, 2, raw);
        let t = Target {
            bbox: decode_box_params([0.0; 4], 0, 0, 8),
            class: 0,
        };
        let terms = detection_losses(&lp, &[t], &GridMask::filled(1, 1, true), None);
        let ln2 = 2f64.ln();
        assert!((terms.obj - ln2).abs() < 1e-12);
        assert!((terms.cls - 2.0 * ln2).abs() < 1e-12);
        assert!(terms.bbox.abs() < 1e-12);
    }

    #[test]
    fn empty_mask_and_no_targets_give_zero() {
        let lv = levels(1);
        let none = detection_losses(&lv[0], &[], &GridMask::filled(12, 8, false), None);
        assert_eq!((none.obj, none.cls, none.bbox), (0.0, 0.0, 0.0));
        let bg = detection_losses(&lv[0], &[], &GridMask::filled(12, 8, true), None);
        assert!(bg.obj > 0.0 && bg.cls == 0.0 && bg.bbox == 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let lv = levels(2);
        let anns = annotations();
        let weights = DetectionTerms {
            obj: 1.0,
            cls: 0.5,
            bbox: 5.0,
        };
        let weighted = |lv: &[LevelPrediction<f64>]| {
            let t = labeled_region_loss(lv, &anns, &region(), (W, H), None).unwrap();
            weights.obj * t.obj + weights.cls * t.cls + weights.bbox * t.bbox
        };
        let mut grads: Vec<FeatureMap<f64>> = lv.iter().map(|l| FeatureMap::zeros_like(&l.raw)).collect();
        labeled_region_loss(&lv, &anns, &region(), (W, H), Some((&mut grads, weights))).unwrap();
        let eps = 1e-6;
        let mut nonzero = 0;
        for v in 0..lv.len() {
            for i in 0..lv[v].raw.data.len() {
                let mut plus = lv.clone();
                plus[v].raw.data[i] += eps;
                let mut minus = lv.clone();
                minus[v].raw.data[i] -= eps;
                let num = (weighted(&plus) - weighted(&minus)) / (2.0 * eps);
                let ana = grads[v].data[i];
                assert!(
                    (num - ana).abs() <= 1e-5 * num.abs().max(1e-2),
                    "level {v} [{i}]: {num} vs {ana}"
                );
                nonzero += usize::from(ana != 0.0);
            }
        }
        assert!(nonzero > 50);
    }

    #[test]
    fn annotation_outside_region_is_an_error() {
        let lv = levels(0);
        let bad = vec![ann(80.0, 50.0, 8.0, 8.0, 0)];
        assert!(labeled_region_loss(&lv, &bad, &region(), (W, H), None).is_err());
    }

    proptest! {
        #[test]
        fn outside_the_region_nothing_matters(seed in 0u64..1000, noise in prop::collection::vec(-5.0f64..5.0, 64)) {
            let lv = levels(seed);
            let anns = annotations();
            let masks = region_masks(&lv, &region(), (W, H)).unwrap();
            let mut perturbed = lv.clone();
            let mut k = 0;
            for (l, m) in perturbed.iter_mut().zip(&masks) {
                for y in 0..l.grid_h() {
                    for x in 0..l.grid_w() {
                        if m.get(x, y) {
                            continue;
                        }
                        for c in 0..l.raw.channels {
                            *l.raw.at_mut(c, y, x) += noise[k % noise.len()];
                            k += 1;
                        }
                    }
                }
            }
            let mut ga: Vec<FeatureMap<f64>> = lv.iter().map(|l| FeatureMap::zeros_like(&l.raw)).collect();
            let mut gb = ga.clone();
            let a = labeled_region_loss(&lv, &anns, &region(), (W, H), Some((&mut ga, unit_weights()))).unwrap();
            let b = labeled_region_loss(&perturbed, &anns, &region(), (W, H), Some((&mut gb, unit_weights()))).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(ga, gb);
        }
    }

    #[test]
    fn own_decoding_is_a_stationary_point() {
        for p in [[0.3f32, -1.2, 0.4, 0.1], [2.0, 0.0, -0.5, 1.3], [-0.7, 0.9, 0.0, -0.2]] {
            let target = decode_box_params(p, 3, 2, 32);
            let (loss, g) = iou_loss_with_grad(p, 3, 2, 32, &target);
            assert!(loss.abs() < 1e-6);
            // before tie handling this gradient was of order 1 on w and h
            assert!(g.iter().all(|v| v.abs() < 1e-5), "params {p:?}: {g:?}");
        }
    }
}
