use crate::annotation::BoundingBox;
use crate::nn::FeatureMap;
use crate::scalar::{sigmoid, Scalar};

/// Channel layout of a head output: objectness, four box parameters, then
/// one logit per class.
pub const OBJ_CHANNEL: usize = 0;
pub const BOX_CHANNELS: [usize; 4] = [1, 2, 3, 4];
pub const CLASS_OFFSET: usize = 5;

/// Log-size parameters are clamped to this magnitude before `exp`.
pub const LOG_SIZE_LIMIT: f64 = 8.0;

/// Dense raw output of one prediction level. Decoded quantities are computed
/// on demand so that losses can differentiate with respect to `raw`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPrediction<T> {
    pub level: usize,
    pub stride: usize,
    pub num_classes: usize,
    pub raw: FeatureMap<T>,
}

impl<T: Scalar> LevelPrediction<T> {
    pub fn new(level: usize, stride: usize, num_classes: usize, raw: FeatureMap<T>) -> Self {
        assert_eq!(raw.channels, CLASS_OFFSET + num_classes, "head channel count");
        Self {
            level,
            stride,
            num_classes,
            raw,
        }
    }

    pub fn grid_w(&self) -> usize {
        self.raw.width
    }

    pub fn grid_h(&self) -> usize {
        self.raw.height
    }

    pub fn objectness(&self, x: usize, y: usize) -> T {
        sigmoid(self.raw.at(OBJ_CHANNEL, y, x))
    }

    pub fn class_probs(&self, x: usize, y: usize) -> Vec<T> {
        (0..self.num_classes)
            .map(|c| sigmoid(self.raw.at(CLASS_OFFSET + c, y, x)))
            .collect()
    }

    pub fn box_params(&self, x: usize, y: usize) -> [T; 4] {
        BOX_CHANNELS.map(|ch| self.raw.at(ch, y, x))
    }

    /// Box in image pixels: the center stays inside the owning cell.
    pub fn decode_box(&self, x: usize, y: usize) -> BoundingBox<T> {
        decode_box_params(self.box_params(x, y), x, y, self.stride)
    }
}

pub fn clamped_exp<T: Scalar>(t: T) -> (T, bool) {
    let limit = T::lit(LOG_SIZE_LIMIT);
    if t > limit {
        (limit.exp(), true)
    } else if t < -limit {
        ((-limit).exp(), true)
    } else {
        (t.exp(), false)
    }
}

pub fn decode_box_params<T: Scalar>(p: [T; 4], x: usize, y: usize, stride: usize) -> BoundingBox<T> {
    let s = T::lit(stride as f64);
    let cx = (T::lit(x as f64) + sigmoid(p[0])) * s;
    let cy = (T::lit(y as f64) + sigmoid(p[1])) * s;
    let w = s * clamped_exp(p[2]).0;
    let h = s * clamped_exp(p[3]).0;
    BoundingBox::from_center(cx, cy, w, h)
}

/// Inverse of [`decode_box_params`] for a box whose center lies strictly
/// inside cell `(x, y)`.
pub fn encode_box<T: Scalar>(b: &BoundingBox<T>, x: usize, y: usize, stride: usize) -> [T; 4] {
    let s = T::lit(stride as f64);
    let (cx, cy) = b.center();
    let logit = |p: T| (p / (T::one() - p)).ln();
    [
        logit(cx / s - T::lit(x as f64)),
        logit(cy / s - T::lit(y as f64)),
        (b.w / s).ln(),
        (b.h / s).ln(),
    ]
}
