//! One-stage, anchor-free grid detector with three prediction levels
//! (strides 8, 16, 32) and the attribute head that reads pooled features from
//! the two finest levels.

mod attri_head;
mod decode;
mod level;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attri_head::{AttriCache, AttriHead};
pub use decode::{decode_predictions, dense_predictions, nms, Detection};
pub use level::{
    clamped_exp, decode_box_params, encode_box, LevelPrediction, BOX_CHANNELS, CLASS_OFFSET, LOG_SIZE_LIMIT,
    OBJ_CHANNEL,
};

use crate::annotation::{normalize_bbox, BoundingBox, NUM_ATTRIBUTES};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::{leaky_relu, leaky_relu_backward};
use crate::nn::{
    roi_align, roi_align_backward, Conv2d, ConvCache, FeatureMap, GroupNorm, GroupNormCache, Module, Param,
};
use crate::scalar::Scalar;

pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const NUM_LEVELS: usize = STRIDES.len();
/// Backbone layer whose output feeds prediction level `v`.
const LEVEL_LAYERS: [usize; NUM_LEVELS] = [3, 5, 7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Channel widths at strides 2, 4, 8, 16, 32.
    pub backbone_widths: [usize; 5],
    pub attri_conv_channels: [usize; 3],
    pub attri_fc_units: [usize; 3],
    pub pooled_height: usize,
    pub pooled_width: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    /// Group-normalization groups after each backbone convolution; 0 disables.
    pub norm_groups: usize,
    /// Initial objectness probability encoded in the head bias.
    pub objectness_prior: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            backbone_widths: [16, 24, 32, 48, 64],
            attri_conv_channels: [16, 16, 16],
            attri_fc_units: [1024, 256, NUM_ATTRIBUTES],
            pooled_height: 24,
            pooled_width: 30,
            dropout: 0.2,
            leaky_slope: 0.1,
            norm_groups: 8,
            objectness_prior: 0.01,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::config("model.num_classes", "must be at least 1"));
        }
        if self.attri_fc_units[2] != NUM_ATTRIBUTES {
            return Err(Error::config("model.attri_fc_units", "last layer must have 6 units"));
        }
        if self.pooled_height < 8 || self.pooled_width < 8 {
            return Err(Error::config(
                "model.pooled_height",
                "pooled block must be at least 8x8",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if !(self.objectness_prior > 0.0 && self.objectness_prior < 1.0) {
            return Err(Error::config("model.objectness_prior", "must lie in (0, 1)"));
        }
        if self
            .backbone_widths
            .iter()
            .chain(&self.attri_conv_channels)
            .any(|&w| w == 0)
        {
            return Err(Error::config("model.backbone_widths", "widths must be positive"));
        }
        if self.norm_groups > 0 && self.backbone_widths.iter().any(|w| w % self.norm_groups != 0) {
            return Err(Error::config(
                "model.norm_groups",
                "every backbone width must be divisible by norm_groups",
            ));
        }
        Ok(())
    }

    /// Channels of the two pooled maps (stride 8 and stride 16).
    pub fn pooled_channels(&self) -> (usize, usize) {
        (self.backbone_widths[2], self.backbone_widths[3])
    }

    pub fn level_channels(&self) -> [usize; NUM_LEVELS] {
        [
            self.backbone_widths[2],
            self.backbone_widths[3],
            self.backbone_widths[4],
        ]
    }
}

/// Feature maps feeding the three prediction levels. The first two double as
/// the early maps used for region pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneFeatures<T> {
    pub maps: Vec<FeatureMap<T>>,
}

impl<T: Scalar> BackboneFeatures<T> {
    pub fn s1(&self) -> &FeatureMap<T> {
        &self.maps[0]
    }

    pub fn s2(&self) -> &FeatureMap<T> {
        &self.maps[1]
    }
}

#[derive(Debug, Clone)]
struct BackboneCache<T> {
    convs: Vec<ConvCache<T>>,
    norms: Vec<GroupNormCache<T>>,
    /// Post-activation outputs of every backbone layer.
    outputs: Vec<FeatureMap<T>>,
    heads: Vec<ConvCache<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// `(width, height)` of the input image.
    pub image_dims: (usize, usize),
    pub features: BackboneFeatures<T>,
    pub levels: Vec<LevelPrediction<T>>,
    cache: Option<BackboneCache<T>>,
}

/// Upstream gradients for a backward pass.
#[derive(Debug, Clone)]
pub struct PassGradients<T> {
    /// With respect to each level's raw head output.
    pub levels: Vec<FeatureMap<T>>,
    /// With respect to each level's feature map (from region pooling).
    pub maps: Vec<FeatureMap<T>>,
}

impl<T: Scalar> PassGradients<T> {
    pub fn zeros_for(pass: &ForwardPass<T>) -> Self {
        Self {
            levels: pass.levels.iter().map(|l| FeatureMap::zeros_like(&l.raw)).collect(),
            maps: pass.features.maps.iter().map(FeatureMap::zeros_like).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector<T> {
    pub config: DetectorConfig,
    pub backbone: Vec<Conv2d<T>>,
    /// One per backbone layer, or empty.
    pub norms: Vec<GroupNorm<T>>,
    pub heads: Vec<Conv2d<T>>,
    pub attri: AttriHead<T>,
}

impl<T: Scalar> Detector<T> {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.backbone_widths;
        let slope = config.leaky_slope;
        // (in, out, stride) for the eight backbone convolutions
        let plan = [
            (3, w[0], 2),
            (w[0], w[1], 2),
            (w[1], w[2], 2),
            (w[2], w[2], 1),
            (w[2], w[3], 2),
            (w[3], w[3], 1),
            (w[3], w[4], 2),
            (w[4], w[4], 1),
        ];
        let backbone = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s))| Conv2d::new(&format!("backbone.{i}"), cin, cout, 3, s, slope, &mut rng))
            .collect();
        let norms = if config.norm_groups > 0 {
            plan.iter()
                .enumerate()
                .map(|(i, &(_, cout, _))| GroupNorm::new(&format!("backbone.{i}.norm"), config.norm_groups, cout))
                .collect()
        } else {
            Vec::new()
        };
        let prior = (config.objectness_prior / (1.0 - config.objectness_prior)).ln();
        let heads = config
            .level_channels()
            .iter()
            .enumerate()
            .map(|(v, &cin)| {
                let mut head = Conv2d::new(
                    &format!("head.{v}"),
                    cin,
                    CLASS_OFFSET + config.num_classes,
                    1,
                    1,
                    0.0,
                    &mut rng,
                );
                head.weight.value.iter_mut().for_each(|x| *x = *x * T::lit(0.1));
                head.bias.value[OBJ_CHANNEL] = T::lit(prior);
                head
            })
            .collect();
        let (c1, c2) = config.pooled_channels();
        let attri = AttriHead::new(
            c1 + c2,
            (config.pooled_height, config.pooled_width),
            config.attri_conv_channels,
            config.attri_fc_units,
            config.dropout,
            slope,
            &mut rng,
        );
        Ok(Self {
            config,
            backbone,
            norms,
            heads,
            attri,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn level_dims(width: usize, height: usize) -> [(usize, usize); NUM_LEVELS] {
        STRIDES.map(|s| (width / s, height / s))
    }

    /// Runs the backbone and the prediction heads. With `keep_cache` the pass
    /// can later be fed to [`backward`](Self::backward).
    pub fn forward(&self, image: &FeatureMap<T>, keep_cache: bool) -> Result<ForwardPass<T>> {
        if image.channels != 3 {
            return Err(Error::argument(format!(
                "expected a 3-channel image, got {}",
                image.channels
            )));
        }
        if image.width == 0 || image.height == 0 || !image.width.is_multiple_of(32) || !image.height.is_multiple_of(32)
        {
            return Err(Error::argument(format!(
                "image dims {}x{} must be positive multiples of 32",
                image.width, image.height
            )));
        }
        let slope = T::lit(self.config.leaky_slope);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut outputs: Vec<FeatureMap<T>> = Vec::new();
        let mut x = image.clone();
        for (i, layer) in self.backbone.iter().enumerate() {
            let (mut y, cache) = layer.forward(&x);
            if keep_cache {
                convs.push(cache);
            }
            if let Some(norm) = self.norms.get(i) {
                let (z, nc) = norm.forward(&y);
                y = z;
                if keep_cache {
                    norms.push(nc);
                }
            }
            leaky_relu(&mut y.data, slope);
            outputs.push(y.clone());
            x = y;
        }
        let maps: Vec<FeatureMap<T>> = LEVEL_LAYERS.iter().map(|&i| outputs[i].clone()).collect();
        let mut heads = Vec::new();
        let mut levels = Vec::new();
        for (v, head) in self.heads.iter().enumerate() {
            let (raw, cache) = head.forward(&maps[v]);
            if keep_cache {
                heads.push(cache);
            }
            levels.push(LevelPrediction::new(v, STRIDES[v], self.config.num_classes, raw));
        }
        Ok(ForwardPass {
            image_dims: (image.width, image.height),
            features: BackboneFeatures { maps },
            levels,
            cache: keep_cache.then_some(BackboneCache {
                convs,
                norms,
                outputs,
                heads,
            }),
        })
    }

    /// Accumulates parameter gradients for one forward pass.
    pub fn backward(&mut self, pass: &ForwardPass<T>, grads: &PassGradients<T>) -> Result<()> {
        let cache = pass
            .cache
            .as_ref()
            .ok_or_else(|| Error::argument("backward requires a forward pass with cache"))?;
        let slope = T::lit(self.config.leaky_slope);
        let mut map_grads: Vec<FeatureMap<T>> = grads.maps.clone();
        for (v, head) in self.heads.iter_mut().enumerate() {
            let g = head.backward(&cache.heads[v], &grads.levels[v]);
            map_grads[v].add_assign(&g);
        }
        let mut g: Option<FeatureMap<T>> = None;
        for i in (0..self.backbone.len()).rev() {
            let mut gi = g.take().unwrap_or_else(|| FeatureMap::zeros_like(&cache.outputs[i]));
            if let Some(v) = LEVEL_LAYERS.iter().position(|&l| l == i) {
                gi.add_assign(&map_grads[v]);
            }
            leaky_relu_backward(&cache.outputs[i].data, &mut gi.data, slope);
            if let Some(norm) = self.norms.get_mut(i) {
                gi = norm.backward(&cache.norms[i], &gi);
            }
            g = Some(self.backbone[i].backward(&cache.convs[i], &gi));
        }
        Ok(())
    }

    /// Bilinear-pools the two early maps over `bbox` (image pixels) and
    /// concatenates them along channels.
    pub fn pool_region_features(
        &self,
        features: &BackboneFeatures<T>,
        bbox: &BoundingBox<T>,
        image_dims: (usize, usize),
    ) -> Result<FeatureMap<T>> {
        pool_region_features(
            features,
            bbox,
            image_dims,
            (self.config.pooled_height, self.config.pooled_width),
        )
    }

    /// Attribute logits for a pooled block; dropout only with an RNG.
    pub fn attri_logits(
        &self,
        block: &FeatureMap<T>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<([T; NUM_ATTRIBUTES], AttriCache<T>)> {
        self.attri.forward_logits(block, rng)
    }

    pub fn attri_forward(&self, block: &FeatureMap<T>) -> Result<[T; NUM_ATTRIBUTES]> {
        self.attri.forward(block)
    }

    /// Attribute probabilities for a box in image pixels.
    pub fn predict_attributes(
        &self,
        features: &BackboneFeatures<T>,
        bbox: &BoundingBox<T>,
        image_dims: (usize, usize),
    ) -> Result<[T; NUM_ATTRIBUTES]> {
        let block = self.pool_region_features(features, bbox, image_dims)?;
        self.attri_forward(&block)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        Checkpoint::from_module(meta, self)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: DetectorConfig =
            serde_json::from_str(&ckpt.meta).map_err(|e| Error::argument(format!("checkpoint model config: {e}")))?;
        let mut model = Self::new(config, 0)?;
        ckpt.load_into(&mut model)?;
        Ok(model)
    }

    /// Sets every parameter to zero.
    pub fn zero_weights(&mut self) {
        self.visit_params_mut(&mut |p| p.value.iter_mut().for_each(|v| *v = T::zero()));
    }
}

impl<T: Scalar> Module<T> for Detector<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.backbone.iter().for_each(|c| c.visit_params(f));
        self.norms.iter().for_each(|n| n.visit_params(f));
        self.heads.iter().for_each(|c| c.visit_params(f));
        self.attri.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.backbone.iter_mut().for_each(|c| c.visit_params_mut(f));
        self.norms.iter_mut().for_each(|n| n.visit_params_mut(f));
        self.heads.iter_mut().for_each(|c| c.visit_params_mut(f));
        self.attri.visit_params_mut(f);
    }
}

fn pooling_rois<T: Scalar>(
    features: &BackboneFeatures<T>,
    bbox: &BoundingBox<T>,
    image_dims: (usize, usize),
) -> Result<[BoundingBox<T>; 2]> {
    let img = (T::lit(image_dims.0 as f64), T::lit(image_dims.1 as f64));
    let roi = |m: &FeatureMap<T>| normalize_bbox(bbox, img, (T::lit(m.width as f64), T::lit(m.height as f64)));
    Ok([roi(features.s1())?, roi(features.s2())?])
}

/// Region pooling over the stride-8 and stride-16 maps, fused by channel
/// concatenation into a `(C1 + C2) × out_h × out_w` block.
pub fn pool_region_features<T: Scalar>(
    features: &BackboneFeatures<T>,
    bbox: &BoundingBox<T>,
    image_dims: (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Result<FeatureMap<T>> {
    let rois = pooling_rois(features, bbox, image_dims)?;
    let a = roi_align(features.s1(), &rois[0], out_h, out_w);
    let b = roi_align(features.s2(), &rois[1], out_h, out_w);
    Ok(FeatureMap::concat_channels(&[&a, &b]))
}

/// Backward of [`pool_region_features`]: adds into `map_grads[0..2]`.
pub fn pool_region_features_backward<T: Scalar>(
    features: &BackboneFeatures<T>,
    bbox: &BoundingBox<T>,
    image_dims: (usize, usize),
    grad_block: &FeatureMap<T>,
    map_grads: &mut [FeatureMap<T>],
) -> Result<()> {
    let rois = pooling_rois(features, bbox, image_dims)?;
    let parts = grad_block.split_channels(&[features.s1().channels, features.s2().channels]);
    roi_align_backward(&mut map_grads[0], &rois[0], &parts[0]);
    roi_align_backward(&mut map_grads[1], &rois[1], &parts[1]);
    Ok(())
}

/// Converts 8-bit RGB pixels into a `3 × h × w` map scaled to `[-1, 1]`.
pub fn image_to_map<T: Scalar>(rgb: &[u8], width: usize, height: usize) -> FeatureMap<T> {
    let plane = width * height;
    let mut data = vec![T::zero(); 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = T::lit(rgb[3 * i + c] as f64 / 127.5 - 1.0);
        }
    }
    FeatureMap::from_vec(3, height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> DetectorConfig {
        DetectorConfig {
            num_classes: 3,
            backbone_widths: [4, 4, 4, 6, 6],
            attri_conv_channels: [4, 4, 4],
            attri_fc_units: [16, 8, 6],
            pooled_height: 8,
            pooled_width: 8,
            norm_groups: 2,
            ..DetectorConfig::default()
        }
    }

    fn random_image(seed: u64, w: usize, h: usize) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_vec(3, h, w, (0..3 * w * h).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn output_dimensions_follow_the_strides() {
        let model = Detector::<f64>::new(small(), 1).unwrap();
        let pass = model.forward(&random_image(0, 64, 96), false).unwrap();
        for (v, lp) in pass.levels.iter().enumerate() {
            assert_eq!((lp.grid_w(), lp.grid_h()), Detector::<f64>::level_dims(64, 96)[v]);
            assert_eq!(lp.raw.channels, CLASS_OFFSET + 3);
            assert_eq!(lp.stride, STRIDES[v]);
        }
        assert_eq!((pass.features.s1().width, pass.features.s2().width), (8, 4));
    }

    #[test]
    fn same_seed_same_model() {
        let a = Detector::<f64>::new(small(), 7).unwrap();
        assert_eq!(a, Detector::<f64>::new(small(), 7).unwrap());
        assert_ne!(a, Detector::<f64>::new(small(), 8).unwrap());
    }

    #[test]
    fn objectness_prior_is_the_initial_output() {
        let mut model = Detector::<f64>::new(small(), 1).unwrap();
        let prior = model.heads[0].bias.value[OBJ_CHANNEL];
        model
            .heads
            .iter_mut()
            .for_each(|h| h.weight.value.iter_mut().for_each(|w| *w = 0.0));
        let pass = model.forward(&random_image(1, 32, 32), false).unwrap();
        assert!((pass.levels[1].objectness(0, 0) - 0.01).abs() < 1e-12);
        assert!((prior - (0.01f64 / 0.99).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_flat_outputs() {
        let mut model = Detector::<f64>::new(small(), 1).unwrap();
        model.zero_weights();
        let pass = model.forward(&random_image(2, 32, 32), false).unwrap();
        assert!(pass.levels.iter().all(|l| l.raw.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rejects_non_rgb_input() {
        let model = Detector::<f64>::new(small(), 1).unwrap();
        assert!(model.forward(&FeatureMap::zeros(1, 32, 32), false).is_err());
        let pass = model.forward(&random_image(0, 32, 32), false).unwrap();
        let mut m = model.clone();
        assert!(m.backward(&pass, &PassGradients::zeros_for(&pass)).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(DetectorConfig {
            num_classes: 0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(DetectorConfig {
            norm_groups: 3,
            ..small()
        }
        .validate()
        .is_err());
        assert!(DetectorConfig {
            dropout: 1.0,
            ..small()
        }
        .validate()
        .is_err());
    }

    /// Scalar objective `<levels, G> + <pooled block, H>` so that both the
    /// head path and the region-pooling path are exercised.
    fn objective(
        model: &Detector<f64>,
        img: &FeatureMap<f64>,
        g: &[FeatureMap<f64>],
        h: &FeatureMap<f64>,
        bbox: &BoundingBox<f64>,
    ) -> f64 {
        let pass = model.forward(img, false).unwrap();
        let mut s = 0.0;
        for (lp, gl) in pass.levels.iter().zip(g) {
            s += lp.raw.data.iter().zip(&gl.data).map(|(a, b)| a * b).sum::<f64>();
        }
        let block = model
            .pool_region_features(&pass.features, bbox, pass.image_dims)
            .unwrap();
        s + block.data.iter().zip(&h.data).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut model = Detector::<f64>::new(small(), 3).unwrap();
        let img = random_image(5, 32, 32);
        let bbox = BoundingBox {
            x: 5.0,
            y: 7.0,
            w: 14.0,
            h: 12.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pass = model.forward(&img, true).unwrap();
        let g: Vec<FeatureMap<f64>> = pass
            .levels
            .iter()
            .map(|l| {
                FeatureMap::from_vec(
                    l.raw.channels,
                    l.raw.height,
                    l.raw.width,
                    (0..l.raw.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let block = model
            .pool_region_features(&pass.features, &bbox, pass.image_dims)
            .unwrap();
        let h = FeatureMap::from_vec(
            block.channels,
            block.height,
            block.width,
            (0..block.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let mut grads = PassGradients::zeros_for(&pass);
        grads.levels = g.clone();
        pool_region_features_backward(&pass.features, &bbox, pass.image_dims, &h, &mut grads.maps).unwrap();
        model.backward(&pass, &grads).unwrap();

        // spot-check a handful of entries in every backbone, norm and head tensor
        let mut probes: Vec<(String, usize, f64)> = Vec::new();
        model.visit_params(&mut |p| {
            if p.name.starts_with("attri") {
                return;
            }
            for k in [0, p.len() / 2, p.len() - 1] {
                probes.push((p.name.clone(), k, p.grad[k]));
            }
        });
        let eps = 1e-5;
        for (name, k, analytic) in probes {
            let shift = |m: &mut Detector<f64>, d: f64| {
                m.visit_params_mut(&mut |p| {
                    if p.name == name {
                        p.value[k] += d;
                    }
                })
            };
            let mut plus = model.clone();
            shift(&mut plus, eps);
            let mut minus = model.clone();
            shift(&mut minus, -eps);
            let numeric =
                (objective(&plus, &img, &g, &h, &bbox) - objective(&minus, &img, &g, &h, &bbox)) / (2.0 * eps);
            assert!(
                (numeric - analytic).abs() <= 1e-4 * numeric.abs().max(1.0),
                "{name}[{k}]: numeric {numeric} analytic {analytic}"
            );
        }
    }

    #[test]
    fn image_scaling() {
        let m = image_to_map::<f64>(&[0, 255, 51, 255, 0, 0], 2, 1);
        assert_eq!(m.at(0, 0, 0), -1.0);
        assert_eq!(m.at(1, 0, 0), 1.0);
        assert!((m.at(2, 0, 0) - (51.0 / 127.5 - 1.0)).abs() < 1e-12);
        assert_eq!(m.at(0, 0, 1), 1.0);
    }
}
