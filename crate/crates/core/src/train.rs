//! Mini-batch SGD training for the three modes.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{boxes_in_region, AnnotatedRegion, Annotation, Dataset, ImageRecord};
use crate::corpus::image_io::{read_png, RgbImage};
use crate::detector::{
    decode_predictions, image_to_map, pool_region_features_backward, Detector, DetectorConfig, ForwardPass,
    PassGradients,
};
use crate::error::{Error, Result};
use crate::losses::{
    asymmetric_attribute_loss_logits, compute_area_min, filter_pseudo_labels, labeled_region_loss, pseudo_label_loss,
    similarity_candidates, total_loss, triplet_active, triplet_loss, AsymmetricLossParams, DetectionTerms, FeatureRef,
    LossParts, SparseTrainConfig, TrainMode,
};
use crate::nn::{FeatureMap, Module, Param};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr0: f64,
    /// Learning rate reached at the end of the cosine schedule.
    pub lr_final: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub warmup_momentum: f64,
    pub warmup_bias_lr: f64,
    /// Rescales the full gradient to at most this L2 norm; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            lr_final: 0.001,
            momentum: 0.937,
            nesterov: true,
            weight_decay: 0.0005,
            warmup_epochs: 3.0,
            warmup_momentum: 0.8,
            warmup_bias_lr: 0.1,
            grad_clip: 0.0,
        }
    }
}

/// Multipliers applied to each loss term before summation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossGains {
    pub obj: f64,
    pub cls: f64,
    pub bbox: f64,
    pub attributes: f64,
}

impl Default for LossGains {
    fn default() -> Self {
        Self {
            obj: 1.0,
            cls: 1.0,
            bbox: 1.0,
            attributes: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub batch_size: usize,
    /// Random horizontal flips.
    pub hflip: bool,
    /// IoU for suppressing duplicate predictions before pseudo-label gating.
    pub pseudo_nms_iou: f64,
    /// Cap on similarity candidates per image (highest confidence first).
    pub max_candidates: usize,
    pub optimizer: OptimizerConfig,
    pub gains: LossGains,
    /// Thresholds, weights and the epoch schedule (`epochs_total`).
    pub sparse: SparseTrainConfig,
    pub attributes: AsymmetricLossParams,
    pub model: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::SlaDet,
            seed: 0,
            batch_size: 4,
            hflip: true,
            pseudo_nms_iou: 0.5,
            max_candidates: 16,
            optimizer: OptimizerConfig::default(),
            gains: LossGains::default(),
            sparse: SparseTrainConfig::default(),
            attributes: AsymmetricLossParams::default(),
            model: DetectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.sparse.epochs_total
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.sparse.epochs_total == 0 {
            return Err(Error::config("sparse.epochs_total", "must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr0 > 0.0 && o.lr_final >= 0.0) {
            return Err(Error::config("optimizer.lr0", "learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(0.0..1.0).contains(&o.warmup_momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if o.weight_decay < 0.0 || o.warmup_epochs < 0.0 || o.grad_clip < 0.0 {
            return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.pseudo_nms_iou) {
            return Err(Error::config("train.pseudo_nms_iou", "must lie in [0, 1]"));
        }
        self.model.validate()?;
        self.sparse.validate(self.model.num_classes)?;
        self.attributes.validate()
    }
}

/// Learning rates and momentum for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub lr: f64,
    pub bias_lr: f64,
    pub momentum: f64,
}

/// Cosine rate for `epoch`, from `lr0` at epoch 0 to `lr_final` at the last.
pub fn cosine_lr(opt: &OptimizerConfig, epoch: usize, epochs: usize) -> f64 {
    let t = if epochs > 1 {
        epoch as f64 / (epochs - 1) as f64
    } else {
        1.0
    };
    opt.lr_final + (opt.lr0 - opt.lr_final) * 0.5 * (1.0 + (PI * t).cos())
}

/// Schedule at global iteration `iter` with linear warmup over the first
/// `warmup_epochs · batches_per_epoch` iterations.
pub fn step_schedule(
    opt: &OptimizerConfig,
    epoch: usize,
    epochs: usize,
    iter: usize,
    batches_per_epoch: usize,
) -> StepSchedule {
    let lr = cosine_lr(opt, epoch, epochs);
    let warmup = (opt.warmup_epochs * batches_per_epoch as f64).round();
    if (iter as f64) < warmup {
        let f = iter as f64 / warmup;
        StepSchedule {
            lr: lr * f,
            bias_lr: opt.warmup_bias_lr + (lr - opt.warmup_bias_lr) * f,
            momentum: opt.warmup_momentum + (opt.momentum - opt.warmup_momentum) * f,
        }
    } else {
        StepSchedule {
            lr,
            bias_lr: lr,
            momentum: opt.momentum,
        }
    }
}

/// SGD with (optionally Nesterov) momentum; decay only on flagged params.
pub fn sgd_step<T: Scalar>(p: &mut Param<T>, schedule: &StepSchedule, opt: &OptimizerConfig) {
    let lr = T::lit(if p.decay { schedule.lr } else { schedule.bias_lr });
    let m = T::lit(schedule.momentum);
    let wd = T::lit(if p.decay { opt.weight_decay } else { 0.0 });
    for i in 0..p.value.len() {
        let g = p.grad[i] + wd * p.value[i];
        let v = m * p.velocity[i] + g;
        p.velocity[i] = v;
        let update = if opt.nesterov { g + m * v } else { v };
        p.value[i] = p.value[i] - lr * update;
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar, M: Module<T> + ?Sized>(model: &mut M, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit_params(&mut |p| sq += p.grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>());
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = T::lit(max_norm / norm);
        model.visit_params_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g = *g * k));
    }
    norm
}

/// One row per image visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub image_id: String,
    pub total: f64,
    pub obj: f64,
    pub cls: f64,
    pub bbox: f64,
    pub detection: f64,
    pub pseudo: f64,
    pub triplet: f64,
    pub attributes: f64,
    pub n_pseudo: usize,
    pub n_candidates: usize,
    pub lr: f64,
}

/// Per-epoch means over images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub detection: f64,
    pub pseudo: f64,
    pub triplet: f64,
    pub attributes: f64,
    pub n_pseudo: usize,
    pub n_candidates: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Detector<T>,
    pub trace: LossTrace,
    /// The configuration actually used (class count taken from the data).
    pub config: TrainConfig,
}

/// Decoded images of a dataset, in record order.
pub fn load_images(dataset: &Dataset) -> Result<Vec<RgbImage>> {
    dataset
        .records
        .iter()
        .map(|r| {
            let img = read_png(&dataset.image_path(r))?;
            if (img.width, img.height) != (r.width, r.height) {
                return Err(Error::validation(
                    r.image_id.clone(),
                    "width/height",
                    format!(
                        "manifest says {}x{}, file is {}x{}",
                        r.width, r.height, img.width, img.height
                    ),
                ));
            }
            Ok(img)
        })
        .collect()
}

/// One augmented training view.
struct View {
    map_index: usize,
    annotations: Vec<Annotation>,
    region: AnnotatedRegion,
}

fn make_view(record: &ImageRecord, index: usize, flip: bool) -> View {
    let region = record.effective_region();
    if !flip {
        return View {
            map_index: index,
            annotations: record.annotations.clone(),
            region,
        };
    }
    let w = record.width as f64;
    View {
        map_index: index,
        annotations: record
            .annotations
            .iter()
            .map(|a| Annotation {
                bbox: a.bbox.flip_horizontal(w),
                ..a.clone()
            })
            .collect(),
        region: AnnotatedRegion {
            rect: region.rect.flip_horizontal(w),
        },
    }
}

struct ImageState<T> {
    pass: ForwardPass<T>,
    grads: PassGradients<T>,
    view: View,
    parts: LossParts<T>,
    terms: DetectionTerms<T>,
    n_pseudo: usize,
    candidates: Vec<(usize, crate::annotation::BoundingBox<T>)>,
}

/// Trains a fresh detector on `dataset`.
pub fn train<T: Scalar>(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    let images = load_images(dataset)?;
    train_with_images(dataset, &images, config)
}

/// As [`train`], with images already decoded (index-aligned with records).
pub fn train_with_images<T: Scalar>(
    dataset: &Dataset,
    images: &[RgbImage],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let mut config = config.clone();
    config.model.num_classes = dataset.num_classes();
    config.sparse.fit_to_classes(dataset.num_classes());
    config.validate()?;
    if dataset.records.is_empty() {
        return Err(Error::config("train.dataset", "training set is empty"));
    }
    if config.mode.is_sparse() && !dataset.has_sparse_regions() {
        return Err(Error::config(
            "train.mode",
            format!(
                "mode {} requires annotated regions, but the dataset has none",
                config.mode
            ),
        ));
    }
    let area_min = match config.sparse.area_min {
        Some(a) => a,
        None if config.mode.is_sparse() => compute_area_min(dataset)?,
        None => 0.0,
    };

    let mut model = Detector::<T>::new(config.model.clone(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0000_0000_0001);
    let epochs = config.epochs();
    let n = dataset.records.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let mut trace = LossTrace::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut iter = 0usize;

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = EpochRecord {
            epoch,
            lr: 0.0,
            total: 0.0,
            detection: 0.0,
            pseudo: 0.0,
            triplet: 0.0,
            attributes: 0.0,
            n_pseudo: 0,
            n_candidates: 0,
        };
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let schedule = step_schedule(&config.optimizer, epoch, epochs, iter, batches_per_epoch);
            model.zero_grad();
            let rows = train_batch(&mut model, dataset, images, chunk, &config, area_min, epoch, &mut rng)?;
            clip_gradients(&mut model, config.optimizer.grad_clip);
            model.visit_params_mut(&mut |p| sgd_step(p, &schedule, &config.optimizer));
            for mut row in rows {
                row.batch = b;
                row.lr = schedule.lr;
                epoch_sum.total += row.total;
                epoch_sum.detection += row.detection;
                epoch_sum.pseudo += row.pseudo;
                epoch_sum.triplet += row.triplet;
                epoch_sum.attributes += row.attributes;
                epoch_sum.n_pseudo += row.n_pseudo;
                epoch_sum.n_candidates += row.n_candidates;
                trace.steps.push(row);
            }
            epoch_sum.lr = schedule.lr;
            iter += 1;
        }
        let inv = 1.0 / n as f64;
        epoch_sum.total *= inv;
        epoch_sum.detection *= inv;
        epoch_sum.pseudo *= inv;
        epoch_sum.triplet *= inv;
        epoch_sum.attributes *= inv;
        log::info!(
            "epoch {epoch}: total {:.4} det {:.4} pl {:.4} tri {:.4} mor {:.4} pseudo {} cand {}",
            epoch_sum.total,
            epoch_sum.detection,
            epoch_sum.pseudo,
            epoch_sum.triplet,
            epoch_sum.attributes,
            epoch_sum.n_pseudo,
            epoch_sum.n_candidates
        );
        trace.epochs.push(epoch_sum);
    }
    Ok(TrainOutcome { model, trace, config })
}

#[allow(clippy::too_many_arguments)]
fn train_batch<T: Scalar>(
    model: &mut Detector<T>,
    dataset: &Dataset,
    images: &[RgbImage],
    chunk: &[usize],
    config: &TrainConfig,
    area_min: f64,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StepRecord>> {
    let mode = config.mode;
    let inv_b = T::lit(1.0 / chunk.len() as f64);
    let g = &config.gains;
    let det_weights = DetectionTerms {
        obj: T::lit(g.obj) * inv_b,
        cls: T::lit(g.cls) * inv_b,
        bbox: T::lit(g.bbox) * inv_b,
    };
    let use_pl = mode.is_sparse() && config.sparse.w_pl > 0.0;
    let use_tri = mode.is_sparse() && config.sparse.w_tri > 0.0 && triplet_active(&config.sparse, epoch);

    let mut states: Vec<ImageState<T>> = Vec::with_capacity(chunk.len());
    for &i in chunk {
        let record = &dataset.records[i];
        let flip = config.hflip && rng.random_bool(0.5);
        let view = make_view(record, i, flip);
        let img = if flip {
            images[i].flip_horizontal()
        } else {
            images[i].clone()
        };
        let map = image_to_map::<T>(&img.pixels, img.width as usize, img.height as usize);
        let pass = model.forward(&map, true)?;
        let mut grads = PassGradients::zeros_for(&pass);
        let dims = pass.image_dims;

        let terms = labeled_region_loss(
            &pass.levels,
            &view.annotations,
            &view.region,
            dims,
            Some((&mut grads.levels, det_weights)),
        )
        .map_err(|e| match e {
            Error::Validation { field, message, .. } => Error::Validation {
                record: record.image_id.clone(),
                field,
                message,
            },
            other => other,
        })?;
        let mut parts = LossParts {
            detection: T::lit(g.obj) * terms.obj + T::lit(g.cls) * terms.cls + T::lit(g.bbox) * terms.bbox,
            ..Default::default()
        };
        let mut n_pseudo = 0;
        let mut candidates = Vec::new();
        if use_pl || use_tri {
            let dets = decode_predictions(&pass.levels, T::lit(config.sparse.t0), T::lit(config.pseudo_nms_iou));
            let (_, outside) = boxes_in_region(&dets, &view.region);
            if use_pl {
                let pseudo = filter_pseudo_labels(&outside, &config.sparse, area_min, dims);
                n_pseudo = pseudo.len();
                let w = config.sparse.w_pl;
                let pw = DetectionTerms {
                    obj: T::lit(g.obj * w) * inv_b,
                    cls: T::lit(g.cls * w) * inv_b,
                    bbox: T::lit(g.bbox * w) * inv_b,
                };
                let pt = pseudo_label_loss(&pass.levels, &pseudo, Some((&mut grads.levels, pw)));
                parts.pseudo = T::lit(g.obj) * pt.obj + T::lit(g.cls) * pt.cls + T::lit(g.bbox) * pt.bbox;
            }
            if use_tri {
                candidates = similarity_candidates(&outside, &config.sparse)
                    .into_iter()
                    .take(config.max_candidates)
                    .map(|d| (d.class, d.bbox))
                    .collect();
            }
        }
        states.push(ImageState {
            pass,
            grads,
            view,
            parts,
            terms,
            n_pseudo,
            candidates,
        });
    }

    if use_tri {
        batch_triplet(model, &mut states, config, inv_b)?;
    }
    if mode.uses_attributes() {
        let scale = T::lit(g.attributes) * inv_b;
        for st in states.iter_mut() {
            let n_gt = st.view.annotations.len();
            if n_gt == 0 {
                continue;
            }
            let per = T::one() / T::lit(n_gt as f64);
            let mut sum = T::zero();
            for a in &st.view.annotations {
                let bbox = a.bbox.cast::<T>();
                let block = model.pool_region_features(&st.pass.features, &bbox, st.pass.image_dims)?;
                let (logits, cache) = model.attri_logits(&block, Some(rng as &mut dyn RngCore))?;
                let (l, gl) = asymmetric_attribute_loss_logits(&logits, &a.attributes.as_targets(), &config.attributes);
                sum = sum + l;
                let gl = gl.map(|v| v * per * scale);
                let gblock = model.attri.backward(&cache, &gl);
                pool_region_features_backward(
                    &st.pass.features,
                    &bbox,
                    st.pass.image_dims,
                    &gblock,
                    &mut st.grads.maps,
                )?;
            }
            st.parts.attributes = T::lit(g.attributes) * sum * per;
        }
    }

    let mut rows = Vec::with_capacity(states.len());
    for st in &states {
        model.backward(&st.pass, &st.grads)?;
        let record = &dataset.records[st.view.map_index];
        rows.push(StepRecord {
            epoch,
            batch: 0,
            image_id: record.image_id.clone(),
            total: total_loss(mode, &st.parts, &config.sparse, epoch).as_f64(),
            obj: st.terms.obj.as_f64(),
            cls: st.terms.cls.as_f64(),
            bbox: st.terms.bbox.as_f64(),
            detection: st.parts.detection.as_f64(),
            pseudo: st.parts.pseudo.as_f64(),
            triplet: st.parts.triplet.as_f64(),
            attributes: st.parts.attributes.as_f64(),
            n_pseudo: st.n_pseudo,
            n_candidates: st.candidates.len(),
            lr: 0.0,
        });
    }
    Ok(rows)
}

/// Triplet term for each image's candidates against every ground-truth box
/// of the batch; gradients flow into both sides through region pooling.
fn batch_triplet<T: Scalar>(
    model: &Detector<T>,
    states: &mut [ImageState<T>],
    config: &TrainConfig,
    inv_b: T,
) -> Result<()> {
    if states.iter().all(|s| s.candidates.is_empty()) {
        return Ok(());
    }
    // (state index, box, class, flattened feature)
    let mut refs = Vec::new();
    for (si, st) in states.iter().enumerate() {
        for a in &st.view.annotations {
            let bbox = a.bbox.cast::<T>();
            let block = model.pool_region_features(&st.pass.features, &bbox, st.pass.image_dims)?;
            refs.push((si, bbox, a.cell_class, block));
        }
    }
    if refs.is_empty() {
        return Ok(());
    }
    let weight = T::lit(config.sparse.w_tri) * inv_b;
    let margin = T::lit(config.sparse.margin);
    for si in 0..states.len() {
        if states[si].candidates.is_empty() {
            continue;
        }
        let blocks: Vec<FeatureMap<T>> = states[si]
            .candidates
            .iter()
            .map(|(_, b)| model.pool_region_features(&states[si].pass.features, b, states[si].pass.image_dims))
            .collect::<Result<_>>()?;
        let cands: Vec<FeatureRef<'_, T>> = blocks
            .iter()
            .zip(&states[si].candidates)
            .map(|(b, (c, _))| FeatureRef {
                feature: &b.data,
                class: *c,
            })
            .collect();
        let references: Vec<FeatureRef<'_, T>> = refs
            .iter()
            .map(|(_, _, c, b)| FeatureRef {
                feature: &b.data,
                class: *c,
            })
            .collect();
        let out = triplet_loss(&cands, &references, margin, config.sparse.triplet_formula);
        states[si].parts.triplet = out.loss;
        if out.scored == 0 {
            continue;
        }
        for (k, gc) in out.grad_candidates.iter().enumerate() {
            let block = &blocks[k];
            let g = FeatureMap::from_vec(
                block.channels,
                block.height,
                block.width,
                gc.iter().map(|&v| v * weight).collect(),
            );
            let st = &mut states[si];
            let bbox = st.candidates[k].1;
            pool_region_features_backward(&st.pass.features, &bbox, st.pass.image_dims, &g, &mut st.grads.maps)?;
        }
        for (j, gr) in out.grad_references.iter().enumerate() {
            if gr.iter().all(|v| *v == T::zero()) {
                continue;
            }
            let (owner, bbox, _, block) = &refs[j];
            let g = FeatureMap::from_vec(
                block.channels,
                block.height,
                block.width,
                gr.iter().map(|&v| v * weight).collect(),
            );
            let st = &mut states[*owner];
            pool_region_features_backward(&st.pass.features, bbox, st.pass.image_dims, &g, &mut st.grads.maps)?;
        }
    }
    Ok(())
}
