//! Deterministic synthetic corpora: rendered "cells" with class and
//! attribute ground truth, and sparsification of training images down to one
//! annotated rectangle.

pub mod image_io;
pub mod render;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{
    save_dataset, AnnotatedRegion, Annotation, Attribute, AttributeVector, BoundingBox, Dataset, ImageRecord,
    NUM_ATTRIBUTES,
};
use crate::error::{Error, Result};
use image_io::{write_png, RgbImage};
use render::{paint_background, paint_cell, paint_distractor, CellSpec, Disc};

pub const TRAIN_MANIFEST: &str = "train.json";
pub const TEST_MANIFEST: &str = "test.json";

/// Visible trait drawn when an attribute flag is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeRule {
    DarkChromatin,
    LobedNucleus,
    LargeNucleus,
    Outline,
    DarkCytoplasm,
    Vacuoles,
    /// Flag is sampled but not drawn.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub width: u32,
    pub height: u32,
    pub n_classes: usize,
    pub cells_min: usize,
    pub cells_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub region_fraction: f64,
    /// Rendering rule per attribute, in attribute order.
    pub attribute_generators: [AttributeRule; NUM_ATTRIBUTES],
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 200,
            n_test: 40,
            width: 640,
            height: 512,
            n_classes: 6,
            cells_min: 6,
            cells_max: 10,
            radius_min: 20.0,
            radius_max: 28.0,
            distractors_min: 8,
            distractors_max: 16,
            region_fraction: 0.2,
            attribute_generators: [
                AttributeRule::DarkChromatin,
                AttributeRule::LobedNucleus,
                AttributeRule::LargeNucleus,
                AttributeRule::Outline,
                AttributeRule::DarkCytoplasm,
                AttributeRule::Vacuoles,
            ],
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.region_fraction > 0.0 && self.region_fraction <= 1.0) {
            return Err(Error::config(
                "corpus.region_fraction",
                format!("must lie in (0, 1], got {}", self.region_fraction),
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::config("corpus.n_classes", "at least two classes are required"));
        }
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(32) || !self.height.is_multiple_of(32) {
            return Err(Error::config(
                "corpus.width/height",
                "image dims must be positive multiples of 32",
            ));
        }
        if self.cells_min > self.cells_max {
            return Err(Error::config("corpus.cells_min", "exceeds cells_max"));
        }
        if self.distractors_min > self.distractors_max {
            return Err(Error::config("corpus.distractors_min", "exceeds distractors_max"));
        }
        if !(self.radius_min >= 4.0 && self.radius_min <= self.radius_max) {
            return Err(Error::config("corpus.radius_min", "need 4 <= radius_min <= radius_max"));
        }
        if 2.0 * self.radius_max + 4.0 > self.width.min(self.height) as f64 {
            return Err(Error::config("corpus.radius_max", "cells do not fit in the image"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(|c| format!("class_{c}")).collect()
    }
}

/// Independent stream per `(seed, purpose, index)` so images can be rendered
/// in any order.
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ purpose) ^ index)
}

const PURPOSE_TRAIN: u64 = 1;
const PURPOSE_TEST: u64 = 2;
const PURPOSE_REGION: u64 = 3;

/// Uniformly placed rectangle of area `fraction · W · H`, aspect in [0.5, 2].
pub fn sample_region<R: Rng + ?Sized>(width: u32, height: u32, fraction: f64, rng: &mut R) -> AnnotatedRegion {
    let (w_img, h_img) = (width as f64, height as f64);
    // draw even when unused so the stream position does not depend on fraction
    let log_aspect: f64 = rng.random_range(-(2f64.ln())..=2f64.ln());
    let ux: f64 = rng.random();
    let uy: f64 = rng.random();
    if fraction >= 1.0 {
        return AnnotatedRegion::full(width, height);
    }
    let area = fraction * w_img * h_img;
    let aspect = log_aspect.exp();
    let mut w = (area * aspect).sqrt();
    let mut h = (area / aspect).sqrt();
    if w > w_img {
        w = w_img;
        h = area / w;
    }
    if h > h_img {
        h = h_img;
        w = area / h;
    }
    AnnotatedRegion {
        rect: BoundingBox {
            x: ux * (w_img - w),
            y: uy * (h_img - h),
            w,
            h,
        },
    }
}

/// Keeps, per image, only the annotations centered inside one sampled
/// region. The input is left untouched.
pub fn sparsify(dataset: &Dataset, region_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(region_fraction > 0.0 && region_fraction <= 1.0) {
        return Err(Error::argument(format!(
            "region fraction {region_fraction} outside (0, 1]"
        )));
    }
    let mut out = dataset.clone();
    for (i, record) in out.records.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PURPOSE_REGION, i as u64));
        let region = sample_region(record.width, record.height, region_fraction, &mut rng);
        record.annotations.retain(|a| region.contains_center(&a.bbox));
        record.region = Some(region);
    }
    Ok(out)
}

fn place_cells(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<CellSpec> {
    let n = rng.random_range(spec.cells_min..=spec.cells_max);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut cells: Vec<CellSpec> = Vec::with_capacity(n);
    let mut attempts = 0;
    while cells.len() < n && attempts < 400 {
        attempts += 1;
        let r = rng.random_range(spec.radius_min..=spec.radius_max);
        let rx = r * rng.random_range(0.9..=1.1);
        let ry = r * rng.random_range(0.9..=1.1);
        let cx = rng.random_range(rx + 1.0..=w - rx - 1.0);
        let cy = rng.random_range(ry + 1.0..=h - ry - 1.0);
        let class = rng.random_range(0..spec.n_classes);
        let mut attributes = [false; NUM_ATTRIBUTES];
        attributes.iter_mut().for_each(|a| *a = rng.random_bool(0.5));
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let clear = cells.iter().all(|c| {
            let d = ((c.cx - cx).powi(2) + (c.cy - cy).powi(2)).sqrt();
            d >= c.rx.max(c.ry) + rx.max(ry) + 2.0
        });
        if clear {
            cells.push(CellSpec {
                cx,
                cy,
                rx,
                ry,
                class,
                attributes,
                phase,
            });
        }
    }
    cells
}

/// Renders one image and returns it with its complete annotation list.
pub fn render_image(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> (RgbImage, Vec<Annotation>) {
    let mut img = RgbImage::new(spec.width, spec.height);
    paint_background(&mut img, rng);
    let n_discs = rng.random_range(spec.distractors_min..=spec.distractors_max);
    for _ in 0..n_discs {
        let r = rng.random_range(0.5 * spec.radius_min..=0.8 * spec.radius_min);
        let disc = Disc {
            cx: rng.random_range(0.0..spec.width as f64),
            cy: rng.random_range(0.0..spec.height as f64),
            r,
        };
        paint_distractor(&mut img, &disc);
    }
    let cells = place_cells(spec, rng);
    let mut annotations = Vec::with_capacity(cells.len());
    for cell in &cells {
        paint_cell(&mut img, cell, spec.n_classes, &spec.attribute_generators);
        annotations.push(Annotation {
            bbox: BoundingBox {
                x: cell.cx - cell.rx,
                y: cell.cy - cell.ry,
                w: 2.0 * cell.rx,
                h: 2.0 * cell.ry,
            },
            cell_class: cell.class,
            attributes: AttributeVector(cell.attributes),
        });
    }
    (img, annotations)
}

fn render_split(spec: &CorpusSpec, out_dir: &Path, split: &str, purpose: u64, count: usize) -> Result<Dataset> {
    let image_dir = out_dir.join(split);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, purpose, i as u64));
        let (img, annotations) = render_image(spec, &mut rng);
        let image_id = format!("{split}_{i:04}");
        let file = format!("{split}/{image_id}.png");
        write_png(&out_dir.join(&file), &img)?;
        records.push(ImageRecord {
            image_id,
            file,
            width: spec.width,
            height: spec.height,
            region: None,
            annotations,
        });
    }
    Ok(Dataset {
        classes: spec.class_names(),
        attributes: Attribute::ALL.iter().map(|a| a.name().to_string()).collect(),
        records,
        root: out_dir.to_path_buf(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub train: Dataset,
    pub test: Dataset,
}

/// Renders the train and test splits under `out_dir`. Training images are
/// sparsified to a single region; test images stay fully annotated.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: impl AsRef<Path>) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let full_train = render_split(spec, out_dir, "train", PURPOSE_TRAIN, spec.n_train)?;
    let train = sparsify(&full_train, spec.region_fraction, spec.seed)?;
    let test = render_split(spec, out_dir, "test", PURPOSE_TEST, spec.n_test)?;
    let train_manifest = out_dir.join(TRAIN_MANIFEST);
    let test_manifest = out_dir.join(TEST_MANIFEST);
    save_dataset(&train, &train_manifest)?;
    save_dataset(&test, &test_manifest)?;
    Ok(GeneratedCorpus {
        train_manifest,
        test_manifest,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn derived_streams_differ() {
        let seeds: std::collections::HashSet<u64> = (0..3)
            .flat_map(|p| (0..50).map(move |i| derive_seed(7, p, i)))
            .collect();
        assert_eq!(seeds.len(), 150);
        assert_eq!(derive_seed(7, 1, 3), derive_seed(7, 1, 3));
    }

    #[test]
    fn spec_validation() {
        assert!(CorpusSpec::default().validate().is_ok());
        assert!(CorpusSpec {
            region_fraction: 1.5,
            ..CorpusSpec::default()
        }
        .validate()
        .is_err());
        assert!(CorpusSpec {
            region_fraction: 0.0,
            ..CorpusSpec::default()
        }
        .validate()
        .is_err());
        assert!(CorpusSpec {
            width: 100,
            ..CorpusSpec::default()
        }
        .validate()
        .is_err());
        assert!(CorpusSpec {
            cells_min: 11,
            ..CorpusSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn rendered_cells_fit_and_do_not_overlap() {
        let spec = CorpusSpec {
            width: 320,
            height: 256,
            radius_min: 18.0,
            radius_max: 26.0,
            cells_min: 3,
            cells_max: 6,
            ..CorpusSpec::default()
        };
        for i in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let (img, anns) = render_image(&spec, &mut rng);
            assert_eq!((img.width, img.height), (320, 256));
            assert!(!anns.is_empty());
            for (k, a) in anns.iter().enumerate() {
                assert!(a.bbox.x >= 0.0 && a.bbox.y >= 0.0 && a.bbox.right() <= 320.0 && a.bbox.bottom() <= 256.0);
                assert!(a.cell_class < spec.n_classes);
                for b in &anns[k + 1..] {
                    // discs are separated even when their boxes touch at the corners
                    let (ax, ay) = a.bbox.center();
                    let (bx, by) = b.bbox.center();
                    let reach = a.bbox.w.max(a.bbox.h) / 2.0 + b.bbox.w.max(b.bbox.h) / 2.0;
                    assert!(((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() >= reach + 2.0 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn sparsify_keeps_centered_annotations_only() {
        let spec = CorpusSpec {
            width: 320,
            height: 256,
            radius_min: 18.0,
            radius_max: 26.0,
            ..CorpusSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let records = (0..20)
            .map(|i| {
                let (_, annotations) = render_image(&spec, &mut rng);
                ImageRecord {
                    image_id: format!("i{i}"),
                    file: String::new(),
                    width: 320,
                    height: 256,
                    region: None,
                    annotations,
                }
            })
            .collect();
        let full = Dataset {
            classes: spec.class_names(),
            attributes: vec![],
            records,
            root: PathBuf::new(),
        };
        let sparse = sparsify(&full, 0.2, 3).unwrap();
        for (f, s) in full.records.iter().zip(&sparse.records) {
            let region = s.region.unwrap();
            let expected: Vec<&Annotation> = f
                .annotations
                .iter()
                .filter(|a| region.contains_center(&a.bbox))
                .collect();
            assert_eq!(s.annotations.iter().collect::<Vec<_>>(), expected);
        }
        assert!(full.records.iter().all(|r| r.region.is_none()));
        assert!(sparsify(&full, 1.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn regions_have_the_requested_area(fraction in 0.05f64..1.0, seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = sample_region(640, 512, fraction, &mut rng).rect;
            prop_assert!((r.w * r.h / (640.0 * 512.0) - fraction).abs() < 1e-9);
            prop_assert!(r.x >= 0.0 && r.y >= 0.0 && r.right() <= 640.0 + 1e-9 && r.bottom() <= 512.0 + 1e-9);
        }
    }
}
