//! Dataset and prediction data model: boxes, attribute vectors, annotated
//! regions, the JSON manifest, and the geometric helpers shared by the
//! detector and the losses.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SCHEMA_VERSION: u32 = 1;
pub const NUM_ATTRIBUTES: usize = 6;

/// Morphological attributes in manifest order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Attribute {
    NuclearChromatin,
    NuclearShape,
    Nucleus,
    Cytoplasm,
    CytoplasmicBasophilia,
    CytoplasmicVacuoles,
}

impl Attribute {
    pub const ALL: [Attribute; NUM_ATTRIBUTES] = [
        Attribute::NuclearChromatin,
        Attribute::NuclearShape,
        Attribute::Nucleus,
        Attribute::Cytoplasm,
        Attribute::CytoplasmicBasophilia,
        Attribute::CytoplasmicVacuoles,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::NuclearChromatin => "NuclearChromatin",
            Attribute::NuclearShape => "NuclearShape",
            Attribute::Nucleus => "Nucleus",
            Attribute::Cytoplasm => "Cytoplasm",
            Attribute::CytoplasmicBasophilia => "CytoplasmicBasophilia",
            Attribute::CytoplasmicVacuoles => "CytoplasmicVacuoles",
        }
    }

    pub fn abbreviation(self) -> &'static str {
        match self {
            Attribute::NuclearChromatin => "NC",
            Attribute::NuclearShape => "NS",
            Attribute::Nucleus => "N",
            Attribute::Cytoplasm => "C",
            Attribute::CytoplasmicBasophilia => "CB",
            Attribute::CytoplasmicVacuoles => "CV",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Axis-aligned box in corner form: `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<T = f64> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BoundingBox<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Result<Self> {
        if !(w > T::zero() && h > T::zero()) {
            return Err(Error::argument(format!(
                "box width and height must be positive, got {w} x {h}"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Self {
        let half = T::lit(0.5);
        Self {
            x: cx - w * half,
            y: cy - h * half,
            w,
            h,
        }
    }

    pub fn center(&self) -> (T, T) {
        let half = T::lit(0.5);
        (self.x + self.w * half, self.y + self.h * half)
    }

    pub fn right(&self) -> T {
        self.x + self.w
    }

    pub fn bottom(&self) -> T {
        self.y + self.h
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    /// Closed-rectangle point test: points on the border are inside.
    pub fn contains_point(&self, px: T, py: T) -> bool {
        px >= self.x && px <= self.right() && py >= self.y && py <= self.bottom()
    }

    pub fn cast<U: Scalar>(&self) -> BoundingBox<U> {
        BoundingBox {
            x: U::lit(self.x.as_f64()),
            y: U::lit(self.y.as_f64()),
            w: U::lit(self.w.as_f64()),
            h: U::lit(self.h.as_f64()),
        }
    }

    /// Intersection with `[0, width] × [0, height]`; `None` when nothing is left.
    /// A box already inside is returned unchanged (no rounding).
    pub fn clamp_to(&self, width: T, height: T) -> Option<Self> {
        if self.x >= T::zero()
            && self.y >= T::zero()
            && self.right() <= width
            && self.bottom() <= height
            && self.w > T::zero()
            && self.h > T::zero()
        {
            return Some(*self);
        }
        let x0 = self.x.max(T::zero());
        let y0 = self.y.max(T::zero());
        let x1 = self.right().min(width);
        let y1 = self.bottom().min(height);
        if x1 > x0 && y1 > y0 {
            Some(Self {
                x: x0,
                y: y0,
                w: x1 - x0,
                h: y1 - y0,
            })
        } else {
            None
        }
    }

    pub fn flip_horizontal(&self, width: T) -> Self {
        Self {
            x: width - self.right(),
            ..*self
        }
    }
}

pub fn iou<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(T::zero());
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > T::zero() {
        inter / union
    } else {
        T::zero()
    }
}

/// Ground-truth attribute flags in [`Attribute::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct AttributeVector(pub [bool; NUM_ATTRIBUTES]);

impl AttributeVector {
    pub fn get(&self, attribute: Attribute) -> bool {
        self.0[attribute.index()]
    }

    pub fn as_targets<T: Scalar>(&self) -> [T; NUM_ATTRIBUTES] {
        self.0.map(|b| if b { T::one() } else { T::zero() })
    }

    pub fn to_ints(&self) -> [u8; NUM_ATTRIBUTES] {
        self.0.map(u8::from)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub cell_class: usize,
    pub attributes: AttributeVector,
}

/// The single fully annotated rectangle of a training image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotatedRegion {
    pub rect: BoundingBox,
}

impl AnnotatedRegion {
    pub fn full(width: u32, height: u32) -> Self {
        Self {
            rect: BoundingBox {
                x: 0.0,
                y: 0.0,
                w: width as f64,
                h: height as f64,
            },
        }
    }

    pub fn contains_center<T: Scalar>(&self, bbox: &BoundingBox<T>) -> bool {
        let (cx, cy) = bbox.center();
        self.rect.contains_point(cx.as_f64(), cy.as_f64())
    }

    pub fn covers_image(&self, width: u32, height: u32) -> bool {
        self.rect.x <= 0.0
            && self.rect.y <= 0.0
            && self.rect.right() >= width as f64
            && self.rect.bottom() >= height as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    /// Pixel file, relative to the dataset root.
    pub file: String,
    pub width: u32,
    pub height: u32,
    /// `None` means the whole image is annotated.
    pub region: Option<AnnotatedRegion>,
    pub annotations: Vec<Annotation>,
}

impl ImageRecord {
    pub fn effective_region(&self) -> AnnotatedRegion {
        self.region
            .unwrap_or_else(|| AnnotatedRegion::full(self.width, self.height))
    }

    pub fn is_fully_annotated(&self) -> bool {
        self.region.is_none_or(|r| r.covers_image(self.width, self.height))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub attributes: Vec<String>,
    pub records: Vec<ImageRecord>,
    /// Directory the record file paths are relative to.
    pub root: PathBuf,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.file)
    }

    pub fn annotation_count(&self) -> usize {
        self.records.iter().map(|r| r.annotations.len()).sum()
    }

    pub fn has_sparse_regions(&self) -> bool {
        self.records.iter().any(|r| r.region.is_some())
    }
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    schema_version: u32,
    classes: Vec<String>,
    attributes: Vec<String>,
    images: Vec<ManifestImage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestImage {
    image_id: String,
    file: String,
    width: u32,
    height: u32,
    region: Option<ManifestRect>,
    annotations: Vec<ManifestAnnotation>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRect {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestAnnotation {
    #[serde(rename = "box")]
    bbox: ManifestRect,
    cell_class: usize,
    attributes: Vec<u8>,
}

impl From<BoundingBox> for ManifestRect {
    fn from(b: BoundingBox) -> Self {
        Self {
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
        }
    }
}

impl From<ManifestRect> for BoundingBox {
    fn from(r: ManifestRect) -> Self {
        Self {
            x: r.x,
            y: r.y,
            w: r.w,
            h: r.h,
        }
    }
}

/// Reads and validates a dataset manifest. Boxes are clamped to the image
/// (with a warning); records come back sorted by `image_id`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ManifestDoc = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            message: format!("schema version {}, expected {SCHEMA_VERSION}", doc.schema_version),
        });
    }
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    dataset_from_doc(doc, root)
}

fn dataset_from_doc(doc: ManifestDoc, root: PathBuf) -> Result<Dataset> {
    if doc.classes.len() < 2 {
        return Err(Error::validation(
            "manifest",
            "classes",
            "at least two classes are required",
        ));
    }
    if doc.attributes.len() != NUM_ATTRIBUTES {
        return Err(Error::validation(
            "manifest",
            "attributes",
            format!("expected {NUM_ATTRIBUTES} names, found {}", doc.attributes.len()),
        ));
    }
    let n_classes = doc.classes.len();
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(doc.images.len());
    for image in doc.images {
        if !seen.insert(image.image_id.clone()) {
            return Err(Error::validation(&image.image_id, "image_id", "duplicate image id"));
        }
        records.push(validate_image(image, n_classes)?);
    }
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(Dataset {
        classes: doc.classes,
        attributes: doc.attributes,
        records,
        root,
    })
}

fn validate_image(image: ManifestImage, n_classes: usize) -> Result<ImageRecord> {
    let id = image.image_id.clone();
    if image.width == 0 || image.height == 0 {
        return Err(Error::validation(&id, "width/height", "must be positive"));
    }
    let (w, h) = (image.width as f64, image.height as f64);
    let region = match image.region {
        None => None,
        Some(rect) => {
            let rect = BoundingBox::from(rect);
            if !(rect.w > 0.0 && rect.h > 0.0) {
                return Err(Error::validation(&id, "region", "width and height must be positive"));
            }
            let clamped = rect
                .clamp_to(w, h)
                .ok_or_else(|| Error::validation(&id, "region", "lies outside the image"))?;
            if clamped != rect {
                log::warn!("{id}: region clamped to image bounds");
            }
            Some(AnnotatedRegion { rect: clamped })
        }
    };
    let mut annotations = Vec::with_capacity(image.annotations.len());
    for (k, ann) in image.annotations.into_iter().enumerate() {
        let record = format!("{id} annotation {k}");
        let bbox = BoundingBox::from(ann.bbox);
        if !(bbox.w > 0.0 && bbox.h > 0.0) {
            return Err(Error::validation(&record, "box", "width and height must be positive"));
        }
        let clamped = bbox
            .clamp_to(w, h)
            .ok_or_else(|| Error::validation(&record, "box", "lies outside the image"))?;
        if clamped != bbox {
            log::warn!("{record}: box clamped to image bounds");
        }
        if ann.cell_class >= n_classes {
            return Err(Error::validation(
                &record,
                "cell_class",
                format!("{} is not below the class count {n_classes}", ann.cell_class),
            ));
        }
        if ann.attributes.len() != NUM_ATTRIBUTES {
            return Err(Error::validation(
                &record,
                "attributes",
                format!("expected {NUM_ATTRIBUTES} entries, found {}", ann.attributes.len()),
            ));
        }
        let mut flags = [false; NUM_ATTRIBUTES];
        for (slot, &v) in flags.iter_mut().zip(&ann.attributes) {
            *slot = match v {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::validation(
                        &record,
                        "attributes",
                        format!("entries must be 0 or 1, found {other}"),
                    ))
                }
            };
        }
        if let Some(region) = &region {
            if !region.contains_center(&clamped) {
                return Err(Error::validation(
                    &record,
                    "box",
                    "center lies outside the annotated region",
                ));
            }
        }
        annotations.push(Annotation {
            bbox: clamped,
            cell_class: ann.cell_class,
            attributes: AttributeVector(flags),
        });
    }
    Ok(ImageRecord {
        image_id: id,
        file: image.file,
        width: image.width,
        height: image.height,
        region,
        annotations,
    })
}

pub fn manifest_json(dataset: &Dataset) -> String {
    let doc = ManifestDoc {
        schema_version: SCHEMA_VERSION,
        classes: dataset.classes.clone(),
        attributes: dataset.attributes.clone(),
        images: dataset
            .records
            .iter()
            .map(|r| ManifestImage {
                image_id: r.image_id.clone(),
                file: r.file.clone(),
                width: r.width,
                height: r.height,
                region: r.region.map(|g| g.rect.into()),
                annotations: r
                    .annotations
                    .iter()
                    .map(|a| ManifestAnnotation {
                        bbox: a.bbox.into(),
                        cell_class: a.cell_class,
                        attributes: a.attributes.to_ints().to_vec(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    text.push('\n');
    text
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest_json(dataset)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// geometry

fn check_dims<T: Scalar>(what: &str, (w, h): (T, T)) -> Result<()> {
    if w > T::zero() && h > T::zero() {
        Ok(())
    } else {
        Err(Error::argument(format!("{what} must be positive, got {w} x {h}")))
    }
}

/// Rescales an image-space box onto a feature level of size `level_dims`.
/// Coordinates stay fractional.
pub fn normalize_bbox<T: Scalar>(
    bbox: &BoundingBox<T>,
    image_dims: (T, T),
    level_dims: (T, T),
) -> Result<BoundingBox<T>> {
    check_dims("image dims", image_dims)?;
    check_dims("level dims", level_dims)?;
    let sx = level_dims.0 / image_dims.0;
    let sy = level_dims.1 / image_dims.1;
    Ok(BoundingBox {
        x: bbox.x * sx,
        y: bbox.y * sy,
        w: bbox.w * sx,
        h: bbox.h * sy,
    })
}

pub fn denormalize_bbox<T: Scalar>(
    bbox: &BoundingBox<T>,
    image_dims: (T, T),
    level_dims: (T, T),
) -> Result<BoundingBox<T>> {
    normalize_bbox(bbox, level_dims, image_dims)
}

/// Boolean grid over a feature level, row-major `(y, x)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMask {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

impl GridMask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            cells: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.cells[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Marks the level cells whose centers fall inside the region (closed).
pub fn region_mask(region: &AnnotatedRegion, level_dims: (usize, usize), image_dims: (u32, u32)) -> Result<GridMask> {
    let (lw, lh) = level_dims;
    let norm = normalize_bbox(
        &region.rect,
        (image_dims.0 as f64, image_dims.1 as f64),
        (lw as f64, lh as f64),
    )?;
    let mut mask = GridMask::filled(lw, lh, false);
    if !(norm.w > 0.0 && norm.h > 0.0) {
        return Ok(mask);
    }
    for gy in 0..lh {
        for gx in 0..lw {
            if norm.contains_point(gx as f64 + 0.5, gy as f64 + 0.5) {
                mask.set(gx, gy, true);
            }
        }
    }
    Ok(mask)
}

pub trait HasBox<T> {
    fn bbox(&self) -> &BoundingBox<T>;
}

impl<T> HasBox<T> for BoundingBox<T> {
    fn bbox(&self) -> &BoundingBox<T> {
        self
    }
}

impl HasBox<f64> for Annotation {
    fn bbox(&self) -> &BoundingBox<f64> {
        &self.bbox
    }
}

/// Splits predictions into `(inside, outside)` by box-center membership.
pub fn boxes_in_region<'a, T: Scalar, P: HasBox<T>>(
    predictions: &'a [P],
    region: &AnnotatedRegion,
) -> (Vec<&'a P>, Vec<&'a P>) {
    predictions.iter().partition(|p| region.contains_center(p.bbox()))
}
