//! Morphology bank: per-film tallies of detected cell classes and attribute
//! states, rendered as one summary paragraph per film.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotation::{Attribute, Dataset, NUM_ATTRIBUTES};
use crate::corpus::image_io::RgbImage;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::eval::{predict_dataset, EvalConfig, ImagePredictions};
use crate::scalar::Scalar;

/// Attribute probabilities at or above this count as positive.
pub const ATTRIBUTE_THRESHOLD: f64 = 0.5;
/// Film used for image ids without a `film/` prefix.
pub const DEFAULT_FILM: &str = "all";
pub const NO_CELLS: &str = "no cells detected";

/// Film an image belongs to: the part of its id before the first `/`.
pub fn film_of(image_id: &str) -> &str {
    match image_id.split_once('/') {
        Some((film, _)) if !film.is_empty() => film,
        _ => DEFAULT_FILM,
    }
}

fn attribute_label(a: Attribute) -> &'static str {
    match a {
        Attribute::NuclearChromatin => "nuclear chromatin",
        Attribute::NuclearShape => "nuclear shape",
        Attribute::Nucleus => "nucleus",
        Attribute::Cytoplasm => "cytoplasm",
        Attribute::CytoplasmicBasophilia => "cytoplasmic basophilia",
        Attribute::CytoplasmicVacuoles => "vacuoles",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilmSummary {
    pub film: String,
    pub images: usize,
    pub detections: usize,
    /// Detections per class, in class order.
    pub class_counts: Vec<usize>,
    /// Detections with each attribute positive, in attribute order.
    pub attribute_positive: [usize; NUM_ATTRIBUTES],
    /// Most frequent class; ties go to the lower index. `None` without detections.
    pub modal_class: Option<usize>,
    /// Attribute present in strictly more than half the detections.
    pub attribute_majority: [bool; NUM_ATTRIBUTES],
}

impl FilmSummary {
    pub fn positive_rate(&self, attribute: Attribute) -> f64 {
        if self.detections == 0 {
            0.0
        } else {
            self.attribute_positive[attribute.index()] as f64 / self.detections as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphologyReport {
    pub classes: Vec<String>,
    pub films: Vec<FilmSummary>,
}

/// Tallies `predictions` (with attribute probabilities) per film. Films are
/// listed in order of first appearance; predictions without attributes count
/// as all-negative.
pub fn build_bank(classes: &[String], predictions: &[ImagePredictions]) -> Result<MorphologyReport> {
    let mut order: Vec<String> = Vec::new();
    let mut films: BTreeMap<String, FilmSummary> = BTreeMap::new();
    for p in predictions {
        let name = film_of(&p.image_id);
        let film = films.entry(name.to_string()).or_insert_with(|| {
            order.push(name.to_string());
            FilmSummary {
                film: name.to_string(),
                images: 0,
                detections: 0,
                class_counts: vec![0; classes.len()],
                attribute_positive: [0; NUM_ATTRIBUTES],
                modal_class: None,
                attribute_majority: [false; NUM_ATTRIBUTES],
            }
        });
        film.images += 1;
        for b in &p.boxes {
            let slot = film.class_counts.get_mut(b.class).ok_or_else(|| {
                Error::validation(p.image_id.clone(), "class", format!("class {} out of range", b.class))
            })?;
            *slot += 1;
            film.detections += 1;
            if let Some(probs) = &b.attributes {
                for (k, &pr) in probs.iter().enumerate() {
                    if pr >= ATTRIBUTE_THRESHOLD {
                        film.attribute_positive[k] += 1;
                    }
                }
            }
        }
    }
    let films = order
        .into_iter()
        .map(|name| {
            let mut f = films.remove(&name).expect("film registered");
            if f.detections > 0 {
                // max_by_key keeps the last maximum, so scan in reverse
                f.modal_class = f
                    .class_counts
                    .iter()
                    .enumerate()
                    .rev()
                    .max_by_key(|&(_, &n)| n)
                    .map(|(c, _)| c);
                for k in 0..NUM_ATTRIBUTES {
                    f.attribute_majority[k] = 2 * f.attribute_positive[k] > f.detections;
                }
            }
            f
        })
        .collect();
    Ok(MorphologyReport {
        classes: classes.to_vec(),
        films,
    })
}

impl MorphologyReport {
    pub fn paragraph(&self, film: &FilmSummary) -> String {
        let Some(modal) = film.modal_class else {
            return format!("Film {}: {NO_CELLS} in {} image(s).", film.film, film.images);
        };
        let states: Vec<String> = Attribute::ALL
            .iter()
            .map(|&a| {
                let state = if film.attribute_majority[a.index()] {
                    "present"
                } else {
                    "absent"
                };
                format!("{}: {state}", attribute_label(a))
            })
            .collect();
        format!(
            "Film {}: {} cell(s) detected in {} image(s). Predominant cell type: {} ({} of {}). Morphology: {}.",
            film.film,
            film.detections,
            film.images,
            self.classes[modal],
            film.class_counts[modal],
            film.detections,
            states.join("; ")
        )
    }

    /// Per-film counts: one column per class, the total, then the number of
    /// detections with each attribute positive.
    pub fn count_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<16} {:>7}", "film", "images");
        for c in &self.classes {
            let _ = write!(s, " {:>10}", c);
        }
        let _ = write!(s, " {:>7}", "total");
        for a in Attribute::ALL {
            let _ = write!(s, " {:>5}", a.abbreviation());
        }
        let _ = writeln!(s);
        for f in &self.films {
            let _ = write!(s, "{:<16} {:>7}", f.film, f.images);
            for n in &f.class_counts {
                let _ = write!(s, " {:>10}", n);
            }
            let _ = write!(s, " {:>7}", f.detections);
            for n in &f.attribute_positive {
                let _ = write!(s, " {:>5}", n);
            }
            let _ = writeln!(s);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for f in &self.films {
            let _ = writeln!(s, "{}", self.paragraph(f));
            let _ = writeln!(s);
        }
        s.push_str(&self.count_table());
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "Predominant type is the most frequent detected class, ties going to the lower class index. \
             An attribute is present when its probability is at least {ATTRIBUTE_THRESHOLD} for more than \
             half of the film's detections; an exact half counts as absent."
        );
        s
    }
}

/// Runs detection plus attribute inference on every image of `dataset` and
/// returns the detection dump together with the per-film bank.
pub fn generate_report<T: Scalar>(
    model: &Detector<T>,
    dataset: &Dataset,
    images: &[RgbImage],
    config: &EvalConfig,
) -> Result<(Vec<ImagePredictions>, MorphologyReport)> {
    let predictions = predict_dataset(model, dataset, images, config, true)?;
    let report = build_bank(&dataset.classes, &predictions)?;
    Ok((predictions, report))
}
