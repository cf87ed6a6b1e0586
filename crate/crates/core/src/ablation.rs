//! Loss ablation: the same sparse training run with the pseudo-label and
//! triplet terms switched on one at a time, repeated over seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotation::{Attribute, Dataset};
use crate::corpus::image_io::RgbImage;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalConfig};
use crate::scalar::Scalar;
use crate::train::{train_with_images, TrainConfig};

/// Loss composition of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationRow {
    /// Labeled-region loss only.
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "LR+PL")]
    LrPl,
    #[serde(rename = "LR+PL+Tri")]
    LrPlTri,
}

impl AblationRow {
    pub const ALL: [AblationRow; 3] = [AblationRow::Lr, AblationRow::LrPl, AblationRow::LrPlTri];

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::Lr => "LR",
            AblationRow::LrPl => "LR+PL",
            AblationRow::LrPlTri => "LR+PL+Tri",
        }
    }

    /// `base` with the disabled terms' weights set to zero.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            AblationRow::Lr => {
                cfg.sparse.w_pl = 0.0;
                cfg.sparse.w_tri = 0.0;
            }
            AblationRow::LrPl => cfg.sparse.w_tri = 0.0,
            AblationRow::LrPlTri => {}
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub map50: f64,
    pub map50_95: f64,
    /// Per-attribute F1 in attribute order; empty when attributes are off.
    pub attribute_f1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub row: AblationRow,
    pub map50: MeanStd,
    pub map50_95: MeanStd,
    pub attribute_f1: Vec<MeanStd>,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: String,
    pub n_seeds: usize,
    pub rows: Vec<RowSummary>,
}

impl AblationReport {
    pub fn row(&self, row: AblationRow) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.row == row)
    }

    fn has_attributes(&self) -> bool {
        self.rows.iter().any(|r| !r.attribute_f1.is_empty())
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["row", "map50_95_mean", "map50_95_std", "map50_mean", "map50_std"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if self.has_attributes() {
            for a in Attribute::ALL {
                h.push(format!("f1_{}_mean", a.abbreviation()));
                h.push(format!("f1_{}_std", a.abbreviation()));
            }
        }
        h
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let to_err = |e: csv::Error| Error::argument(format!("csv: {e}"));
        w.write_record(self.header()).map_err(to_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.row.label().to_string(),
                format!("{:.6}", r.map50_95.mean),
                format!("{:.6}", r.map50_95.std),
                format!("{:.6}", r.map50.mean),
                format!("{:.6}", r.map50.std),
            ];
            for f in &r.attribute_f1 {
                rec.push(format!("{:.6}", f.mean));
                rec.push(format!("{:.6}", f.std));
            }
            w.write_record(rec).map_err(to_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::argument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10} {:>17} {:>17}", "losses", "mAP@50-95", "mAP@50");
        if self.has_attributes() {
            for a in Attribute::ALL {
                let _ = write!(s, " {:>13}", format!("F1 {}", a.abbreviation()));
            }
        }
        let _ = writeln!(s);
        for r in &self.rows {
            let _ = write!(
                s,
                "{:<10} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
                r.row.label(),
                r.map50_95.mean,
                r.map50_95.std,
                r.map50.mean,
                r.map50.std
            );
            for f in &r.attribute_f1 {
                let _ = write!(s, " {:>6.3} ± {:<4.3}", f.mean, f.std);
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s, "mode {}, {} seed(s)", self.mode, self.n_seeds);
        s
    }
}

/// Trains every row for seeds `base.seed .. base.seed + n_seeds` and scores
/// each model on `test`.
pub fn run_ablation<T: Scalar>(
    train: &Dataset,
    train_images: &[RgbImage],
    test: &Dataset,
    test_images: &[RgbImage],
    base: &TrainConfig,
    eval: &EvalConfig,
    n_seeds: usize,
) -> Result<AblationReport> {
    if n_seeds == 0 {
        return Err(Error::config("ablation.n_seeds", "must be positive"));
    }
    if !base.mode.is_sparse() {
        return Err(Error::config("train.mode", "the ablation needs a sparse mode"));
    }
    let mut rows = Vec::with_capacity(AblationRow::ALL.len());
    for row in AblationRow::ALL {
        let mut seeds = Vec::with_capacity(n_seeds);
        for k in 0..n_seeds as u64 {
            let mut cfg = row.apply(base);
            cfg.seed = base.seed.wrapping_add(k);
            log::info!("ablation {} seed {}", row.label(), cfg.seed);
            let outcome = train_with_images::<T>(train, train_images, &cfg)?;
            let report = evaluate_model(&outcome.model, test, test_images, eval, "")?;
            let attribute_f1 = match (&report.attributes, base.mode.uses_attributes()) {
                (Some(a), true) => a.per_attribute.iter().map(|f| f.f1).collect(),
                _ => Vec::new(),
            };
            seeds.push(SeedResult {
                seed: cfg.seed,
                map50: report.map50,
                map50_95: report.map50_95,
                attribute_f1,
            });
        }
        rows.push(summarize(row, seeds));
    }
    Ok(AblationReport {
        mode: base.mode.to_string(),
        n_seeds,
        rows,
    })
}

fn summarize(row: AblationRow, seeds: Vec<SeedResult>) -> RowSummary {
    let col = |f: &dyn Fn(&SeedResult) -> f64| MeanStd::of(&seeds.iter().map(f).collect::<Vec<_>>());
    let n_attr = seeds.first().map_or(0, |s| s.attribute_f1.len());
    RowSummary {
        row,
        map50: col(&|s| s.map50),
        map50_95: col(&|s| s.map50_95),
        attribute_f1: (0..n_attr).map(|i| col(&|s| s.attribute_f1[i])).collect(),
        seeds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_switch_off_weights() {
        let base = TrainConfig::default();
        let lr = AblationRow::Lr.apply(&base);
        assert_eq!((lr.sparse.w_pl, lr.sparse.w_tri), (0.0, 0.0));
        let pl = AblationRow::LrPl.apply(&base);
        assert_eq!((pl.sparse.w_pl, pl.sparse.w_tri), (base.sparse.w_pl, 0.0));
        assert_eq!(AblationRow::LrPlTri.apply(&base), base);
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m.mean - 2.5).abs() < 1e-12);
        // sum of squared deviations 5, over n - 1 = 3
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(MeanStd::of(&[0.7]).std, 0.0);
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let seed = |v: f64| SeedResult {
            seed: 0,
            map50: v,
            map50_95: v / 2.0,
            attribute_f1: vec![v; 6],
        };
        let report = AblationReport {
            mode: "sla_det_attri".into(),
            n_seeds: 1,
            rows: AblationRow::ALL
                .iter()
                .zip([0.5, 0.6, 0.7])
                .map(|(&r, v)| summarize(r, vec![seed(v)]))
                .collect(),
        };
        let csv = report.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].split(',').count(), 5 + 12);
        assert!(lines[3].starts_with("LR+PL+Tri,0.350000"));
        assert!(report.to_table().contains("LR+PL "));
    }
}
