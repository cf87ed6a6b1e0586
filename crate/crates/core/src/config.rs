//! Run configuration: a TOML document with one table per command, dotted
//! `section.key=value` overrides, and a resolved form that is written next to
//! every run's artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::train::TrainConfig;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub attribute_iou: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            checkpoint: None,
            dataset: None,
            conf_threshold: e.conf_threshold,
            nms_iou: e.nms_iou,
            max_detections: e.max_detections,
            attribute_iou: e.attribute_iou,
        }
    }
}

impl EvalSection {
    pub fn metrics(&self) -> EvalConfig {
        EvalConfig {
            conf_threshold: self.conf_threshold,
            nms_iou: self.nms_iou,
            max_detections: self.max_detections,
            attribute_iou: self.attribute_iou,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// Detections below this confidence are not entered in the bank.
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            conf_threshold: 0.25,
            nms_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// Predictions below this confidence are not dumped.
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            conf_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub train_dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub n_seeds: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            train_dataset: None,
            test_dataset: None,
            n_seeds: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub dataset: Option<PathBuf>,
}

/// Everything a command may need. The global `seed` drives the corpus and
/// training streams; section-level seeds are overwritten by it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub log_level: String,
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub train_data: TrainSection,
    pub eval: EvalSection,
    pub filter: FilterSection,
    pub report: ReportSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            log_level: "info".to_string(),
            corpus: CorpusSpec::default(),
            train: TrainConfig::default(),
            train_data: TrainSection::default(),
            eval: EvalSection::default(),
            filter: FilterSection::default(),
            report: ReportSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

const SECTIONS: [&str; 6] = ["corpus", "train", "eval", "filter", "report", "ablation"];
const GLOBALS: [&str; 3] = ["seed", "out_dir", "log_level"];
/// Keys of the `train` table that are paths rather than training settings.
const TRAIN_PATH_KEYS: [&str; 1] = ["dataset"];

fn section<T: for<'de> Deserialize<'de>>(table: &mut Table, name: &str) -> Result<T> {
    let value = table.remove(name).unwrap_or_else(|| Value::Table(Table::new()));
    value
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(name, e.message().to_string()))
}

impl RunConfig {
    /// Builds the configuration from an optional file plus overrides of the
    /// form `(dotted.key, value)`. Values are parsed as TOML literals, falling
    /// back to plain strings.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>().map_err(|e| Error::Parse {
                    path: p.to_path_buf(),
                    message: e.message().to_string(),
                })?
            }
            None => Table::new(),
        };
        for (key, raw) in overrides {
            apply_override(&mut table, key, raw)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(mut table: Table) -> Result<Self> {
        for key in table.keys() {
            if !SECTIONS.contains(&key.as_str()) && !GLOBALS.contains(&key.as_str()) {
                return Err(Error::config(key.clone(), "unknown key"));
            }
        }
        let mut cfg = RunConfig::default();
        if let Some(v) = table.remove("seed") {
            cfg.seed = v
                .as_integer()
                .and_then(|i| u64::try_from(i).ok())
                .ok_or_else(|| Error::config("seed", "must be a non-negative integer"))?;
        }
        if let Some(v) = table.remove("out_dir") {
            cfg.out_dir = PathBuf::from(v.as_str().ok_or_else(|| Error::config("out_dir", "must be a string"))?);
        }
        if let Some(v) = table.remove("log_level") {
            cfg.log_level = v
                .as_str()
                .ok_or_else(|| Error::config("log_level", "must be a string"))?
                .to_string();
        }
        let mut train_table = match table.remove("train") {
            Some(Value::Table(t)) => t,
            Some(_) => return Err(Error::config("train", "must be a table")),
            None => Table::new(),
        };
        let mut paths = Table::new();
        for k in TRAIN_PATH_KEYS {
            if let Some(v) = train_table.remove(k) {
                paths.insert(k.to_string(), v);
            }
        }
        let mut wrapper = Table::new();
        wrapper.insert("train".into(), Value::Table(train_table));
        wrapper.insert("train_paths".into(), Value::Table(paths));
        cfg.train = section(&mut wrapper, "train")?;
        cfg.train_data = section(&mut wrapper, "train_paths").map_err(|e| match e {
            Error::Config { message, .. } => Error::config("train", message),
            other => other,
        })?;
        cfg.corpus = section(&mut table, "corpus")?;
        cfg.eval = section(&mut table, "eval")?;
        cfg.filter = section(&mut table, "filter")?;
        cfg.report = section(&mut table, "report")?;
        cfg.ablation = section(&mut table, "ablation")?;
        cfg.corpus.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Every field, defaults included, as a TOML table.
    pub fn to_table(&self) -> Table {
        fn table_of<T: Serialize>(v: &T) -> Table {
            match Value::try_from(v).expect("config serializes") {
                Value::Table(t) => t,
                _ => unreachable!("structs serialize to tables"),
            }
        }
        let mut t = Table::new();
        t.insert("seed".into(), Value::Integer(self.seed as i64));
        t.insert("out_dir".into(), Value::String(self.out_dir.display().to_string()));
        t.insert("log_level".into(), Value::String(self.log_level.clone()));
        t.insert("corpus".into(), Value::Table(table_of(&self.corpus)));
        let mut train = table_of(&self.train);
        train.extend(table_of(&self.train_data));
        t.insert("train".into(), Value::Table(train));
        t.insert("eval".into(), Value::Table(table_of(&self.eval)));
        t.insert("filter".into(), Value::Table(table_of(&self.filter)));
        t.insert("report".into(), Value::Table(table_of(&self.report)));
        t.insert("ablation".into(), Value::Table(table_of(&self.ablation)));
        t
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_table()).expect("config serializes")
    }

    /// SHA-256 of the resolved TOML text.
    pub fn fingerprint(&self) -> String {
        fingerprint_text(&self.to_toml())
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub fn fingerprint_text(text: &str) -> String {
    fingerprint_bytes(text.as_bytes())
}

/// Lowercase hex SHA-256.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Sets `dotted.key` in `table` to `raw`, creating intermediate tables.
pub fn apply_override(table: &mut Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed key"));
    }
    let value = parse_value(raw);
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::config(key, format!("`{p}` is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
