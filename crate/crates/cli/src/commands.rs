use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sladet_core::ablation::run_ablation;
use sladet_core::annotation::{boxes_in_region, load_dataset, Dataset};
use sladet_core::config::{fingerprint_bytes, fingerprint_text, RunConfig};
use sladet_core::corpus::generate_corpus;
use sladet_core::detector::{decode_predictions, image_to_map};
use sladet_core::eval::{evaluate_model, EvalConfig};
use sladet_core::losses::{classify_prediction, compute_area_min, FilterRecord, Verdict};
use sladet_core::nn::Checkpoint;
use sladet_core::report::generate_report;
use sladet_core::train::{load_images, train, TrainConfig};
use sladet_core::{Detector32, Error, Result};

use crate::{Cli, Command};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRACE_FILE: &str = "trace.json";
pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_TABLE: &str = "eval_report.txt";
pub const FILTER_DUMP: &str = "filter_debug.jsonl";
pub const FILTER_SUMMARY: &str = "filter_summary.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const DETECTIONS_JSON: &str = "detections.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const ABLATION_JSON: &str = "ablation.json";
pub const TIMING_FILE: &str = "timing.json";

fn init_logging(level: &str) {
    let _ = env_logger::Builder::new()
        .parse_filters(level)
        .format_timestamp(None)
        .try_init();
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::argument(format!("json: {e}")))?;
    write(path, text + "\n")
}

fn required(value: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    value.clone().ok_or_else(|| Error::config(key, "required"))
}

/// Creates `<out>/<command>-<timestamp>`, adding a counter when the name is taken.
fn run_dir(out: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = out.join(format!("{command}-{stamp}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    fs::create_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn load_model(path: &Path) -> Result<(Detector32, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes, path)?;
    Ok((Detector32::from_checkpoint(&ckpt)?, bytes))
}

fn check_classes(model: &Detector32, dataset: &Dataset, key: &str) -> Result<()> {
    if model.num_classes() != dataset.num_classes() {
        return Err(Error::config(
            key,
            format!(
                "dataset has {} classes, checkpoint {}",
                dataset.num_classes(),
                model.num_classes()
            ),
        ));
    }
    Ok(())
}

/// Checks `train` as training will see it: sized to the dataset's classes,
/// with `t2` capped at `log2 C`. Runs before any run directory is created.
fn validate_for(train: &TrainConfig, dataset: &Dataset) -> Result<()> {
    let mut fitted = train.clone();
    fitted.model.num_classes = dataset.num_classes();
    fitted.sparse.fit_to_classes(dataset.num_classes());
    fitted.validate()
}

#[derive(Serialize)]
struct Timing<'a> {
    command: &'a str,
    wallclock_secs: f64,
}

fn write_timing(dir: &Path, command: &str, start: std::time::Instant) -> Result<()> {
    write_json(
        &dir.join(TIMING_FILE),
        &Timing {
            command,
            wallclock_secs: start.elapsed().as_secs_f64(),
        },
    )
}

pub fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    let mut overrides = overrides;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.out {
        overrides.push(("out_dir".into(), format!("{:?}", out.display().to_string())));
    }
    if let Some(level) = &cli.log_level {
        overrides.push(("log_level".into(), format!("{level:?}")));
    }
    let path_override = |key: &str, v: &Option<PathBuf>| {
        v.as_ref()
            .map(|p| (key.to_string(), format!("{:?}", p.display().to_string())))
    };
    match &cli.command {
        Command::Generate { region_fraction } => {
            if let Some(f) = region_fraction {
                overrides.push(("corpus.region_fraction".into(), f.to_string()));
            }
        }
        Command::Train { dataset } => overrides.extend(path_override("train.dataset", dataset)),
        Command::Eval { checkpoint, dataset } => {
            overrides.extend(path_override("eval.checkpoint", checkpoint));
            overrides.extend(path_override("eval.dataset", dataset));
        }
        Command::FilterDebug { checkpoint, dataset } => {
            overrides.extend(path_override("filter.checkpoint", checkpoint));
            overrides.extend(path_override("filter.dataset", dataset));
        }
        Command::Report { checkpoint, dataset } => {
            overrides.extend(path_override("report.checkpoint", checkpoint));
            overrides.extend(path_override("report.dataset", dataset));
        }
        Command::Ablate {
            train_dataset,
            test_dataset,
            n_seeds,
        } => {
            overrides.extend(path_override("ablation.train_dataset", train_dataset));
            overrides.extend(path_override("ablation.test_dataset", test_dataset));
            if let Some(n) = n_seeds {
                overrides.push(("ablation.n_seeds".into(), n.to_string()));
            }
        }
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    init_logging(&config.log_level);
    match cli.command {
        Command::Generate { .. } => generate(&config),
        Command::Train { .. } => cmd_train(&config),
        Command::Eval { .. } => cmd_eval(&config),
        Command::FilterDebug { .. } => cmd_filter_debug(&config),
        Command::Report { .. } => cmd_report(&config),
        Command::Ablate { .. } => cmd_ablate(&config),
    }
}

/// Writes the corpus straight into `out_dir` so repeated runs with the same
/// seed produce identical trees.
fn generate(config: &RunConfig) -> Result<()> {
    config.corpus.validate()?;
    let out = &config.out_dir;
    let corpus = generate_corpus(&config.corpus, out)?;
    config.write_resolved(out)?;
    println!(
        "{} train / {} test images -> {}",
        corpus.train.records.len(),
        corpus.test.records.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &RunConfig) -> Result<()> {
    let path = required(&config.train_data.dataset, "train.dataset")?;
    let dataset = load_dataset(&path)?;
    validate_for(&config.train, &dataset)?;
    let dir = run_dir(&config.out_dir, "train")?;
    config.write_resolved(&dir)?;
    let start = std::time::Instant::now();
    let outcome = train::<f32>(&dataset, &config.train)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    outcome.model.checkpoint().save(&ckpt)?;
    write_json(&dir.join(TRACE_FILE), &outcome.trace)?;
    write_timing(&dir, "train", start)?;
    if let Some(last) = outcome.trace.epochs.last() {
        log::info!("final epoch {}: loss {:.4}", last.epoch, last.total);
    }
    println!("{}", ckpt.display());
    Ok(())
}

fn cmd_eval(config: &RunConfig) -> Result<()> {
    let ckpt_path = required(&config.eval.checkpoint, "eval.checkpoint")?;
    let data_path = required(&config.eval.dataset, "eval.dataset")?;
    let metrics = config.eval.metrics();
    metrics.validate()?;
    let (model, ckpt_bytes) = load_model(&ckpt_path)?;
    let test = load_dataset(&data_path)?;
    check_classes(&model, &test, "eval.dataset")?;
    let images = load_images(&test)?;
    let dir = run_dir(&config.out_dir, "eval")?;
    config.write_resolved(&dir)?;
    let start = std::time::Instant::now();
    // Paths and output locations are left out so that the same weights and
    // thresholds always give the same fingerprint.
    let metrics_toml = toml::to_string(&metrics).map_err(|e| Error::argument(format!("toml: {e}")))?;
    let fingerprint = fingerprint_text(&format!("{}\n{metrics_toml}", fingerprint_bytes(&ckpt_bytes)));
    let report = evaluate_model(&model, &test, &images, &metrics, &fingerprint)?;
    write_json(&dir.join(EVAL_JSON), &report)?;
    let table = report.to_table();
    write(&dir.join(EVAL_TABLE), &table)?;
    write_timing(&dir, "eval", start)?;
    print!("{table}");
    println!("{}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct FilterSummary {
    images: usize,
    total: usize,
    pseudo: usize,
    candidate: usize,
    discard: usize,
    area_min: f64,
    t2: f64,
}

fn cmd_filter_debug(config: &RunConfig) -> Result<()> {
    let ckpt_path = required(&config.filter.checkpoint, "filter.checkpoint")?;
    let data_path = required(&config.filter.dataset, "filter.dataset")?;
    let (model, _) = load_model(&ckpt_path)?;
    let dataset = load_dataset(&data_path)?;
    check_classes(&model, &dataset, "filter.dataset")?;
    let mut sparse = config.train.sparse.clone();
    sparse.fit_to_classes(dataset.num_classes());
    sparse.validate(dataset.num_classes())?;
    let area_min = match sparse.area_min {
        Some(a) => a,
        None => compute_area_min(&dataset)?,
    };
    let images = load_images(&dataset)?;
    let dir = run_dir(&config.out_dir, "filter-debug")?;
    config.write_resolved(&dir)?;
    let start = std::time::Instant::now();
    let mut lines = String::new();
    let mut summary = FilterSummary {
        images: dataset.records.len(),
        total: 0,
        pseudo: 0,
        candidate: 0,
        discard: 0,
        area_min,
        t2: sparse.t2,
    };
    for (record, image) in dataset.records.iter().zip(&images) {
        let map = image_to_map::<f32>(&image.pixels, image.width as usize, image.height as usize);
        let pass = model.forward(&map, false)?;
        let dets = decode_predictions(
            &pass.levels,
            config.filter.conf_threshold as f32,
            config.filter.nms_iou as f32,
        );
        let (_, outside) = boxes_in_region(&dets, &record.effective_region());
        for det in outside {
            let report = classify_prediction(det, &sparse, area_min);
            match report.verdict {
                Verdict::Pseudo => summary.pseudo += 1,
                Verdict::Candidate => summary.candidate += 1,
                Verdict::Discard => summary.discard += 1,
            }
            summary.total += 1;
            let rec = FilterRecord::new(&record.image_id, det, &report);
            lines.push_str(&serde_json::to_string(&rec).map_err(|e| Error::argument(format!("json: {e}")))?);
            lines.push('\n');
        }
    }
    write(&dir.join(FILTER_DUMP), lines)?;
    write_json(&dir.join(FILTER_SUMMARY), &summary)?;
    write_timing(&dir, "filter-debug", start)?;
    println!(
        "{} predictions: {} pseudo, {} candidate, {} discard",
        summary.total, summary.pseudo, summary.candidate, summary.discard
    );
    println!("{}", dir.display());
    Ok(())
}

fn cmd_report(config: &RunConfig) -> Result<()> {
    let ckpt_path = required(&config.report.checkpoint, "report.checkpoint")?;
    let data_path = required(&config.report.dataset, "report.dataset")?;
    let eval = EvalConfig {
        conf_threshold: config.report.conf_threshold,
        nms_iou: config.report.nms_iou,
        ..EvalConfig::default()
    };
    eval.validate()?;
    let (model, _) = load_model(&ckpt_path)?;
    let dataset = load_dataset(&data_path)?;
    check_classes(&model, &dataset, "report.dataset")?;
    let images = load_images(&dataset)?;
    let dir = run_dir(&config.out_dir, "report")?;
    config.write_resolved(&dir)?;
    let start = std::time::Instant::now();
    let (detections, report) = generate_report(&model, &dataset, &images, &eval)?;
    let text = report.to_text();
    write(&dir.join(REPORT_TEXT), &text)?;
    write_json(&dir.join(REPORT_JSON), &report)?;
    write_json(&dir.join(DETECTIONS_JSON), &detections)?;
    write_timing(&dir, "report", start)?;
    print!("{text}");
    println!("{}", dir.display());
    Ok(())
}

fn cmd_ablate(config: &RunConfig) -> Result<()> {
    let train_path = required(&config.ablation.train_dataset, "ablation.train_dataset")?;
    let test_path = required(&config.ablation.test_dataset, "ablation.test_dataset")?;
    let metrics = config.eval.metrics();
    metrics.validate()?;
    let train_set = load_dataset(&train_path)?;
    validate_for(&config.train, &train_set)?;
    let test_set = load_dataset(&test_path)?;
    let train_images = load_images(&train_set)?;
    let test_images = load_images(&test_set)?;
    let dir = run_dir(&config.out_dir, "ablate")?;
    config.write_resolved(&dir)?;
    let start = std::time::Instant::now();
    let report = run_ablation::<f32>(
        &train_set,
        &train_images,
        &test_set,
        &test_images,
        &config.train,
        &metrics,
        config.ablation.n_seeds,
    )?;
    write(&dir.join(ABLATION_CSV), report.to_csv()?)?;
    let table = report.to_table();
    write(&dir.join(ABLATION_TABLE), &table)?;
    write_json(&dir.join(ABLATION_JSON), &report)?;
    write_timing(&dir, "ablate", start)?;
    print!("{table}");
    println!("{}", dir.display());
    Ok(())
}
