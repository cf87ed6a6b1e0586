use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn sladet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sladet"))
        .args(args)
        .args(["--log-level", "warn"])
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn last_line(stdout: &str) -> PathBuf {
    PathBuf::from(stdout.lines().last().expect("output").trim())
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    checkpoint: PathBuf,
}

impl Fixture {
    fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    fn runs(&self) -> String {
        self.root.join("runs").display().to_string()
    }
}

/// A tiny corpus and a 2-epoch checkpoint shared by the tests below.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let tiny = config("tiny.toml");
        let tiny = tiny.to_str().unwrap();
        let corpus = root.join("corpus");
        ok(sladet(&[
            "generate",
            "--config",
            tiny,
            "--out",
            corpus.to_str().unwrap(),
        ]));
        let train = corpus.join("train.json");
        let stdout = ok(sladet(&[
            "train",
            "--config",
            tiny,
            "--dataset",
            train.to_str().unwrap(),
            "--out",
            root.join("runs").to_str().unwrap(),
            "--train.mode",
            "sla_det_attri",
        ]));
        let checkpoint = last_line(&stdout);
        assert!(checkpoint.is_file());
        Fixture {
            _dir: dir,
            root,
            checkpoint,
        }
    })
}

#[test]
fn invalid_region_fraction_exits_with_config_error() {
    let dir = TempDir::new().unwrap();
    let out = sladet(&[
        "generate",
        "--region-fraction",
        "1.5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_with_config_error() {
    let out = sladet(&["train", "--train.no_such_key", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_with_io_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.json");
    let out = sladet(&[
        "train",
        "--dataset",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn checkpoint_version_mismatch_exits_with_code_3() {
    let fx = fixture();
    let mut bytes = fs::read(&fx.checkpoint).unwrap();
    // the format version follows the 8-byte magic
    bytes[8] = bytes[8].wrapping_add(1);
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let test = fx.corpus().join("test.json");
    let out = sladet(&[
        "eval",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--dataset",
        test.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_writes_json_and_table() {
    let fx = fixture();
    let test = fx.corpus().join("test.json");
    let dir = last_line(&ok(sladet(&[
        "eval",
        "--checkpoint",
        fx.checkpoint.to_str().unwrap(),
        "--dataset",
        test.to_str().unwrap(),
        "--out",
        &fx.runs(),
    ])));
    let report = json(&dir.join("eval_report.json"));
    let map50 = report["map50"].as_f64().expect("map50");
    assert!((0.0..=1.0).contains(&map50));
    assert!(dir.join("eval_report.txt").is_file());
    assert!(dir.join("resolved_config.toml").is_file());
}

#[test]
fn filter_debug_partitions_every_prediction() {
    let fx = fixture();
    let train = fx.corpus().join("train.json");
    let dir = last_line(&ok(sladet(&[
        "filter-debug",
        "--checkpoint",
        fx.checkpoint.to_str().unwrap(),
        "--dataset",
        train.to_str().unwrap(),
        "--out",
        &fx.runs(),
        "--filter.conf_threshold",
        "0.0",
        "--train.sparse.t0",
        "0.3",
        "--train.sparse.t1",
        "0.5",
    ])));
    let summary = json(&dir.join("filter_summary.json"));
    let text = fs::read_to_string(dir.join("filter_debug.jsonl")).unwrap();
    let records: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!records.is_empty());
    assert_eq!(records.len() as u64, summary["total"].as_u64().unwrap());

    let (t0, t1) = (0.3, 0.5);
    let t2 = summary["t2"].as_f64().unwrap();
    let area_min = summary["area_min"].as_f64().unwrap();
    let mut counts = [0u64; 3];
    for r in &records {
        let conf = r["conf"].as_f64().unwrap();
        let area = r["area"].as_f64().unwrap();
        let entropy = r["entropy_bits"].as_f64().unwrap_or(f64::INFINITY);
        let b = r["box"].as_array().unwrap();
        let (w, h) = (b[2].as_f64().unwrap(), b[3].as_f64().unwrap());
        assert!((area - w * h).abs() <= 1e-3 * area.max(1.0));
        let gates = &r["gate_results"];
        assert_eq!(gates["t0"].as_bool().unwrap(), conf >= t0);
        assert_eq!(gates["t1"].as_bool().unwrap(), conf > t1);
        assert_eq!(gates["area"].as_bool().unwrap(), area > area_min);
        assert_eq!(gates["entropy"].as_bool().unwrap(), entropy < t2);
        let expected = if conf >= t0 && conf > t1 && area > area_min && entropy < t2 {
            "pseudo"
        } else if conf >= t0 && conf < t1 {
            "candidate"
        } else {
            "discard"
        };
        assert_eq!(r["verdict"].as_str().unwrap(), expected);
        counts[["pseudo", "candidate", "discard"]
            .iter()
            .position(|v| *v == expected)
            .unwrap()] += 1;
    }
    assert_eq!(counts[0], summary["pseudo"].as_u64().unwrap());
    assert_eq!(counts[1], summary["candidate"].as_u64().unwrap());
    assert_eq!(counts[2], summary["discard"].as_u64().unwrap());
}

#[test]
fn report_counts_match_the_detections() {
    let fx = fixture();
    let test = fx.corpus().join("test.json");
    let dir = last_line(&ok(sladet(&[
        "report",
        "--checkpoint",
        fx.checkpoint.to_str().unwrap(),
        "--dataset",
        test.to_str().unwrap(),
        "--out",
        &fx.runs(),
        "--report.conf_threshold",
        "0.05",
    ])));
    let report = json(&dir.join("report.json"));
    let detections = json(&dir.join("detections.json"));
    let films = report["films"].as_array().unwrap();
    let n_classes = report["classes"].as_array().unwrap().len();

    for film in films {
        let name = film["film"].as_str().unwrap();
        let mut images = 0;
        let mut classes = vec![0u64; n_classes];
        let mut attrs = [0u64; 6];
        for img in detections.as_array().unwrap() {
            let id = img["image_id"].as_str().unwrap();
            let f = match id.split_once('/') {
                Some((f, _)) if !f.is_empty() => f,
                _ => "all",
            };
            if f != name {
                continue;
            }
            images += 1;
            for b in img["boxes"].as_array().unwrap() {
                classes[b["class"].as_u64().unwrap() as usize] += 1;
                if let Some(probs) = b["attributes"].as_array() {
                    for (k, p) in probs.iter().enumerate() {
                        if p.as_f64().unwrap() >= 0.5 {
                            attrs[k] += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(film["images"].as_u64().unwrap(), images);
        let reported: Vec<u64> = film["class_counts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .collect();
        assert_eq!(reported, classes);
        assert_eq!(film["detections"].as_u64().unwrap(), classes.iter().sum::<u64>());
        let reported: Vec<u64> = film["attribute_positive"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .collect();
        assert_eq!(reported, attrs);
    }
    assert!(dir.join("report.txt").is_file());
}

#[test]
fn shipped_configs_resolve() {
    let dir = TempDir::new().unwrap();
    for name in [
        "desk.toml",
        "tiny.toml",
        "attridet.toml",
        "attr_ablation/lr.toml",
        "attr_ablation/lr_pl.toml",
        "attr_ablation/lr_pl_tri.toml",
    ] {
        let out = dir.path().join(name.replace('/', "_"));
        ok(sladet(&[
            "generate",
            "--config",
            config(name).to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--corpus.n_train",
            "1",
            "--corpus.n_test",
            "1",
        ]));
        let resolved = fs::read_to_string(out.join("resolved_config.toml")).unwrap();
        assert!(resolved.contains("[train.sparse]"), "{name}");
    }
}
