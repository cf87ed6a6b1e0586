mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sladet_core::Error;

/// Sparse-annotation cell detection: corpus generation, training, evaluation
/// and morphology reports.
///
/// Any configuration key can be overridden with `--section.key value`,
/// e.g. `--train.sparse.t0 0.6` or `--corpus.n_train 50`.
#[derive(Debug, Parser)]
#[command(name = "sladet", version)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for corpus generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (the corpus directory for `generate`, the parent of
    /// the run directory otherwise).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Log filter, e.g. `info` or `debug`.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus (train images sparsely annotated, test images fully).
    Generate {
        /// Fraction of each train image covered by the annotated region.
        #[arg(long)]
        region_fraction: Option<f64>,
    },
    /// Train a detector on `train.dataset`.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score `eval.checkpoint` on the fully annotated `eval.dataset`.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Dump the pseudo-label gate verdicts for every unannotated-region prediction.
    FilterDebug {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Per-film morphology summary of a dataset.
    Report {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the LR, LR+PL and LR+PL+Tri variants over several seeds.
    Ablate {
        #[arg(long)]
        train_dataset: Option<PathBuf>,
        #[arg(long)]
        test_dataset: Option<PathBuf>,
        #[arg(long)]
        n_seeds: Option<usize>,
    },
}

pub const EXIT_IO: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_VERSION: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Image { .. } => EXIT_IO,
        Error::VersionMismatch { .. } => EXIT_VERSION,
        Error::Parse { .. } | Error::Validation { .. } | Error::Argument(_) | Error::Config { .. } => EXIT_CONFIG,
    }
}

/// Splits `--section.key value` and `--section.key=value` pairs out of the
/// argument list; everything else is left for clap.
type Overrides = Vec<(String, String)>;

fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("missing value for --{key}"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match commands::run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dotted_flags_become_overrides() {
        let (rest, ov) = split_overrides(strings(&[
            "sladet",
            "train",
            "--train.sparse.t0",
            "0.6",
            "--seed",
            "3",
            "--corpus.n_train=5",
        ]))
        .unwrap();
        assert_eq!(rest, strings(&["sladet", "train", "--seed", "3"]));
        assert_eq!(
            ov,
            vec![
                ("train.sparse.t0".to_string(), "0.6".to_string()),
                ("corpus.n_train".to_string(), "5".to_string())
            ]
        );
    }

    #[test]
    fn dangling_override_is_an_error() {
        assert!(split_overrides(strings(&["sladet", "eval", "--eval.nms_iou"])).is_err());
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let io = Error::io("x", std::io::Error::other("boom"));
        assert_eq!(exit_code(&io), EXIT_IO);
        assert_eq!(exit_code(&Error::config("a", "b")), EXIT_CONFIG);
        let v = Error::VersionMismatch {
            path: "x".into(),
            message: String::new(),
        };
        assert_eq!(exit_code(&v), EXIT_VERSION);
    }
}
