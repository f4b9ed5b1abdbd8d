use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use layoutrel::grammar::GrammarConfig;
use layoutrel::model::ModelConfig;
use layoutrel_cli::{execute, resolve_out, CliError, Job, Result, RunManifest, DEFAULT_K_VALUES};

/// Environment variable naming the root that relative output paths resolve against.
const OUT_ROOT: &str = "LAYOUTREL_OUT";

#[derive(Parser)]
#[command(
    name = "layoutrel",
    version,
    about = "Synthetic document-layout detection experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Model/training config file (`key = value` lines); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Fraction of documents (taken from the end) held out for validation.
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic layout dataset as JSONL.
    Gen {
        /// Dataset seed; every document derives its own seed from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of documents.
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// Grammar config file (`key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output path, relative to $LAYOUTREL_OUT when that is set.
        #[arg(long, default_value = "data.jsonl")]
        out: PathBuf,
    },
    /// Check the grammar invariants on generated seeds or on a dataset file.
    Audit {
        /// Number of consecutive seeds to generate and audit.
        #[arg(long, default_value_t = 10_000)]
        seeds: u64,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        start: u64,
        /// Grammar config file (`key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Audit this dataset instead of freshly generated seeds.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output path, relative to $LAYOUTREL_OUT when that is set.
        #[arg(long, default_value = "audit")]
        out: PathBuf,
    },
    /// Train one detector; writes checkpoint, metric CSV and convergence SVG.
    Train {
        /// Dataset JSONL file.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Override the epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Output path, relative to $LAYOUTREL_OUT when that is set.
        #[arg(long, default_value = "train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the validation split of a dataset.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset JSONL file.
        #[arg(long)]
        data: PathBuf,
        /// Score the ground truth itself (sanity check; ignores --checkpoint).
        #[arg(long)]
        oracle: bool,
        /// Fraction of documents (taken from the end) held out for validation.
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        /// Output path, relative to $LAYOUTREL_OUT when that is set.
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Train all four module combinations and tabulate AP50, AP75, recall, mAP.
    Ablate {
        /// Dataset JSONL file.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Output path, relative to $LAYOUTREL_OUT when that is set.
        #[arg(long, default_value = "ablate")]
        out: PathBuf,
    },
    /// Histogram of the sampling gate over validation queries.
    InspectLambda {
        /// Checkpoint of a model trained with use_bspda = true.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset JSONL file.
        #[arg(long)]
        data: PathBuf,
        /// Fraction of documents (taken from the end) held out for validation.
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        /// Output path, relative to $LAYOUTREL_OUT when that is set.
        #[arg(long, default_value = "lambda")]
        out: PathBuf,
    },
    /// Train one graph-classifier model per neighbor count K.
    SweepK {
        /// Dataset JSONL file.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_K_VALUES)]
        values: Vec<usize>,
        /// Output path, relative to $LAYOUTREL_OUT when that is set.
        #[arg(long, default_value = "sweep-k")]
        out: PathBuf,
    },
    /// Re-run a command from its manifest.
    Rerun {
        /// Run manifest written by an earlier command.
        #[arg(long)]
        manifest: PathBuf,
        /// Write to this location instead of the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn grammar_text(path: Option<&Path>) -> Result<String> {
    let cfg = match path {
        Some(p) => GrammarConfig::from_text(&read_text(p)?)?,
        None => GrammarConfig::default(),
    };
    Ok(cfg.to_text())
}

fn model_text(args: &ModelArgs, epochs: Option<usize>) -> Result<String> {
    let mut cfg = match &args.config {
        Some(p) => ModelConfig::from_text(&read_text(p)?)?,
        None => ModelConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Invalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg.to_text())
}

fn fraction(f: f64) -> Result<f64> {
    if (0.0..1.0).contains(&f) {
        Ok(f)
    } else {
        Err(CliError::Invalid(format!("--val-fraction must be in [0, 1), got {f}")))
    }
}

/// Absolute form of a path, so manifests stay valid from any directory.
fn abs(p: PathBuf) -> PathBuf {
    std::path::absolute(&p).unwrap_or(p)
}

fn job(cmd: Cmd, root: Option<&Path>) -> Result<Job> {
    let out = |p: PathBuf| abs(resolve_out(&p, root));
    Ok(match cmd {
        Cmd::Gen {
            seed,
            count,
            config,
            out: o,
        } => Job::Gen {
            seed,
            count,
            grammar: grammar_text(config.as_deref())?,
            out: out(o),
        },
        Cmd::Audit {
            seeds,
            start,
            config,
            data,
            out: o,
        } => Job::Audit {
            seeds,
            start,
            grammar: grammar_text(config.as_deref())?,
            data: data.map(abs),
            out: out(o),
        },
        Cmd::Train {
            data,
            model,
            epochs,
            out: o,
        } => Job::Train {
            data: abs(data),
            val_fraction: fraction(model.val_fraction)?,
            model: model_text(&model, epochs)?,
            out: out(o),
        },
        Cmd::Eval {
            checkpoint,
            data,
            oracle,
            val_fraction,
            out: o,
        } => {
            if checkpoint.is_none() && !oracle {
                return Err(CliError::Invalid("eval needs --checkpoint (or --oracle)".into()));
            }
            Job::Eval {
                checkpoint: checkpoint.map(abs).unwrap_or_default(),
                data: abs(data),
                oracle,
                val_fraction: fraction(val_fraction)?,
                out: out(o),
            }
        }
        Cmd::Ablate {
            data,
            model,
            seeds,
            out: o,
        } => Job::Ablate {
            data: abs(data),
            val_fraction: fraction(model.val_fraction)?,
            model: model_text(&model, None)?,
            seeds,
            out: out(o),
        },
        Cmd::InspectLambda {
            checkpoint,
            data,
            val_fraction,
            out: o,
        } => Job::InspectLambda {
            checkpoint: abs(checkpoint),
            data: abs(data),
            val_fraction: fraction(val_fraction)?,
            out: out(o),
        },
        Cmd::SweepK {
            data,
            model,
            values,
            out: o,
        } => Job::SweepK {
            data: abs(data),
            val_fraction: fraction(model.val_fraction)?,
            model: model_text(&model, None)?,
            values,
            out: out(o),
        },
        Cmd::Rerun { manifest, out: o } => {
            let m = RunManifest::load(&manifest)?;
            match o {
                Some(p) => m.job.with_out(out(p)),
                None => m.job,
            }
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = std::env::var_os(OUT_ROOT).map(PathBuf::from);
    let result = job(cli.cmd, root.as_deref()).and_then(|j| execute(&j, &mut |line| eprintln!("{line}")));
    match result {
        Ok((outcome, _)) => {
            print!("{}", outcome.summary);
            if !outcome.summary.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
