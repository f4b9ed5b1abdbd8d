//! Command implementations behind the `layoutrel` binary.
//!
//! Every command is described by a serializable [`Job`] holding fully
//! resolved inputs (configuration text inline, absolute or root-joined paths),
//! so the manifest it writes is enough to run it again.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use layoutrel::checkpoint;
use layoutrel::grammar::{audit, generate, Dataset, GrammarConfig, SyntheticDocument};
use layoutrel::metrics::{evaluate_detections, Detection, EvalReport};
use layoutrel::model::{Detector, ModelConfig};
use layoutrel::train::{category_names, evaluate, history_csv, targets, EpochMetrics, Trainer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub mod svg;

use svg::{line_plot, Series};

pub const MANIFEST_VERSION: u32 = 1;
pub const LAMBDA_BINS: usize = 20;
pub const DEFAULT_K_VALUES: [usize; 5] = [2, 4, 6, 8, 10];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] layoutrel::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for invalid input, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        use layoutrel::Error as E;
        match self {
            CliError::Invalid(_) => 2,
            CliError::Core(E::Config(_) | E::Parse { .. } | E::Checkpoint { .. }) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn write(path: &Path, content: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, content).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Unreadable inputs are a validation failure, not a runtime one.
fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

/// Git-style content hash: SHA-256 of `"blob <len>\0" ‖ content`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolves a relative output path against `root` (the output-root variable).
pub fn resolve_out(path: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Gen {
        seed: u64,
        count: usize,
        grammar: String,
        out: PathBuf,
    },
    Audit {
        seeds: u64,
        start: u64,
        grammar: String,
        data: Option<PathBuf>,
        out: PathBuf,
    },
    Train {
        data: PathBuf,
        model: String,
        val_fraction: f64,
        out: PathBuf,
    },
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        oracle: bool,
        val_fraction: f64,
        out: PathBuf,
    },
    Ablate {
        data: PathBuf,
        model: String,
        seeds: Vec<u64>,
        val_fraction: f64,
        out: PathBuf,
    },
    InspectLambda {
        checkpoint: PathBuf,
        data: PathBuf,
        val_fraction: f64,
        out: PathBuf,
    },
    SweepK {
        data: PathBuf,
        model: String,
        values: Vec<usize>,
        val_fraction: f64,
        out: PathBuf,
    },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Gen { .. } => "gen",
            Job::Audit { .. } => "audit",
            Job::Train { .. } => "train",
            Job::Eval { .. } => "eval",
            Job::Ablate { .. } => "ablate",
            Job::InspectLambda { .. } => "inspect-lambda",
            Job::SweepK { .. } => "sweep-k",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            Job::Gen { out, .. }
            | Job::Audit { out, .. }
            | Job::Train { out, .. }
            | Job::Eval { out, .. }
            | Job::Ablate { out, .. }
            | Job::InspectLambda { out, .. }
            | Job::SweepK { out, .. } => out,
        }
    }

    pub fn with_out(mut self, new: PathBuf) -> Self {
        match &mut self {
            Job::Gen { out, .. }
            | Job::Audit { out, .. }
            | Job::Train { out, .. }
            | Job::Eval { out, .. }
            | Job::Ablate { out, .. }
            | Job::InspectLambda { out, .. }
            | Job::SweepK { out, .. } => *out = new,
        }
        self
    }

    /// Where the manifest of this job goes.
    pub fn manifest_path(&self) -> PathBuf {
        match self {
            Job::Gen { out, .. } => {
                let mut s = out.clone().into_os_string();
                s.push(".manifest.json");
                PathBuf::from(s)
            }
            _ => self.out().join("manifest.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub job: Job,
    pub seed: Option<u64>,
    pub dataset_hash: Option<String>,
    pub outputs: Vec<PathBuf>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let m: RunManifest = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Invalid(format!("{}: not a run manifest: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(CliError::Invalid(format!(
                "{}: manifest version {}, expected {MANIFEST_VERSION}",
                path.display(),
                m.version
            )));
        }
        Ok(m)
    }
}

/// What a finished job reports back.
#[derive(Debug, Default)]
pub struct Outcome {
    pub seed: Option<u64>,
    pub dataset_hash: Option<String>,
    pub outputs: Vec<PathBuf>,
    /// Human-readable summary for the terminal.
    pub summary: String,
}

/// Runs `job`, then writes its manifest.
pub fn execute(job: &Job, log: &mut dyn FnMut(&str)) -> Result<(Outcome, RunManifest)> {
    let start = Instant::now();
    let out = run(job, log)?;
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        command: job.name().to_string(),
        job: job.clone(),
        seed: out.seed,
        dataset_hash: out.dataset_hash.clone(),
        outputs: out.outputs.clone(),
        duration_secs: start.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Failed(e.to_string()))?;
    write(&job.manifest_path(), text + "\n")?;
    Ok((out, manifest))
}

fn run(job: &Job, log: &mut dyn FnMut(&str)) -> Result<Outcome> {
    match job {
        Job::Gen {
            seed,
            count,
            grammar,
            out,
        } => {
            let cfg = GrammarConfig::from_text(grammar)?;
            let ds = Dataset::generate(*seed, *count, &cfg)?;
            let text = ds.to_jsonl();
            write(out, &text)?;
            Ok(Outcome {
                seed: Some(*seed),
                dataset_hash: Some(content_hash(text.as_bytes())),
                outputs: vec![out.clone()],
                summary: format!("wrote {count} documents to {}", out.display()),
            })
        }
        Job::Audit {
            seeds,
            start,
            grammar,
            data,
            out,
        } => run_audit(*seeds, *start, grammar, data.as_deref(), out),
        Job::Train {
            data,
            model,
            val_fraction,
            out,
        } => {
            let cfg = ModelConfig::from_text(model)?;
            let (ds, hash) = load_dataset(data)?;
            check_raster(&ds, &cfg)?;
            let (train, val) = split(&ds.documents, *val_fraction);
            let trainer = train_logged(cfg.clone(), train, val, log)?;
            let mut outputs = write_run(&trainer, out)?;
            let summary = match val.is_empty() {
                true => format!("trained {} epochs (no validation split)", trainer.epoch),
                false => {
                    let r = evaluate(&trainer.model, val)?;
                    let p = out.join("report.csv");
                    write(&p, r.to_csv())?;
                    outputs.push(p);
                    r.to_table()
                }
            };
            Ok(Outcome {
                seed: Some(cfg.seed),
                dataset_hash: Some(hash),
                outputs,
                summary,
            })
        }
        Job::Eval {
            checkpoint: ck,
            data,
            oracle,
            val_fraction,
            out,
        } => {
            let (ds, hash) = load_dataset(data)?;
            let (_, docs) = split(&ds.documents, *val_fraction);
            let docs = if docs.is_empty() { &ds.documents[..] } else { docs };
            let (report, seed) = if *oracle {
                (oracle_report(docs)?, None)
            } else {
                let t = checkpoint::from_bytes(&read(ck)?, None)?;
                check_raster(&ds, &t.model.config)?;
                (evaluate(&t.model, docs)?, Some(t.model.config.seed))
            };
            let (csv, txt) = (out.join("report.csv"), out.join("report.txt"));
            write(&csv, report.to_csv())?;
            write(&txt, report.to_table())?;
            Ok(Outcome {
                seed,
                dataset_hash: Some(hash),
                outputs: vec![csv, txt],
                summary: report.to_table(),
            })
        }
        Job::Ablate {
            data,
            model,
            seeds,
            val_fraction,
            out,
        } => {
            let base = ModelConfig::from_text(model)?;
            let (ds, hash) = load_dataset(data)?;
            check_raster(&ds, &base)?;
            let (train, val) = split(&ds.documents, *val_fraction);
            if val.is_empty() {
                return Err(CliError::Invalid("ablation needs a non-empty validation split".into()));
            }
            let result = ablate(&base, seeds, train, val, log)?;
            let mut outputs = Vec::new();
            for r in &result.runs {
                let dir = out.join(format!("{}-seed{}", r.variant, r.seed));
                outputs.extend(write_run(&r.trainer, &dir)?);
                let p = dir.join("report.csv");
                write(&p, r.report.to_csv())?;
                outputs.push(p);
                write_sub_manifest(&dir, data, &r.trainer.model.config, *val_fraction, &hash, &outputs)?;
            }
            let table = result.table();
            for (name, content) in [
                ("ablation.csv", result.to_csv()),
                ("ablation.txt", table.clone()),
                ("ablation_categories.csv", result.categories_csv()),
                ("convergence.svg", result.convergence_svg()),
            ] {
                let p = out.join(name);
                write(&p, content)?;
                outputs.push(p);
            }
            Ok(Outcome {
                seed: seeds.first().copied(),
                dataset_hash: Some(hash),
                outputs,
                summary: table,
            })
        }
        Job::InspectLambda {
            checkpoint: ck,
            data,
            val_fraction,
            out,
        } => {
            let t = checkpoint::from_bytes(&read(ck)?, None)?;
            let (ds, hash) = load_dataset(data)?;
            check_raster(&ds, &t.model.config)?;
            let (_, val) = split(&ds.documents, *val_fraction);
            let docs = if val.is_empty() { &ds.documents[..] } else { val };
            let values = collect_lambdas(&t.model, docs)?;
            let h = Histogram::new(&values, LAMBDA_BINS);
            let (csv, svgp) = (out.join("lambda_hist.csv"), out.join("lambda_hist.svg"));
            write(&csv, h.to_csv())?;
            write(&svgp, h.to_svg())?;
            Ok(Outcome {
                seed: Some(t.model.config.seed),
                dataset_hash: Some(hash),
                outputs: vec![csv, svgp],
                summary: h.summary(),
            })
        }
        Job::SweepK {
            data,
            model,
            values,
            val_fraction,
            out,
        } => {
            let base = ModelConfig::from_text(model)?;
            let (ds, hash) = load_dataset(data)?;
            check_raster(&ds, &base)?;
            let (train, val) = split(&ds.documents, *val_fraction);
            if val.is_empty() {
                return Err(CliError::Invalid(
                    "the K sweep needs a non-empty validation split".into(),
                ));
            }
            let sweep = sweep_k(&base, values, train, val, log)?;
            let mut outputs = Vec::new();
            for (k, t, _) in &sweep {
                let dir = out.join(format!("k{k}"));
                outputs.extend(write_run(t, &dir)?);
                write_sub_manifest(&dir, data, &t.model.config, *val_fraction, &hash, &outputs)?;
            }
            let row = sweep_row(&sweep.iter().map(|(k, _, r)| (*k, r.map)).collect::<Vec<_>>());
            let p = out.join("sweep_k.csv");
            write(&p, &row)?;
            outputs.push(p);
            Ok(Outcome {
                seed: Some(base.seed),
                dataset_hash: Some(hash),
                outputs,
                summary: row,
            })
        }
    }
}

fn run_audit(seeds: u64, start: u64, grammar: &str, data: Option<&Path>, out: &Path) -> Result<Outcome> {
    let mut violations = Vec::new();
    let (checked, hash) = match data {
        Some(path) => {
            let (ds, hash) = load_dataset(path)?;
            for doc in &ds.documents {
                violations.extend(audit(doc));
            }
            (ds.documents.len() as u64, Some(hash))
        }
        None => {
            let cfg = GrammarConfig::from_text(grammar)?;
            for s in start..start + seeds {
                violations.extend(audit(&generate(s, &cfg)?));
            }
            (seeds, None)
        }
    };
    let mut report = format!("checked {checked} documents, {} violations\n", violations.len());
    for v in &violations {
        let _ = writeln!(report, "seed {} {}: {}", v.seed, v.rule, v.detail);
    }
    let p = out.join("audit.txt");
    write(&p, &report)?;
    if !violations.is_empty() {
        return Err(CliError::Failed(report));
    }
    Ok(Outcome {
        seed: data.is_none().then_some(start),
        dataset_hash: hash,
        outputs: vec![p],
        summary: report,
    })
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, String)> {
    let bytes = read(path)?;
    let text =
        String::from_utf8(bytes).map_err(|_| CliError::Invalid(format!("{}: dataset is not UTF-8", path.display())))?;
    let ds = Dataset::from_jsonl(&text)?;
    Ok((ds, content_hash(text.as_bytes())))
}

fn check_raster(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    if ds.config.raster != cfg.raster {
        return Err(CliError::Invalid(format!(
            "dataset raster {} does not match model raster {}",
            ds.config.raster, cfg.raster
        )));
    }
    let most = ds.documents.iter().map(|d| d.elements.len()).max().unwrap_or(0);
    if most > cfg.queries {
        return Err(CliError::Invalid(format!(
            "a document has {most} elements but the model has only {} queries",
            cfg.queries
        )));
    }
    Ok(())
}

/// Splits off the last `fraction` of documents (rounded up) for validation.
pub fn split(docs: &[SyntheticDocument], fraction: f64) -> (&[SyntheticDocument], &[SyntheticDocument]) {
    let n_val = ((docs.len() as f64 * fraction).ceil() as usize).min(docs.len().saturating_sub(1));
    docs.split_at(docs.len() - n_val)
}

pub fn train_logged(
    cfg: ModelConfig,
    train: &[SyntheticDocument],
    val: &[SyntheticDocument],
    log: &mut dyn FnMut(&str),
) -> Result<Trainer> {
    let mut t = Trainer::new(cfg)?;
    let (epochs, tag) = (t.model.config.epochs, t.model.config.variant());
    let seed = t.model.config.seed;
    t.fit(train, val, |m| {
        log(&format!(
            "[{tag} seed {seed}] epoch {}/{epochs} loss {:.4} (vfl {:.4} l1 {:.4} giou {:.4}) val mAP {:.4} AP50 {:.4}",
            m.epoch, m.loss, m.vfl, m.box_l1, m.giou, m.map, m.ap50
        ))
    })?;
    Ok(t)
}

/// Checkpoint, metric history and convergence plot of one training run.
pub fn write_run(t: &Trainer, dir: &Path) -> Result<Vec<PathBuf>> {
    let (ck, csv, svgp) = (
        dir.join("checkpoint.lrck"),
        dir.join("metrics.csv"),
        dir.join("convergence.svg"),
    );
    write(&ck, checkpoint::to_bytes(t))?;
    write(&csv, history_csv(&t.history))?;
    let series = vec![Series {
        name: format!("{} val mAP", t.model.config.variant()),
        points: curve(&t.history),
    }];
    write(&svgp, line_plot("Validation mAP", "epoch", "mAP", &series))?;
    Ok(vec![ck, csv, svgp])
}

fn write_sub_manifest(
    dir: &Path,
    data: &Path,
    cfg: &ModelConfig,
    val_fraction: f64,
    hash: &str,
    outputs: &[PathBuf],
) -> Result<()> {
    let job = Job::Train {
        data: data.to_path_buf(),
        model: cfg.to_text(),
        val_fraction,
        out: dir.to_path_buf(),
    };
    let m = RunManifest {
        version: MANIFEST_VERSION,
        command: "train".into(),
        job,
        seed: Some(cfg.seed),
        dataset_hash: Some(hash.to_string()),
        outputs: outputs.iter().filter(|p| p.starts_with(dir)).cloned().collect(),
        duration_secs: 0.0,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Failed(e.to_string()))?;
    write(&dir.join("manifest.json"), text + "\n")
}

fn curve(h: &[EpochMetrics]) -> Vec<(f64, f64)> {
    h.iter().map(|m| (m.epoch as f64, m.map)).collect()
}

/// Ground truth fed back as confidence-1 detections.
pub fn oracle_report(docs: &[SyntheticDocument]) -> Result<EvalReport> {
    let names = category_names();
    let gts: Vec<_> = docs.iter().map(targets).collect();
    let dets: Vec<Vec<Detection>> = gts
        .iter()
        .map(|g| {
            g.iter()
                .map(|t| {
                    let mut scores = vec![0.0; names.len()];
                    scores[t.class] = 1.0;
                    Detection::from_scores(scores, t.bbox)
                })
                .collect()
        })
        .collect();
    Ok(evaluate_detections(&names, &dets, &gts)?)
}

pub const VARIANTS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

pub struct AblationRun {
    pub variant: &'static str,
    pub seed: u64,
    pub trainer: Trainer,
    pub report: EvalReport,
}

pub struct Ablation {
    pub runs: Vec<AblationRun>,
}

/// Trains the four flag combinations for every seed.
pub fn ablate(
    base: &ModelConfig,
    seeds: &[u64],
    train: &[SyntheticDocument],
    val: &[SyntheticDocument],
    log: &mut dyn FnMut(&str),
) -> Result<Ablation> {
    ablate_variants(base, &VARIANTS, seeds, train, val, log)
}

pub fn ablate_variants(
    base: &ModelConfig,
    variants: &[(bool, bool)],
    seeds: &[u64],
    train: &[SyntheticDocument],
    val: &[SyntheticDocument],
    log: &mut dyn FnMut(&str),
) -> Result<Ablation> {
    if seeds.is_empty() {
        return Err(CliError::Invalid("no seeds given".into()));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        for &(use_bspda, use_grc) in variants {
            let cfg = ModelConfig {
                use_bspda,
                use_grc,
                seed,
                ..base.clone()
            };
            let variant = cfg.variant();
            let trainer = train_logged(cfg, train, val, log)?;
            let report = evaluate(&trainer.model, val)?;
            runs.push(AblationRun {
                variant,
                seed,
                trainer,
                report,
            });
        }
    }
    Ok(Ablation { runs })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub bspda: bool,
    pub grc: bool,
    pub ap50: f64,
    pub ap75: f64,
    pub recall: f64,
    pub map: f64,
}

impl Ablation {
    fn of(&self, variant: &str) -> Vec<&AblationRun> {
        self.runs.iter().filter(|r| r.variant == variant).collect()
    }

    /// Seed-averaged rows in the fixed variant order.
    pub fn rows(&self) -> Vec<AblationRow> {
        let mut rows = Vec::new();
        for (b, g) in VARIANTS {
            let name = ModelConfig {
                use_bspda: b,
                use_grc: g,
                ..Default::default()
            }
            .variant();
            let runs = self.of(name);
            if runs.is_empty() {
                continue;
            }
            let mean =
                |f: &dyn Fn(&EvalReport) -> f64| runs.iter().map(|r| f(&r.report)).sum::<f64>() / runs.len() as f64;
            rows.push(AblationRow {
                variant: name,
                bspda: b,
                grc: g,
                ap50: mean(&|r| r.ap50),
                ap75: mean(&|r| r.ap75),
                recall: mean(&|r| r.ar),
                map: mean(&|r| r.map),
            });
        }
        rows
    }

    /// Seed-averaged mAP of one category for `variant`.
    pub fn category_map(&self, variant: &str, category: &str) -> Option<f64> {
        let runs = self.of(variant);
        let vals: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.report.category(category).map(|c| c.map()))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,bspda,grc,ap50,ap75,recall,map\n");
        for r in self.rows() {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.variant, r.bspda, r.grc, r.ap50, r.ap75, r.recall, r.map
            );
        }
        s
    }

    pub fn table(&self) -> String {
        let mark = |b: bool| if b { "yes" } else { "-" };
        let mut s = format!(
            "{:<10} {:>5} {:>5} {:>7} {:>7} {:>7} {:>7}\n",
            "variant", "BSPDA", "GRC", "AP50", "AP75", "Recall", "mAP"
        );
        for r in self.rows() {
            let _ = writeln!(
                s,
                "{:<10} {:>5} {:>5} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
                r.variant,
                mark(r.bspda),
                mark(r.grc),
                100.0 * r.ap50,
                100.0 * r.ap75,
                100.0 * r.recall,
                100.0 * r.map
            );
        }
        s
    }

    pub fn categories_csv(&self) -> String {
        let mut s = String::from("variant,seed,category,map,ap50\n");
        for r in &self.runs {
            for c in &r.report.categories {
                let _ = writeln!(s, "{},{},{},{:.6},{:.6}", r.variant, r.seed, c.name, c.map(), c.ap[0]);
            }
        }
        s
    }

    /// Seed-averaged validation mAP per epoch, one series per variant.
    pub fn convergence_svg(&self) -> String {
        let series: Vec<Series> = self
            .rows()
            .iter()
            .map(|row| {
                let runs = self.of(row.variant);
                let epochs = runs.iter().map(|r| r.trainer.history.len()).min().unwrap_or(0);
                let points = (0..epochs)
                    .map(|e| {
                        let m = runs.iter().map(|r| r.trainer.history[e].map).sum::<f64>() / runs.len() as f64;
                        ((e + 1) as f64, m)
                    })
                    .collect();
                Series {
                    name: row.variant.to_string(),
                    points,
                }
            })
            .collect();
        line_plot("Convergence (validation mAP)", "epoch", "mAP", &series)
    }
}

/// Gate values of the last decoder layer over every query of every document.
pub fn collect_lambdas(model: &Detector, docs: &[SyntheticDocument]) -> Result<Vec<f64>> {
    if !model.config.use_bspda {
        return Err(CliError::Invalid(
            "checkpoint has no relation-guided sampling gate (use_bspda = false)".into(),
        ));
    }
    let mut out = Vec::new();
    for d in docs {
        let inf = model.infer(&d.raster)?;
        out.extend(inf.lambdas.last().into_iter().flatten());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

impl Histogram {
    /// Equal-width bins over `[0, 1]`; 1.0 falls in the last bin.
    pub fn new(values: &[f64], bins: usize) -> Self {
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Histogram {
            counts,
            mean,
            std: var.sqrt(),
        }
    }

    pub fn occupied(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let k = self.counts.len() as f64;
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{:.3},{:.3},{c}", i as f64 / k, (i + 1) as f64 / k);
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let k = self.counts.len() as f64;
        let total = self.total().max(1) as f64;
        let mut pts = Vec::new();
        for (i, &c) in self.counts.iter().enumerate() {
            let f = c as f64 / total;
            pts.push((i as f64 / k, f));
            pts.push(((i + 1) as f64 / k, f));
        }
        line_plot(
            "Gate coefficient distribution",
            "lambda",
            "fraction of queries",
            &[Series {
                name: "lambda".into(),
                points: pts,
            }],
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "{} values, mean {:.4}, std {:.4}, {} of {} bins occupied\n",
            self.total(),
            self.mean,
            self.std,
            self.occupied(),
            self.counts.len()
        )
    }
}

/// One model per graph neighbor count.
pub fn sweep_k(
    base: &ModelConfig,
    values: &[usize],
    train: &[SyntheticDocument],
    val: &[SyntheticDocument],
    log: &mut dyn FnMut(&str),
) -> Result<Vec<(usize, Trainer, EvalReport)>> {
    if values.is_empty() {
        return Err(CliError::Invalid("no K values given".into()));
    }
    let cfgs = values
        .iter()
        .map(|&k| {
            let c = ModelConfig {
                k_nn: k,
                use_grc: true,
                ..base.clone()
            };
            c.validate().map(|_| (k, c))
        })
        .collect::<layoutrel::Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (k, c) in cfgs {
        let t = train_logged(c, train, val, log)?;
        let r = evaluate(&t.model, val)?;
        out.push((k, t, r));
    }
    Ok(out)
}

/// `K,<k1>,<k2>,...` header and a `mAP,...` row.
pub fn sweep_row(results: &[(usize, f64)]) -> String {
    let ks: Vec<String> = results.iter().map(|(k, _)| k.to_string()).collect();
    let ms: Vec<String> = results.iter().map(|(_, m)| format!("{:.6}", m)).collect();
    format!("K,{}\nmAP,{}\n", ks.join(","), ms.join(","))
}
