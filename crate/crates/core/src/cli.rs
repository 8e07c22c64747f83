//! The `fcbm` command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numeric
//! failure. Every error is reported on stderr as one line starting with
//! `error(<kind>):`.
//!
//! Tunable options can also come from a JSON file passed with `--config`;
//! flags win over the file, the file wins over built-in defaults, and unknown
//! keys are rejected. Keys use the snake_case field names stored in
//! checkpoints (`nec_threshold`, `decay_rate`, ...).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::checkpoint::{load_checkpoint, save_checkpoint, HeadCheckpoint};
use crate::error::{FcbmError, Result};
use crate::gradcheck::{run_gradcheck, DEFAULT_INSTANCES};
use crate::hypernet::WeightMode;
use crate::io::{default_embeddings_path, load_concept_set, ConceptSet, Dataset, DatasetManifest};
use crate::metrics::{explain_sample, nec, render_report, ReportFormat};
use crate::pipeline::{concept_values, evaluate_pool, fresh_clip_values, ConceptValues, ValueSource};
use crate::projector::{
    clip_concept_features, column_cosines, load_projector, project_concepts, save_projector, train_projector,
    ProjectorConfig,
};
use crate::trainer::{finetune, train_head, AblationMode, HeadData, TauInit, TrainConfig, TrainLog};

#[derive(Debug, Parser)]
#[command(name = "fcbm", version, about = "Flexible concept bottleneck models")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the linear concept projector to CLIP-derived concept values.
    TrainProjector(TrainProjectorArgs),
    /// Train the hypernetwork head and temperature.
    TrainHead(TrainHeadArgs),
    /// Accuracy and NEC of a checkpoint on a split.
    Eval(EvalArgs),
    /// Zero-shot evaluation on a replacement concept pool.
    SwapConcepts(SwapArgs),
    /// Adapt a head to a replacement concept pool.
    Finetune(FinetuneArgs),
    /// Per-concept contributions behind one prediction.
    Explain(ExplainArgs),
    /// Number of effective concepts of a checkpoint.
    Nec(NecArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct TrainProjectorArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Concept names file; embeddings are read from the `.fcbt` beside it.
    #[arg(long)]
    concepts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectorOverrides {
    epochs: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainHeadArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    concepts: PathBuf,
    #[arg(long)]
    projector: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    nec_threshold: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    /// `auto` or a positive number.
    #[arg(long)]
    tau0: Option<TauInit>,
    /// full, fixed-temp or hard.
    #[arg(long)]
    mode: Option<AblationMode>,
    #[arg(long)]
    hard_k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Start from the large-dataset defaults (500 epochs, decay 0.92).
    #[arg(long)]
    large_scale: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadOverrides {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    decay_rate: Option<f64>,
    nec_threshold: Option<f64>,
    tau0: Option<TauInit>,
    seed: Option<u64>,
    mode: Option<AblationMode>,
    hard_k: Option<usize>,
    hidden: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Generate weights for this pool instead of using the stored ones.
    #[arg(long)]
    concepts: Option<PathBuf>,
    /// Force aligned (swap-mode) weight generation.
    #[arg(long, requires = "concepts")]
    swap: bool,
}

#[derive(Debug, Args)]
struct SwapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    new_concepts: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    new_concepts: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Also refit the projector on the new pool before fine-tuning.
    #[arg(long)]
    retrain_projector: bool,
    #[arg(long)]
    projector_epochs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FinetuneOverrides {
    epochs: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
    retrain_projector: Option<bool>,
    projector_epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    sample: usize,
    #[arg(long, default_value_t = 10)]
    topk: usize,
    #[arg(long, default_value = "text-bars")]
    format: ReportFormat,
    /// Longest bar in text-bars output, in characters.
    #[arg(long, default_value_t = 40)]
    width: usize,
    #[arg(long)]
    concepts: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct NecArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_INSTANCES)]
    instances: usize,
}

struct Ui<'a> {
    json: bool,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Ui<'_> {
    fn emit(&mut self, value: Value, text: String) -> Result<()> {
        let s = if self.json {
            format!("{}\n", serde_json::to_string(&value).expect("json value"))
        } else {
            text
        };
        self.out
            .write_all(s.as_bytes())
            .map_err(|e| FcbmError::io("<stdout>", e))
    }

    fn warn(&mut self, msg: &str) {
        let _ = writeln!(self.err, "warning: {msg}");
    }
}

/// Parses `args` (including the program name) and runs one subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            if !e.use_stderr() {
                let _ = out.write_all(text.as_bytes());
                return 0;
            }
            let text = text.strip_prefix("error: ").unwrap_or(&text);
            let _ = write!(err, "error(usage): {text}");
            return 2;
        }
    };
    let mut ui = Ui {
        json: cli.json,
        out,
        err,
    };
    let result = match cli.command {
        Command::TrainProjector(a) => cmd_train_projector(a, &mut ui),
        Command::TrainHead(a) => cmd_train_head(a, &mut ui),
        Command::Eval(a) => cmd_eval(a, &mut ui),
        Command::SwapConcepts(a) => cmd_swap(a, &mut ui),
        Command::Finetune(a) => cmd_finetune(a, &mut ui),
        Command::Explain(a) => cmd_explain(a, &mut ui),
        Command::Nec(a) => cmd_nec(a, &mut ui),
        Command::Gradcheck(a) => cmd_gradcheck(a, &mut ui),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(ui.err, "error({}): {msg}", e.kind());
            e.exit_code()
        }
    }
}

fn load_overrides<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| FcbmError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FcbmError::Format(format!("{}: {e}", path.display())))
}

fn load_pool(path: &Path) -> Result<ConceptSet> {
    load_concept_set(path, default_embeddings_path(path))
}

fn load_split(manifest: &Path) -> Result<Dataset> {
    DatasetManifest::load(manifest)?.load_data()
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| FcbmError::io(path, e))
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn cmd_train_projector(a: TrainProjectorArgs, ui: &mut Ui) -> Result<()> {
    let file: ProjectorOverrides = load_overrides(a.config.as_deref())?;
    let d = ProjectorConfig::default();
    let cfg = ProjectorConfig {
        epochs: a.epochs.or(file.epochs).unwrap_or(d.epochs),
        lr: a.lr.or(file.lr).unwrap_or(d.lr),
        seed: a.seed.or(file.seed).unwrap_or(d.seed),
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
    };
    let data = load_split(&a.manifest)?;
    let pool = load_pool(&a.concepts)?;
    let target = clip_concept_features(&data.clip, pool.embeddings())?;
    let fit = train_projector(&data.backbone, &target, &pool.fingerprint(), &cfg)?;
    let weights = fit.weights.round_to_f32();
    let stats = fit.stats.round_to_f32();
    save_projector(&weights, &stats, &a.out)?;

    let mut log = String::new();
    for (epoch, loss) in fit.losses.iter().enumerate() {
        log.push_str(&json!({ "epoch": epoch, "loss": loss }).to_string());
        log.push('\n');
    }
    let log_file = log_path(&a.out);
    write_text(&log_file, &log)?;

    let cos = column_cosines(&weights.predict(&data.backbone)?, &target)?;
    let mean_cos = cos.iter().sum::<f64>() / cos.len().max(1) as f64;
    let final_loss = fit.losses.last().copied();
    ui.emit(
        json!({
            "projector": a.out,
            "log": log_file,
            "config": cfg,
            "concepts": pool.len(),
            "final_loss": final_loss,
            "mean_cosine": mean_cos,
        }),
        format!(
            "projector: {} concepts, {} epochs, final loss {}, mean cosine {:.4}\nwrote {}\nlog {}\n",
            pool.len(),
            cfg.epochs,
            final_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
            mean_cos,
            a.out.display(),
            log_file.display()
        ),
    )
}

fn head_config(a: &TrainHeadArgs) -> Result<TrainConfig> {
    let file: HeadOverrides = load_overrides(a.config.as_deref())?;
    let d = if a.large_scale {
        TrainConfig::large_scale()
    } else {
        TrainConfig::default()
    };
    let cfg = TrainConfig {
        epochs: a.epochs.or(file.epochs).unwrap_or(d.epochs),
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        lr: a.lr.or(file.lr).unwrap_or(d.lr),
        decay_rate: a.decay.or(file.decay_rate).unwrap_or(d.decay_rate),
        nec_threshold: a.nec_threshold.or(file.nec_threshold).unwrap_or(d.nec_threshold),
        tau0: a.tau0.or(file.tau0).unwrap_or(d.tau0),
        seed: a.seed.or(file.seed).unwrap_or(d.seed),
        mode: a.mode.or(file.mode).unwrap_or(d.mode),
        hard_k: a.hard_k.or(file.hard_k).unwrap_or(d.hard_k),
        hidden: a.hidden.or(file.hidden).unwrap_or(d.hidden),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn finish_training(
    ui: &mut Ui,
    ckpt: &HeadCheckpoint,
    log: &TrainLog,
    aborted: Option<String>,
    out: &Path,
    what: &str,
) -> Result<()> {
    save_checkpoint(ckpt, out)?;
    let log_file = log_path(out);
    write_text(&log_file, &log.to_jsonl())?;
    if let Some(msg) = aborted {
        return Err(FcbmError::Numeric(format!(
            "{msg}; last good checkpoint written to {}",
            out.display()
        )));
    }
    let last = log.last();
    let (acc, nec_value) = last.map_or((None, nec(&ckpt.weights)), |r| (Some(r.acc), nec(&ckpt.weights)));
    ui.emit(
        json!({
            "checkpoint": out,
            "log": log_file,
            "epochs": log.records.len(),
            "train_accuracy": acc,
            "nec": nec_value,
            "tau": ckpt.tau,
            "decay_active": ckpt.decay_active,
            "config": ckpt.config,
        }),
        format!(
            "{what}: {} epochs, train accuracy {}, NEC {}, tau {:.6}\nwrote {}\nlog {}\n",
            log.records.len(),
            acc.map_or("n/a".into(), pct),
            nec_value,
            ckpt.tau,
            out.display(),
            log_file.display()
        ),
    )
}

fn cmd_train_head(a: TrainHeadArgs, ui: &mut Ui) -> Result<()> {
    let cfg = head_config(&a)?;
    let data = load_split(&a.manifest)?;
    let pool = load_pool(&a.concepts)?;
    let (projector, stats) = load_projector(&a.projector)?;
    if projector.fingerprint != pool.fingerprint() {
        return Err(FcbmError::Data(format!(
            "{} was trained on a different concept pool than {}",
            a.projector.display(),
            a.concepts.display()
        )));
    }
    let values = project_concepts(&projector, &stats, &data.backbone)?;
    let outcome = train_head(
        &HeadData {
            values: &values,
            labels: &data.labels,
            num_classes: data.num_classes,
        },
        &pool,
        stats,
        &cfg,
    )?;
    let mut ckpt = outcome.checkpoint;
    ckpt.projector = Some(projector.round_to_f32());
    finish_training(ui, &ckpt, &outcome.log, outcome.aborted, &a.out, "head")
}

/// Concept values for the checkpoint's own pool without its embeddings.
fn stored_values(ckpt: &HeadCheckpoint, data: &Dataset) -> Result<ConceptValues> {
    match &ckpt.projector {
        Some(p) if p.fingerprint == ckpt.fingerprint => Ok(ConceptValues {
            values: project_concepts(p, &ckpt.value_stats, &data.backbone)?,
            raw: p.predict(&data.backbone)?,
            stats: ckpt.value_stats.clone(),
            source: ValueSource::Projector,
        }),
        _ => Err(FcbmError::Data(
            "checkpoint has no projector for its concept pool; pass --concepts".into(),
        )),
    }
}

fn emit_eval(ui: &mut Ui, report: &crate::pipeline::EvalReport) -> Result<()> {
    if let Some(w) = &report.warning {
        ui.warn(w);
    }
    ui.emit(
        serde_json::to_value(report).expect("report serializes"),
        format!(
            "accuracy {}  NEC {}  ({} weights, {} samples)\n",
            pct(report.accuracy),
            report.nec,
            match report.mode {
                WeightMode::Trained => "trained",
                WeightMode::Swap => "swap",
            },
            report.samples
        ),
    )
}

fn cmd_eval(a: EvalArgs, ui: &mut Ui) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_split(&a.manifest)?;
    let report = match &a.concepts {
        Some(path) => {
            let pool = load_pool(path)?;
            let mode = if a.swap {
                WeightMode::Swap
            } else {
                ckpt.natural_mode(&pool)
            };
            evaluate_pool(&ckpt, &pool, &data, mode)?.0
        }
        None => {
            let values = stored_values(&ckpt, &data)?;
            let logits = crate::hypernet::head_logits(&values.values, &ckpt.weights)?;
            crate::pipeline::EvalReport {
                accuracy: crate::metrics::accuracy(&logits, &data.labels),
                nec: nec(&ckpt.weights),
                mode: if ckpt.finetuned {
                    WeightMode::Swap
                } else {
                    WeightMode::Trained
                },
                values: values.source,
                samples: data.len(),
                diagnostics: 0,
                warning: None,
            }
        }
    };
    emit_eval(ui, &report)
}

fn cmd_swap(a: SwapArgs, ui: &mut Ui) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let pool = load_pool(&a.new_concepts)?;
    let data = load_split(&a.manifest)?;
    let (report, _) = evaluate_pool(&ckpt, &pool, &data, WeightMode::Swap)?;
    if report.diagnostics > 0 {
        ui.warn(&format!(
            "{} degenerate dimensions or rows hit the alignment floors",
            report.diagnostics
        ));
    }
    emit_eval(ui, &report)
}

fn cmd_finetune(a: FinetuneArgs, ui: &mut Ui) -> Result<()> {
    let file: FinetuneOverrides = load_overrides(a.config.as_deref())?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let pool = load_pool(&a.new_concepts)?;
    let data = load_split(&a.manifest)?;
    let epochs = a.epochs.or(file.epochs).unwrap_or(1);
    let mut cfg = ckpt.config.clone();
    cfg.seed = a.seed.or(file.seed).unwrap_or(cfg.seed);
    cfg.lr = a.lr.or(file.lr).unwrap_or(cfg.lr);
    let retrain = a.retrain_projector || file.retrain_projector.unwrap_or(false);

    let (values, stats, projector) = if retrain {
        let pcfg = ProjectorConfig {
            epochs: a
                .projector_epochs
                .or(file.projector_epochs)
                .unwrap_or(ProjectorConfig::default().epochs),
            lr: cfg.lr,
            seed: cfg.seed,
            ..ProjectorConfig::default()
        };
        let target = clip_concept_features(&data.clip, pool.embeddings())?;
        let fit = train_projector(&data.backbone, &target, &pool.fingerprint(), &pcfg)?;
        let weights = fit.weights.round_to_f32();
        let stats = fit.stats.round_to_f32();
        let values = project_concepts(&weights, &stats, &data.backbone)?;
        (values, stats, Some(weights))
    } else {
        let v = fresh_clip_values(&pool, &data.clip)?;
        (v.values, v.stats, None)
    };
    let outcome = finetune(
        &ckpt,
        &pool,
        &HeadData {
            values: &values,
            labels: &data.labels,
            num_classes: data.num_classes,
        },
        stats,
        epochs,
        &cfg,
    )?;
    let mut new_ckpt = outcome.checkpoint;
    if projector.is_some() {
        new_ckpt.projector = projector;
    }
    finish_training(ui, &new_ckpt, &outcome.log, outcome.aborted, &a.out, "fine-tuned head")
}

fn cmd_explain(a: ExplainArgs, ui: &mut Ui) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_split(&a.manifest)?;
    if a.sample >= data.len() {
        return Err(FcbmError::Data(format!(
            "sample {} out of range for {} samples",
            a.sample,
            data.len()
        )));
    }
    let (weights, names, values) = match &a.concepts {
        Some(path) => {
            let pool = load_pool(path)?;
            if let Some(w) = ckpt.pool_warning(&pool) {
                ui.warn(&w);
            }
            let generated = ckpt.weights_for(&pool, ckpt.natural_mode(&pool))?;
            let values = concept_values(&ckpt, &pool, &data)?;
            (generated.weights, pool.names().to_vec(), values)
        }
        None => (ckpt.weights.clone(), ckpt.concepts.clone(), stored_values(&ckpt, &data)?),
    };
    let report = explain_sample(
        a.sample,
        values.values.row(a.sample),
        Some(values.raw.row(a.sample)),
        &weights,
        &names,
        Some(data.labels[a.sample]),
        a.topk,
    )?;
    let format = if ui.json { ReportFormat::Json } else { a.format };
    let text = render_report(&[report], format, a.width)?;
    match &a.out {
        Some(path) => {
            write_text(path, &text)?;
            ui.emit(json!({ "report": path }), format!("wrote {}\n", path.display()))
        }
        None => ui
            .out
            .write_all(text.as_bytes())
            .map_err(|e| FcbmError::io("<stdout>", e)),
    }
}

fn cmd_nec(a: NecArgs, ui: &mut Ui) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let value = nec(&ckpt.weights);
    ui.emit(json!({ "nec": value }), format!("NEC: {value}\n"))
}

fn cmd_gradcheck(a: GradcheckArgs, ui: &mut Ui) -> Result<()> {
    let report = run_gradcheck(a.seed, a.instances)?;
    let mut text = String::new();
    for c in &report.checks {
        text.push_str(&format!(
            "{:<18} {:>4} instances  max rel err {:.3e}  {}\n",
            c.name,
            c.instances,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAILED" }
        ));
    }
    ui.emit(serde_json::to_value(&report).expect("report serializes"), text)?;
    let failed: Vec<&str> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(FcbmError::Numeric(format!(
            "gradient check failed: {} (tolerance {:e})",
            failed.join(", "),
            report.tolerance
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("fcbm").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        let (code, _, err) = run_capture(&["frobnicate"]);
        assert_eq!(code, 2);
        assert!(err.starts_with("error(usage):"), "{err}");
        assert!(err.contains("Usage:"));
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("train-head"));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let (code, _, err) = run_capture(&["nec", "--checkpoint", "/nonexistent/ckpt.fcbm"]);
        assert_eq!(code, 3);
        assert!(err.starts_with("error(io):"), "{err}");
    }

    #[test]
    fn config_file_precedence_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("cfg.json");
        std::fs::write(&cfg, r#"{"epochs": 7, "nec_threshold": 12, "seed": 3}"#).unwrap();
        let cli = Cli::try_parse_from([
            "fcbm", "train-head", "--manifest", "m", "--concepts", "c", "--projector", "p", "--out", "o",
            "--seed", "9", "--config",
        ]
        .into_iter()
        .map(String::from)
        .chain([cfg.display().to_string()]))
        .unwrap();
        let Command::TrainHead(a) = cli.command else { panic!() };
        let merged = head_config(&a).unwrap();
        assert_eq!(merged.epochs, 7);
        assert_eq!(merged.nec_threshold, 12.0);
        assert_eq!(merged.seed, 9);
        assert_eq!(merged.decay_rate, 0.998);

        std::fs::write(&cfg, r#"{"epochs": 7, "temperature": 2}"#).unwrap();
        assert!(matches!(head_config(&a), Err(FcbmError::Format(_))));
    }

    #[test]
    fn gradcheck_runs_and_passes() {
        let (code, out, _) = run_capture(&["gradcheck", "--instances", "5"]);
        assert_eq!(code, 0, "{out}");
        assert_eq!(out.lines().count(), 6);
        let (code, out, _) = run_capture(&["--json", "gradcheck", "--instances", "5"]);
        assert_eq!(code, 0);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["checks"].as_array().unwrap().len(), 6);
    }
}
