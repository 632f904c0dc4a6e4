//! Commands behind the `xnet` binary: synthetic data generation, training,
//! evaluation (including the ablation table merge), prediction, parameter
//! accounting and the gradient-check suite.
//!
//! Every command writes its human-readable report to a caller-supplied sink
//! and fails with a [`CliError`] carrying the process exit code, so the
//! binary and the integration tests share one code path.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use xnet_core::data::{center_crop, manifest_path, network_size, normalize_intensity, split_folds, Manifest, VolumeDataset};
use xnet_core::metrics::{evaluate_volumes, merge_table, Mask, MetricReport};
use xnet_core::model::Arch;
use xnet_core::pgm::Graymap;
use xnet_core::synth::{generate_synthetic, SynthConfig};
use xnet_core::training::{load_model, Checkpoint, TrainConfig, Trainer};
use xnet_core::verify::gradcheck_suite;
use xnet_core::{Error, Model, ModelConfig, Module, Tensor};

/// Process exit codes; a stable contract for scripts.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
    pub const CHECKPOINT: i32 = 5;
    pub const VERIFICATION: i32 = 6;
}

/// Seed used to instantiate models whose weights are irrelevant (counting).
const COUNT_SEED: u64 = 0;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    /// Exit code implied by the kind of error alone.
    pub fn from_core(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => exit::IO,
            Error::Divergence { .. } | Error::NonFinite { .. } => exit::DIVERGENCE,
            Error::Corrupt { .. } | Error::Version { .. } | Error::DType { .. } => exit::CHECKPOINT,
            _ => exit::USAGE,
        };
        CliError::new(code, e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (exit {})", self.message, self.code)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Maps any error to a fixed exit code, keeping its message.
fn code<E: fmt::Display>(code: i32) -> impl Fn(E) -> CliError {
    move |e| CliError::new(code, e.to_string())
}

fn checkpoint_err(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| CliError::new(exit::CHECKPOINT, format!("checkpoint {}: {e}", path.display()))
}

fn emit(out: &mut dyn Write, text: impl AsRef<str>) -> CliResult {
    writeln!(out, "{}", text.as_ref()).map_err(code(exit::IO))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(code(exit::USAGE))?;
    fs::write(path, text + "\n").map_err(|e| CliError::new(exit::IO, format!("{}: {e}", path.display())))
}

/// One experiment: model, optimisation schedule, dataset and output
/// directory. Relative paths in a config file resolve against the file's
/// own directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Dataset directory (holding `manifest.json`) or manifest file.
    pub data: PathBuf,
    /// Directory receiving checkpoints, history and metrics.
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::new(exit::USAGE, format!("config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::new(exit::USAGE, format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.out] {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult {
        if self.data.as_os_str().is_empty() {
            return Err(CliError::new(exit::USAGE, "no dataset given (config `data` or --data)"));
        }
        if self.out.as_os_str().is_empty() {
            return Err(CliError::new(exit::USAGE, "no output directory given (config `out` or --out)"));
        }
        self.model.validate().map_err(CliError::from_core)?;
        self.train.validate().map_err(CliError::from_core)
    }
}

/// Short description of a model configuration, e.g. `xnet+fsm`.
pub fn model_label(model: &ModelConfig) -> String {
    let mut label = model.arch.name().to_string();
    if model.fsm_enabled {
        label.push_str("+fsm");
    }
    label
}

#[derive(Debug, Parser)]
#[command(name = "xnet", version, about = "Lightweight lesion segmentation: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic lesion dataset with a manifest.
    Synth(SynthArgs),
    /// Train one cross-validation fold.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a validation fold, or merge metric files into a table.
    Eval(EvalArgs),
    /// Segment a single PGM image.
    Predict(PredictArgs),
    /// Trainable parameter counts of X-Net and the U-Net baseline.
    Params(ParamsArgs),
    /// Finite-difference gradient checks of every layer and the full network.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub volumes: usize,
    #[arg(long, default_value_t = 10)]
    pub slices: usize,
    /// Slice size as HEIGHTxWIDTH; both must be multiples of 16.
    #[arg(long, default_value = "64x64")]
    pub size: String,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Produce lesion-free volumes.
    #[arg(long)]
    pub no_lesions: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (JSON); flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long, value_parser = parse_arch)]
    pub arch: Option<Arch>,
    /// Train without the feature similarity module.
    #[arg(long)]
    pub no_fsm: bool,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint (normally `<out>/last.xnck`).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "merge")]
    pub model: Option<PathBuf>,
    #[arg(long, required_unless_present = "merge")]
    pub data: Option<PathBuf>,
    /// Validation fold; defaults to the fold the checkpoint was trained on.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Metrics file to write (or, with --merge, the table file).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Row label in merged tables; defaults to the model description.
    #[arg(long)]
    pub label: Option<String>,
    /// Merge existing metrics files into one table instead of evaluating.
    #[arg(long, num_args = 1.., conflicts_with_all = ["model", "data", "fold", "label"])]
    pub merge: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the probability map as an XTEN tensor.
    #[arg(long)]
    pub prob: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Experiment config whose model widths are counted; defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub width_divisor: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    s.parse::<Arch>().map_err(|e| e.to_string())
}

/// Parses `HxW`.
pub fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::new(exit::USAGE, format!("size {s:?} is not HEIGHTxWIDTH"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Synth(a) => synth(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Eval(a) if !a.merge.is_empty() => merge(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Predict(a) => predict(&a, out),
        Command::Params(a) => params(&a, out),
        Command::Gradcheck(a) => gradcheck(&a, out),
    }
}

pub fn synth(args: &SynthArgs, out: &mut dyn Write) -> CliResult {
    let (height, width) = parse_size(&args.size)?;
    let cfg = SynthConfig {
        volumes: args.volumes,
        slices: args.slices,
        height,
        width,
        seed: args.seed,
        lesions: !args.no_lesions,
    };
    cfg.validate().map_err(CliError::from_core)?;
    let summary = generate_synthetic(&cfg, &args.out).map_err(CliError::from_core)?;
    write_json(&args.out.join("synth_config.json"), &cfg)?;
    emit(out, format!("config {}", serde_json::to_string(&cfg).map_err(code(exit::USAGE))?))?;
    emit(
        out,
        format!(
            "wrote {} volumes, {} slices of {height}x{width} to {}; lesion pixel fraction {:.4}",
            summary.volumes,
            summary.slices,
            args.out.display(),
            summary.lesion_fraction
        ),
    )
}

/// Config file (if any) with every command-line override applied.
pub fn resolve_train_config(args: &TrainArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &args.data {
        cfg.data = d.clone();
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if let Some(f) = args.fold {
        cfg.train.fold = f;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if args.deterministic {
        cfg.train.deterministic = true;
    }
    if let Some(arch) = args.arch {
        cfg.model.arch = arch;
        // the baseline is the plain architecture; attach the module via the
        // config file to train a U-Net with it
        if arch == Arch::Unet {
            cfg.model.fsm_enabled = false;
        }
    }
    if args.no_fsm {
        cfg.model.fsm_enabled = false;
        cfg.model.fsm_locations.clear();
    }
    Ok(cfg)
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = resolve_train_config(args)?;
    let resumed = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::<f32>::load(path).map_err(checkpoint_err(path))?;
            // the run's identity comes from the checkpoint; only the epoch
            // budget may be extended
            cfg.model = ckpt.model.config().clone();
            cfg.train = TrainConfig {
                epochs: cfg.train.epochs,
                ..ckpt.train.clone()
            };
            Some(ckpt)
        }
        None => None,
    };
    cfg.validate()?;
    // the logged config must reproduce the run from any working directory
    for p in [&mut cfg.data, &mut cfg.out] {
        *p = std::path::absolute(&*p).map_err(code(exit::IO))?;
    }
    let manifest_file = manifest_path(&cfg.data);
    if !manifest_file.is_file() {
        return Err(CliError::new(
            exit::USAGE,
            format!("dataset manifest {} not found", manifest_file.display()),
        ));
    }
    let manifest = Manifest::load(&manifest_file).map_err(code(exit::USAGE))?;
    let dataset = VolumeDataset::load(&manifest_file, None).map_err(CliError::from_core)?;
    let folds = split_folds(&manifest, cfg.train.folds, cfg.train.seed).map_err(code(exit::USAGE))?;

    fs::create_dir_all(&cfg.out).map_err(|e| CliError::new(exit::IO, format!("{}: {e}", cfg.out.display())))?;
    write_json(&cfg.out.join("config.json"), &cfg)?;
    emit(out, format!("config {}", serde_json::to_string(&cfg).map_err(code(exit::USAGE))?))?;

    let state = match resumed {
        Some(c) => c,
        None => Checkpoint::fresh(cfg.model.clone(), cfg.train.clone()).map_err(CliError::from_core)?,
    };
    let mut trainer = Trainer::new(state, &dataset, &folds)
        .map_err(CliError::from_core)?
        .with_output_dir(&cfg.out)
        .map_err(CliError::from_core)?;
    let best_file = cfg.out.join("best.xnck");
    if args.resume.is_some() && best_file.is_file() {
        let best = Checkpoint::<f32>::load(&best_file).map_err(checkpoint_err(&best_file))?;
        trainer = trainer.with_best(best);
    }
    let label = model_label(&cfg.model);
    emit(
        out,
        format!(
            "training {label} ({} parameters) on fold {}/{}: {} training and {} validation volumes",
            trainer.state.model.count_params(),
            cfg.train.fold,
            cfg.train.folds,
            trainer.train_volumes().len(),
            trainer.val_volumes().len()
        ),
    )?;
    let start = Instant::now();
    while trainer.state.epoch() < cfg.train.epochs {
        let r = trainer.run_epoch().map_err(CliError::from_core)?;
        emit(
            out,
            format!(
                "epoch {:>3}  lr {:.1e}  train_loss {:.4}  val_loss {:.4}  val_dice {:.4}  ({:.0}s)",
                r.epoch,
                r.lr,
                r.train_loss,
                r.val_loss,
                r.val_dice,
                start.elapsed().as_secs_f64()
            ),
        )?;
    }
    let mut report = match trainer.last_report() {
        Some(r) => r.clone(),
        None => {
            let val = trainer.val_volumes().to_vec();
            evaluate_volumes(&mut trainer.state.model, &dataset, &val, &label).map_err(CliError::from_core)?
        }
    };
    report.label = label.clone();
    report.save(&cfg.out.join("metrics.json")).map_err(CliError::from_core)?;
    emit(out, format!("final validation ({label}, fold {}): {}", cfg.train.fold, report.summary_line()))?;
    if let Some((i, best)) = trainer
        .history()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.val_dice.total_cmp(&b.1.val_dice).then(b.0.cmp(&a.0)))
    {
        emit(out, format!("best validation Dice {:.4} at epoch {}", best.val_dice, i + 1))?;
    }
    Ok(())
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let (Some(model_path), Some(data)) = (&args.model, &args.data) else {
        return Err(CliError::new(exit::USAGE, "eval needs --model and --data (or --merge)"));
    };
    let ckpt = Checkpoint::<f32>::load(model_path).map_err(checkpoint_err(model_path))?;
    let manifest_file = manifest_path(data);
    if !manifest_file.is_file() {
        return Err(CliError::new(
            exit::USAGE,
            format!("dataset manifest {} not found", manifest_file.display()),
        ));
    }
    let manifest = Manifest::load(&manifest_file).map_err(code(exit::USAGE))?;
    let dataset = VolumeDataset::load(&manifest_file, None).map_err(CliError::from_core)?;
    let fold = args.fold.unwrap_or(ckpt.train.fold);
    let folds = split_folds(&manifest, ckpt.train.folds, ckpt.train.seed).map_err(code(exit::USAGE))?;
    let (_, val) = dataset.split(&folds, fold).map_err(code(exit::USAGE))?;
    let label = args.label.clone().unwrap_or_else(|| model_label(ckpt.model.config()));
    emit(
        out,
        format!(
            "config {}",
            serde_json::json!({
                "model": model_path,
                "data": data,
                "fold": fold,
                "folds": ckpt.train.folds,
                "split_seed": ckpt.train.seed,
                "label": label,
            })
        ),
    )?;
    let mut model = ckpt.model;
    let report = evaluate_volumes(&mut model, &dataset, &val, &label)
        .map_err(|e| CliError::new(exit::CHECKPOINT, format!("model does not fit the data: {e}")))?;
    for v in &report.volumes {
        emit(
            out,
            format!(
                "  {:<12} Dice {:.4}  IoU {:.4}  precision {:.4}  recall {:.4}",
                v.volume_id, v.dice, v.iou, v.precision, v.recall
            ),
        )?;
    }
    emit(out, format!("{label} fold {fold} ({} volumes): {}", report.volumes.len(), report.summary_line()))?;
    if let Some(path) = &args.out {
        report.save(path).map_err(CliError::from_core)?;
    }
    Ok(())
}

/// `(base, base+fsm)` label pairs present among the reports, with the
/// Dice difference of adding the module.
pub fn fsm_effects(reports: &[MetricReport]) -> Vec<(String, f64)> {
    reports
        .iter()
        .filter_map(|with| {
            let base = with.label.strip_suffix("+fsm")?;
            let without = reports.iter().find(|r| r.label == base)?;
            Some((base.to_string(), with.aggregate.dice - without.aggregate.dice))
        })
        .collect()
}

pub fn merge(args: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let reports = args
        .merge
        .iter()
        .map(|p| MetricReport::load(p).map_err(CliError::from_core))
        .collect::<CliResult<Vec<_>>>()?;
    let table = merge_table(&reports);
    emit(out, table.trim_end())?;
    for (base, delta) in fsm_effects(&reports) {
        let verdict = if delta >= 0.0 { "no degradation" } else { "degradation" };
        emit(out, format!("feature similarity module on {base}: Dice {delta:+.4} ({verdict})"))?;
    }
    if let Some(path) = &args.out {
        fs::write(path, &table).map_err(|e| CliError::new(exit::IO, format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn predict(args: &PredictArgs, out: &mut dyn Write) -> CliResult {
    let mut model: Model<f32> = load_model(&args.model).map_err(checkpoint_err(&args.model))?;
    let img = Graymap::read(&args.input).map_err(|e| match e {
        Error::Io { .. } => CliError::from_core(e),
        other => CliError::new(exit::USAGE, other.to_string()),
    })?;
    let (h, w) = (network_size(img.height), network_size(img.width));
    if h == 0 || w == 0 {
        return Err(CliError::new(
            exit::USAGE,
            format!("image {}x{} is smaller than the network's minimum size", img.height, img.width),
        ));
    }
    let scale = 1.0 / f32::from(img.maxval.max(1));
    let pixels: Vec<f32> = img.samples.iter().map(|&s| f32::from(s) * scale).collect();
    let mut pixels = center_crop(&pixels, img.height, img.width, h, w).map_err(code(exit::USAGE))?;
    normalize_intensity(&mut pixels).map_err(code(exit::USAGE))?;
    let image = Tensor::new(vec![1, 1, h, w], pixels).map_err(code(exit::USAGE))?;
    let probs = model
        .predict_probs(&image)
        .map_err(|e| CliError::new(exit::CHECKPOINT, format!("model does not fit the image: {e}")))?;
    let mask = Mask::threshold(probs.data(), h, w, 0.5);
    let samples: Vec<u16> = mask.data().iter().map(|&b| u16::from(b) * 255).collect();
    let foreground = mask.data().iter().filter(|&&b| b == 1).count();
    Graymap::new(w, h, 255, samples)
        .and_then(|g| g.write(&args.output))
        .map_err(CliError::from_core)?;
    if let Some(path) = &args.prob {
        fs::write(path, probs.to_xten()).map_err(|e| CliError::new(exit::IO, format!("{}: {e}", path.display())))?;
    }
    emit(
        out,
        format!(
            "wrote {h}x{w} mask ({foreground} foreground pixels, cropped from {}x{}) to {}",
            img.height,
            img.width,
            args.output.display()
        ),
    )
}

/// Per-module and total trainable counts of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCounts {
    pub label: String,
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

pub fn count_params(cfg: &ModelConfig) -> CliResult<ParamCounts> {
    let model = Model::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(COUNT_SEED)).map_err(CliError::from_core)?;
    Ok(ParamCounts {
        label: model_label(cfg),
        modules: model.param_breakdown(),
        total: model.count_params(),
    })
}

/// X-Net as configured and the plain U-Net baseline at the same widths.
pub fn xnet_and_unet(base: &ModelConfig) -> CliResult<(ParamCounts, ParamCounts)> {
    let xnet = ModelConfig {
        arch: Arch::Xnet,
        ..base.clone()
    };
    let unet = ModelConfig {
        arch: Arch::Unet,
        fsm_enabled: false,
        fsm_locations: Vec::new(),
        ..base.clone()
    };
    xnet.validate().map_err(CliError::from_core)?;
    Ok((count_params(&xnet)?, count_params(&unet)?))
}

pub fn params(args: &ParamsArgs, out: &mut dyn Write) -> CliResult {
    let mut model = match &args.config {
        Some(p) => ExperimentConfig::load(p)?.model,
        None => ModelConfig::default(),
    };
    if let Some(d) = args.width_divisor {
        model.width_divisor = d;
    }
    let (x, u) = xnet_and_unet(&model)?;
    emit(out, format!("widths {:?}", model.widths()))?;
    emit(out, format!("{:<12} {:>14} {:>14}", "module", x.label, u.label))?;
    let mut names: Vec<&String> = x.modules.iter().map(|(n, _)| n).collect();
    for (n, _) in &u.modules {
        if !names.contains(&n) {
            names.push(n);
        }
    }
    let lookup = |c: &ParamCounts, n: &str| {
        c.modules
            .iter()
            .find(|(m, _)| m == n)
            .map_or_else(|| "-".to_string(), |(_, k)| k.to_string())
    };
    for n in names {
        emit(out, format!("{:<12} {:>14} {:>14}", n, lookup(&x, n), lookup(&u, n)))?;
    }
    emit(out, format!("{:<12} {:>14} {:>14}", "total", x.total, u.total))?;
    emit(out, format!("ratio {}/{} = {:.4}", x.label, u.label, x.total as f64 / u.total as f64))
}

pub fn gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> CliResult {
    let start = Instant::now();
    let mut failed = Vec::new();
    for (name, report) in gradcheck_suite(args.seed) {
        let status = if report.passed() { "ok" } else { "FAILED" };
        emit(
            out,
            format!(
                "{name:<28} max relative error {:.2e} (bound {:.0e}) over {} tensors  {status}",
                report.max_rel_error(),
                report.tolerance,
                report.params.len()
            ),
        )?;
        if let Some(msg) = &report.failure {
            emit(out, format!("    {msg}"))?;
        }
        if !report.passed() {
            failed.push(name);
        }
    }
    emit(out, format!("gradient checks finished in {:.1}s", start.elapsed().as_secs_f64()))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(exit::VERIFICATION, format!("gradient check failed: {}", failed.join(", "))))
    }
}
