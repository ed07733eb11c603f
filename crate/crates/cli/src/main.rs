//! `crosstask` command-line entry point.
//!
//! Every command takes an optional `--config` JSON file; explicit flags
//! override values from the file, and the effective configuration is written
//! to `config.json` in the output directory so a run can be repeated with
//! `--config <out>/config.json`.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 data or format
//! error, 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crosstask::evalkit::{self, CedMode, ErrorUnit, EvalOptions};
use crosstask::heatmap::LandmarkSet;
use crosstask::model::{SourceModel, TargetModel, Variant};
use crosstask::synthfaces::{self, Dataset, DatasetConfig, Split};
use crosstask::tensorcore::Tensor;
use crosstask::trainer::{self, AblationOptions, SourceConfig, TrainConfig};
use crosstask::Error;

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser, Debug)]
#[command(name = "crosstask", version, about = "Cross-task regularized transfer learning for landmark detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic face dataset and its manifest.
    GenData(GenDataArgs),
    /// Pretrain the face-identity classifier (source model).
    TrainSource(TrainSourceArgs),
    /// Train a landmark detector for one variant.
    TrainTarget(TrainTargetArgs),
    /// Predict landmarks with a trained target checkpoint.
    Infer(InferArgs),
    /// Score a predictions CSV against a manifest.
    Evaluate(EvaluateArgs),
    /// Run the variant × seed ablation and write the comparison table.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// JSON file with dataset settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Number of identities (classes).
    #[arg(long)]
    ids: Option<usize>,
    /// Images per identity.
    #[arg(long)]
    per_id: Option<usize>,
    /// Image side length in pixels (multiple of 32).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep landmarks off the 4-pixel heatmap lattice.
    #[arg(long)]
    no_snap: bool,
}

/// Optimisation flags shared by both training commands.
#[derive(Args, Debug)]
struct OptimFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate of the polynomial schedule.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable flip/scale augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug)]
struct TrainSourceArgs {
    /// JSON file: `{"manifest": …, "train": {SourceConfig}}`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    optim: OptimFlags,
}

/// Target-training flags shared by `train-target` and `compare`.
#[derive(Args, Debug)]
struct TargetFlags {
    #[command(flatten)]
    optim: OptimFlags,
    /// Regularizer weight λ.
    #[arg(long)]
    lambda: Option<f32>,
    /// Softmax temperature μ.
    #[arg(long)]
    mu: Option<f32>,
    /// Freeze the retained classifier head (CTD-CD / CTD-Com).
    #[arg(long)]
    freeze_classifier: bool,
    /// Train on the first N training samples only.
    #[arg(long)]
    max_train_samples: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainTargetArgs {
    /// JSON file: `{"manifest": …, "source": …, "train": {TrainConfig}}`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Source checkpoint; required by CTD-* variants.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// FE, FTP, FT, CTD-CD, CTD-ED or CTD-Com.
    #[arg(long)]
    variant: Option<Variant>,
    #[command(flatten)]
    target: TargetFlags,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Target checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Predict every image of one manifest split.
    #[arg(long, conflicts_with_all = ["images", "image_list"])]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// PNG files to predict (ids are the file stems).
    #[arg(long, num_args = 1..)]
    images: Vec<PathBuf>,
    /// Text file with one PNG path per line.
    #[arg(long)]
    image_list: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    batch: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum UnitArg {
    Input,
    Quarter,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// JSON file mirroring the effective-config echo.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Predictions CSV (`id,x0,y0,…`).
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    split: Option<Split>,
    /// Error unit: input pixels or quarter-resolution (heatmap) pixels.
    #[arg(long, value_enum)]
    unit: Option<UnitArg>,
    /// Build CED/AUC/FR from per-landmark instead of per-image errors.
    #[arg(long)]
    per_point: bool,
    /// Failure threshold and AUC cutoff.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// JSON file: `{"manifest", "source", "variants", "seeds", "jobs", "train"}`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated variants (default: all six).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    /// Comma-separated seeds (default: 1,2,3,4,5).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Runs trained in parallel.
    #[arg(long)]
    jobs: Option<usize>,
    /// Also keep every run's target checkpoint.
    #[arg(long)]
    keep_checkpoints: bool,
    #[command(flatten)]
    target: TargetFlags,
}

// ---------------------------------------------------------------------------
// Config files

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SourceFile {
    manifest: Option<PathBuf>,
    train: SourceConfig,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TargetFile {
    manifest: Option<PathBuf>,
    source: Option<PathBuf>,
    train: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateFile {
    manifest: Option<PathBuf>,
    predictions: Option<PathBuf>,
    split: Split,
    options: EvalOptions,
}

impl Default for EvaluateFile {
    fn default() -> Self {
        Self {
            manifest: None,
            predictions: None,
            split: Split::Test,
            options: EvalOptions::default(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CompareFile {
    manifest: Option<PathBuf>,
    source: Option<PathBuf>,
    variants: Vec<Variant>,
    seeds: Vec<u64>,
    jobs: usize,
    keep_checkpoints: bool,
    train: TrainConfig,
}

impl Default for CompareFile {
    fn default() -> Self {
        let options = AblationOptions::default();
        Self {
            manifest: None,
            source: None,
            variants: options.variants,
            seeds: options.seeds,
            jobs: 1,
            keep_checkpoints: false,
            train: TrainConfig {
                epochs: trainer::ABLATION_EPOCHS,
                ..TrainConfig::default()
            },
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn echo_config<T: Serialize>(out: &Path, config: &T) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    fs::write(out.join("config.json"), text)?;
    Ok(())
}

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Usage(format!("--{flag} is required (flag or config file)")))
}

fn apply_optim(flags: &OptimFlags, epochs: &mut usize, batch: &mut usize, lr: &mut f64, seed: &mut u64, aug: &mut trainer::Augmentation) {
    if let Some(v) = flags.epochs {
        *epochs = v;
    }
    if let Some(v) = flags.batch_size {
        *batch = v;
    }
    if let Some(v) = flags.lr {
        *lr = v;
    }
    if let Some(v) = flags.seed {
        *seed = v;
    }
    if flags.no_augment {
        *aug = trainer::Augmentation::OFF;
    }
}

fn apply_target(flags: &TargetFlags, c: &mut TrainConfig) {
    apply_optim(
        &flags.optim,
        &mut c.epochs,
        &mut c.batch_size,
        &mut c.schedule.initial_lr,
        &mut c.seed,
        &mut c.augmentation,
    );
    if let Some(v) = flags.lambda {
        c.lambda = v;
    }
    if let Some(v) = flags.mu {
        c.mu = v;
    }
    if flags.freeze_classifier {
        c.freeze_classifier = true;
    }
    if let Some(v) = flags.max_train_samples {
        c.max_train_samples = Some(v);
    }
}

// ---------------------------------------------------------------------------
// Commands

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut config: DatasetConfig = load_config(args.config.as_deref())?;
    if let Some(v) = args.ids {
        config.num_ids = v;
    }
    if let Some(v) = args.per_id {
        config.per_id = v;
    }
    if let Some(v) = args.size {
        config.size = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if args.no_snap {
        config.snap_to_label_grid = false;
    }
    let manifest = synthfaces::build_dataset(&config, &args.out)?;
    echo_config(&args.out, &config)?;
    let (train, val, test) = manifest.split_counts();
    println!("manifest: {}", args.out.join(synthfaces::MANIFEST_FILE).display());
    println!("samples: {} (train {train}, val {val}, test {test})", manifest.records.len());
    Ok(())
}

fn train_source(args: TrainSourceArgs) -> Result<()> {
    let mut file: SourceFile = load_config(args.config.as_deref())?;
    if args.manifest.is_some() {
        file.manifest = args.manifest;
    }
    let c = &mut file.train;
    apply_optim(
        &args.optim,
        &mut c.epochs,
        &mut c.batch_size,
        &mut c.schedule.initial_lr,
        &mut c.seed,
        &mut c.augmentation,
    );
    let manifest = require(file.manifest.clone(), "manifest")?;
    file.train.validate()?;
    echo_config(&args.out, &file)?;
    let dataset = Dataset::load(&manifest)?;
    let run = trainer::train_source(&dataset, &file.train)?;
    run.write(&args.out)?;
    println!("checkpoint: {}", args.out.join("source.ckpt").display());
    match run.summary.final_val_accuracy {
        Some(acc) => println!("validation accuracy: {acc:.4}"),
        None => println!("validation accuracy: n/a (empty validation split)"),
    }
    Ok(())
}

fn train_target(args: TrainTargetArgs) -> Result<()> {
    let mut file: TargetFile = load_config(args.config.as_deref())?;
    if args.manifest.is_some() {
        file.manifest = args.manifest;
    }
    if args.source.is_some() {
        file.source = args.source;
    }
    if let Some(v) = args.variant {
        file.train.variant = v;
    }
    apply_target(&args.target, &mut file.train);
    let manifest = require(file.manifest.clone(), "manifest")?;
    file.train.validate()?;
    if file.train.variant.needs_source_outputs() && file.source.is_none() {
        return Err(Error::Usage(format!(
            "variant {} needs --source <checkpoint>",
            file.train.variant
        )));
    }
    echo_config(&args.out, &file)?;
    let dataset = Dataset::load(&manifest)?;
    let source = file.source.as_deref().map(SourceModel::load).transpose()?;
    let run = trainer::train_target(&dataset, source.as_ref(), &file.train)?;
    run.write(&args.out)?;
    println!("checkpoint: {}", args.out.join("target.ckpt").display());
    if let Some(me) = run.summary.best_val_me {
        println!("best validation ME: {me:.4} px (epoch {})", run.summary.best_epoch);
    }
    if let Some(t) = run.summary.test {
        println!("test: ME {:.4} ± {:.4} px, FR {:.4}, AUC {:.4}", t.me, t.sd, t.fr, t.auc);
    }
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    let model = TargetModel::load(&args.checkpoint)?;
    let mut ids = Vec::new();
    let mut images: Vec<Tensor> = Vec::new();
    if let Some(manifest) = &args.manifest {
        let dataset = Dataset::load(manifest)?;
        for s in dataset.split(args.split) {
            ids.push(s.id.clone());
            images.push(s.image.clone());
        }
    } else {
        let mut paths = args.images.clone();
        if let Some(list) = &args.image_list {
            let text = fs::read_to_string(list)?;
            let base = list.parent().unwrap_or(Path::new("."));
            paths.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(|l| base.join(l)));
        }
        for p in paths {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            images.push(synthfaces::read_png(&p)?);
            ids.push(stem);
        }
    }
    let refs: Vec<&Tensor> = images.iter().collect();
    let preds = trainer::predict_landmarks(&model, &refs, args.batch)?;
    let rows: Vec<(String, LandmarkSet)> = ids.into_iter().zip(preds).collect();
    evalkit::write_predictions(&args.out, model.decoder.num_landmarks, &rows)?;
    println!("predictions: {} ({} images)", args.out.display(), rows.len());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut file: EvaluateFile = load_config(args.config.as_deref())?;
    if args.manifest.is_some() {
        file.manifest = args.manifest;
    }
    if args.predictions.is_some() {
        file.predictions = args.predictions;
    }
    if let Some(s) = args.split {
        file.split = s;
    }
    if let Some(u) = args.unit {
        file.options.unit = match u {
            UnitArg::Input => ErrorUnit::Input,
            UnitArg::Quarter => ErrorUnit::Quarter,
        };
    }
    if args.per_point {
        file.options.ced_mode = CedMode::PerPoint;
    }
    if let Some(t) = args.threshold {
        file.options.threshold = t;
    }
    let manifest_path = require(file.manifest.clone(), "manifest")?;
    let predictions = require(file.predictions.clone(), "predictions")?;
    echo_config(&args.out, &file)?;

    let manifest = synthfaces::Manifest::load(&manifest_path)?;
    let rows = evalkit::read_predictions(&predictions)?;
    let mut ids = Vec::new();
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for r in manifest.records.iter().filter(|r| r.split == file.split) {
        let pred = rows
            .iter()
            .find(|(id, _)| *id == r.id)
            .ok_or_else(|| Error::Format(format!("no prediction for {}", r.id)))?;
        ids.push(r.id.clone());
        preds.push(pred.1.clone());
        truths.push(r.landmarks.clone());
    }
    let report = evalkit::evaluate(&ids, &preds, &truths, &file.options)?;
    evalkit::write_report(&report, &args.out.join("report.json"), &args.out.join("ced.csv"))?;
    let unit = match report.unit {
        ErrorUnit::Input => "input px",
        ErrorUnit::Quarter => "quarter-resolution px",
    };
    println!(
        "ME {:.4} ± {:.4} {unit}, FR {:.4}, AUC {:.4} (threshold {}, {} images)",
        report.me, report.sd, report.fr, report.auc, report.threshold, report.num_images
    );
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let mut file: CompareFile = load_config(args.config.as_deref())?;
    if args.manifest.is_some() {
        file.manifest = args.manifest;
    }
    if args.source.is_some() {
        file.source = args.source;
    }
    if let Some(v) = args.variants {
        file.variants = v;
    }
    if let Some(v) = args.seeds {
        file.seeds = v;
    }
    if let Some(v) = args.jobs {
        file.jobs = v;
    }
    if args.keep_checkpoints {
        file.keep_checkpoints = true;
    }
    apply_target(&args.target, &mut file.train);
    let manifest = require(file.manifest.clone(), "manifest")?;
    file.train.validate()?;
    if file.variants.iter().any(|v| v.needs_source_outputs()) && file.source.is_none() {
        return Err(Error::Usage("CTD variants need --source <checkpoint>".into()));
    }
    echo_config(&args.out, &file)?;
    let dataset = Dataset::load(&manifest)?;
    let source = file.source.as_deref().map(SourceModel::load).transpose()?;
    let options = AblationOptions {
        variants: file.variants.clone(),
        seeds: file.seeds.clone(),
        jobs: file.jobs,
        run_dir: Some(args.out.clone()),
        keep_checkpoints: file.keep_checkpoints,
    };
    let table = trainer::run_ablation(&dataset, source.as_ref(), &file.train, &options)?;
    table.write(&args.out)?;
    println!("{:<8} {:>8} {:>8} {:>8} {:>8}", "variant", "ME", "SD", "FR", "AUC");
    for r in &table.rows {
        println!("{:<8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", r.variant.as_str(), r.me, r.sd, r.fr, r.auc);
    }
    if let Some(flag) = table.ctd_ed_not_worse_than_ft {
        println!("CTD-ED mean ME ≤ FT mean ME: {flag}");
    }
    println!("table: {}", args.out.join("ablation.csv").display());
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Numerical(_) => 4,
        Error::Shape(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) | Error::Image(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainSource(a) => train_source(a),
        Command::TrainTarget(a) => train_target(a),
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
