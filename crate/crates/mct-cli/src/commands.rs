//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use mct_core::data::{
    self, make_splits, read_captions, read_features, read_split, toy_dataset, write_captions,
    write_features_binary, write_features_jsonl, write_split, Dataset, SplitRule,
};
use mct_core::decoder::{generate_beam, generate_greedy};
use mct_core::embedder::{CharVocab, Vocabulary};
use mct_core::gradcheck::{check_all_families, FAMILY_TOLERANCE};
use mct_core::metrics::{evaluate, EvalReport};
use mct_core::model::{Mode, Model};
use mct_core::tensor::BackwardFault;
use mct_core::training::{load_checkpoint, save_checkpoint, train, TrainError};

use crate::config::{FeatureFormatCfg, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<mct_core::training::CheckpointError> for CliError {
    fn from(e: mct_core::training::CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NanLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Tensor(_) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<mct_core::metrics::MetricError> for CliError {
    fn from(e: mct_core::metrics::MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<mct_core::tensor::TensorError> for CliError {
    fn from(e: mct_core::tensor::TensorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "mct",
    about = "Multi-channel caption transformer: train, caption and evaluate on region features",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the deterministic synthetic toy dataset.
    GenToy(GenToyArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Caption one image from a trained checkpoint.
    Caption(CaptionArgs),
    /// Evaluate a checkpoint on a split and print the metric table row.
    Evaluate(EvaluateArgs),
    /// Check analytic gradients of every operation family against finite
    /// differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate one model per depth, printing the depth table.
    AblateDepth(AblateDepthArgs),
}

#[derive(Args, Debug)]
pub struct GenToyArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub images: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long, default_value_t = false)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the checkpoint and loss log.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the config's mode.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Override the config's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for batch passes (1 = deterministic reference mode).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CaptionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value = "jsonl")]
    pub format: FeatureFormatCfg,
    #[arg(long)]
    pub image_id: String,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value = "jsonl")]
    pub feature_format: FeatureFormatCfg,
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    /// Which split list to evaluate.
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    /// Output format.
    #[arg(long, default_value = "tsv")]
    pub format: ReportFormat,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Tsv,
    Json,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,
    /// Dimension preset for the checked instances.
    #[arg(long, default_value = "desk")]
    pub dims: DimsPreset,
    /// Flip one backward rule's sign to confirm the checker catches it.
    #[arg(long, default_value_t = false)]
    pub inject_bug: bool,
}

/// Only small desk dimensions exist; finite differences at full scale would
/// take hours for no extra assurance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum DimsPreset {
    Desk,
}

#[derive(Args, Debug)]
pub struct AblateDepthArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated depth list, e.g. 2,4,6.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 6])]
    pub depths: Vec<usize>,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    #[arg(long)]
    pub threads: Option<usize>,
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenToy(args) => cmd_gen_toy(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Caption(args) => cmd_caption(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::AblateDepth(args) => cmd_ablate_depth(&args),
    }
}

/// Runs `f` inside a rayon pool of `threads` workers when parallelism is
/// compiled in and requested; plain call otherwise.
fn with_threads<T>(threads: usize, f: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    #[cfg(feature = "parallel")]
    if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        return pool.install(f);
    }
    let _ = threads;
    f()
}

pub fn cmd_gen_toy(args: &GenToyArgs) -> Result<()> {
    if args.images < 2 {
        return Err(CliError::Usage(format!(
            "--images must be at least 2 (CIDEr idf needs two images), got {}",
            args.images
        )));
    }
    if args.out_dir.exists() {
        let non_empty = fs::read_dir(&args.out_dir)
            .map_err(|e| CliError::Data(format!("{}: {e}", args.out_dir.display())))?
            .next()
            .is_some();
        if non_empty && !args.force {
            return Err(CliError::Data(format!(
                "{} is not empty; pass --force to write anyway",
                args.out_dir.display()
            )));
        }
    } else {
        fs::create_dir_all(&args.out_dir)
            .map_err(|e| CliError::Data(format!("{}: {e}", args.out_dir.display())))?;
    }

    let (features, captions) = toy_dataset(args.seed, args.images)?;
    let ids: Vec<String> = features.ids();
    let split = make_splits(
        &ids,
        &SplitRule::Ratio {
            val: 0.1,
            test: 0.1,
        },
        args.seed,
    )?;

    let f_jsonl = args.out_dir.join("features.jsonl");
    let f_bin = args.out_dir.join("features.bin");
    let c_path = args.out_dir.join("captions.jsonl");
    let s_path = args.out_dir.join("splits.json");
    write_features_jsonl(&f_jsonl, &features)?;
    write_features_binary(&f_bin, &features)?;
    write_captions(&c_path, &captions)?;
    write_split(&s_path, &split)?;

    let config = serde_json::json!({
        "mode": "MCT",
        "model": {"d_feat": data::TOY_D_FEAT, "d_model": 32, "n_heads": 4, "d_head": 8,
                   "d_ffn": 64, "depth": 2, "max_len": 20},
        "elmo": {"layers": 1, "emb": 32, "d_char": 8, "max_word_len": 16},
        "train": {"lr": 2e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
                   "epochs": 500, "lr_decay_every": 250, "lr_decay_factor": 0.5,
                   "batch_size": 8, "seed": args.seed, "mode": "MCT",
                   "grad_clip": 5.0, "early_stop_loss": 0.05, "threads": 1},
        "data": {"features": f_jsonl, "format": "jsonl", "captions": c_path,
                  "splits": s_path, "min_count": 1}
    });
    let cfg_path = args.out_dir.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&config).expect("config json"))
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg_path.display())))?;

    eprintln!(
        "wrote {} toy images to {} (features.jsonl, features.bin, captions.jsonl, splits.json, config.json)",
        args.images,
        args.out_dir.display()
    );
    Ok(())
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path).map_err(CliError::Usage)?;
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn build_dataset(cfg: &RunConfig) -> Result<(Dataset, data::SplitSpec)> {
    let features = read_features(&cfg.data.features, cfg.data.format.into())?;
    let captions = read_captions(&cfg.data.captions)?;
    let dataset = Dataset::new(features, captions)?;
    let split = read_split(&cfg.data.splits)?;
    split.validate(&dataset.image_ids())?;
    Ok((dataset, split))
}

fn build_model(cfg: &RunConfig, dataset: &Dataset, train_ids: &[String]) -> Result<Model> {
    let mut train_caps: Vec<&str> = Vec::new();
    for id in train_ids {
        if let Some(caps) = dataset.captions_of(id) {
            train_caps.extend(caps.iter().map(String::as_str));
        }
    }
    let vocab = Vocabulary::build(train_caps.iter().copied(), cfg.data.min_count);
    let chars = CharVocab::build(train_caps.iter().copied());
    Ok(Model::init(
        cfg.mode,
        cfg.model.encoder(),
        cfg.model.decoder(),
        cfg.elmo.clone(),
        vocab,
        chars,
        cfg.train.seed,
    ))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_run_config(&args.config)?;
    if let Some(mode) = args.mode {
        cfg.mode = mode;
        cfg.train.mode = mode;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(threads) = args.threads {
        cfg.train.threads = threads;
    }
    cfg.validate().map_err(CliError::Usage)?;

    let (dataset, split) = build_dataset(&cfg)?;
    let mut model = build_model(&cfg, &dataset, &split.train)?;

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;

    let report = with_threads(cfg.train.threads, || {
        train(&mut model, &dataset, &split.train, &cfg.train)
    })?;

    let log_path = args.out.join("train_log.tsv");
    let mut log = fs::File::create(&log_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
    for (epoch, (loss, lr)) in report
        .epoch_losses
        .iter()
        .zip(&report.epoch_lrs)
        .enumerate()
    {
        writeln!(log, "{epoch}\t{loss}\t{lr}")
            .map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
    }

    let ckpt_path = args.out.join("model.ckpt");
    save_checkpoint(&model, &ckpt_path)?;

    // Plain-text vocabularies alongside the checkpoint: word i on line i
    // has id i+4 (reserved ids implicit), characters analogously from id 2.
    let vocab_path = args.out.join("vocab.txt");
    let chars_path = args.out.join("chars.txt");
    let write_err = |p: &Path, e: std::io::Error| CliError::Data(format!("{}: {e}", p.display()));
    let mut vf = fs::File::create(&vocab_path).map_err(|e| write_err(&vocab_path, e))?;
    model
        .vocab
        .write_to(&mut vf)
        .map_err(|e| write_err(&vocab_path, e))?;
    let mut cf = fs::File::create(&chars_path).map_err(|e| write_err(&chars_path, e))?;
    model
        .chars
        .write_to(&mut cf)
        .map_err(|e| write_err(&chars_path, e))?;

    eprintln!(
        "trained {} for {} epochs; final loss {:.6}; checkpoint {}",
        cfg.mode,
        report.epoch_losses.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        ckpt_path.display()
    );
    Ok(())
}

pub fn cmd_caption(args: &CaptionArgs) -> Result<()> {
    if args.beam < 1 {
        return Err(CliError::Usage(format!(
            "--beam must be at least 1, got {}",
            args.beam
        )));
    }
    let model = load_checkpoint(&args.checkpoint)?;
    let features = read_features(&args.features, args.format.into())?;
    let record = features
        .records
        .iter()
        .find(|r| r.image_id == args.image_id)
        .ok_or_else(|| {
            CliError::Data(format!(
                "image id {:?} not found in {}",
                args.image_id,
                args.features.display()
            ))
        })?;
    let memory = model.encode_image(&record.matrix)?;
    let ids = if args.beam <= 1 {
        generate_greedy(&memory, &model)?
    } else {
        generate_beam(&memory, &model, args.beam)?
    };
    println!("{}", model.ids_to_words(&ids).join(" "));
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let features = read_features(&args.features, args.feature_format.into())?;
    let captions = read_captions(&args.captions)?;
    let dataset = Dataset::new(features, captions)?;
    let split = read_split(&args.splits)?;
    split.validate(&dataset.image_ids())?;
    let ids = match args.split {
        SplitName::Train => &split.train,
        SplitName::Val => &split.val,
        SplitName::Test => &split.test,
    };
    let report = with_threads(args.threads, || {
        evaluate(&model, &dataset, ids, args.threads > 1)
    })?;
    print_report(&report, args.format);
    Ok(())
}

fn print_report(report: &EvalReport, format: ReportFormat) {
    match format {
        ReportFormat::Tsv => {
            println!("{}", EvalReport::TSV_HEADER);
            println!("{}", report.tsv_row());
        }
        ReportFormat::Json => {
            println!("{}", report.to_json());
        }
    }
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let DimsPreset::Desk = args.dims;
    let fault = if args.inject_bug {
        BackwardFault::NegateReluBackward
    } else {
        BackwardFault::None
    };
    let reports = check_all_families(args.seed, fault)?;
    let mut failures = 0;
    for r in &reports {
        let ok = r.passed(FAMILY_TOLERANCE);
        println!(
            "{}\t{:.3e}\t{}",
            r.name,
            r.max_rel_error,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(CliError::Numeric(format!(
            "{failures} operation families exceeded max relative error {FAMILY_TOLERANCE:e}"
        )));
    }
    Ok(())
}

pub fn cmd_ablate_depth(args: &AblateDepthArgs) -> Result<()> {
    if args.depths.is_empty() {
        return Err(CliError::Usage("--depths requires at least one depth".into()));
    }
    let base = load_run_config(&args.config)?;
    let mut rows = Vec::new();
    for &depth in &args.depths {
        let mut cfg = base.clone();
        cfg.model.depth = depth;
        if let Some(threads) = args.threads {
            cfg.train.threads = threads;
        }
        cfg.validate().map_err(CliError::Usage)?;
        let (dataset, split) = build_dataset(&cfg)?;
        let mut model = build_model(&cfg, &dataset, &split.train)?;
        let report = with_threads(cfg.train.threads, || -> Result<EvalReport> {
            train(&mut model, &dataset, &split.train, &cfg.train)?;
            let ids = match args.split {
                SplitName::Train => &split.train,
                SplitName::Val => &split.val,
                SplitName::Test => &split.test,
            };
            Ok(evaluate(&model, &dataset, ids, cfg.train.threads > 1)?)
        })?;
        eprintln!("depth {depth} done");
        rows.push((depth, report));
    }
    println!("Profundity\tA1\tA2\tA3\tA4\tR\tC");
    for (depth, r) in &rows {
        println!(
            "{depth}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
            r.a1, r.a2, r.a3, r.a4, r.r, r.c
        );
    }
    Ok(())
}
