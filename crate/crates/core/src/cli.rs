//! Command-line surface.
//!
//! Every command reads an optional TOML file whose keys override the built-in
//! defaults; explicit flags override both. Exit status is 0 on success, 1 for
//! usage errors and 2 for runtime failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::dataset::{BuildConfig, Dataset, DatasetSpec};
use crate::data::synth::DEFAULT_THRESHOLD;
use crate::data::LabeledImageSet;
use crate::eval::classifier::{self, Examples};
use crate::eval::{extract_features, render, ClassifierConfig, InputKind, RenderMode, REPORT_HEADER};
use crate::experiments::{dir_digest, Mnist};
use crate::gradcheck;
use crate::model::{Model, ModelConfig, ModelKind};
use crate::train::{evaluate, Checkpoint, TrainConfig, TrainError, Trainer, METRICS_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "cstvae", version, about = "Layered generative image models: data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Dataset construction.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a model on a built dataset.
    Train(TrainArgs),
    /// Downstream evaluation.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write image grids from a trained model.
    Render(RenderArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Bound reports.
    #[command(subcommand)]
    Elbo(ElboCommand),
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML file with configuration overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum DatasetCommand {
    /// Binarize, translate or superimpose MNIST digits into a dataset directory.
    Build(DatasetBuildArgs),
}

#[derive(Args, Debug)]
pub struct DatasetBuildArgs {
    #[command(flatten)]
    pub common: Common,
    /// mnist, translated or superimposed.
    #[arg(long, default_value = "translated")]
    pub kind: String,
    /// Directory holding the four MNIST IDX files.
    #[arg(long)]
    pub mnist: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub canvas: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `dataset build`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Run directory: metrics.csv, config.toml and checkpoint/.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub content_dim: Option<usize>,
    /// Width of both content hidden layers.
    #[arg(long)]
    pub content_hidden: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Train a classifier on latent features or raw pixels and report accuracy.
    Classify(ClassifyArgs),
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// vae, stvae or cstvae (latent means from --checkpoint), raw, or raw_stn.
    #[arg(long)]
    pub features: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Hidden width; defaults to 256 for composited models and 32 otherwise.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Append the CSV row to this file as well as printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// samples, canonical_and_final, decomposition or class_averages.
    #[arg(long)]
    pub mode: RenderMode,
    /// Source images for decomposition and class averages (test split).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// tensor, spatial, vae, stvae, cstvae or all.
    #[arg(long, default_value = "all")]
    pub module: String,
}

#[derive(Subcommand, Debug)]
pub enum ElboCommand {
    /// Mean per-example bound of a checkpoint on a dataset split.
    Report(ElboReportArgs),
}

#[derive(Args, Debug)]
pub struct ElboReportArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// train or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Deep-merges `over` into `base`.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `defaults` overlaid with the TOML file at `path`, if any.
pub fn layered<T: Serialize + DeserializeOwned + Clone>(defaults: &T, path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(defaults.clone());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let over: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut base = toml::Value::try_from(defaults)?;
    merge(&mut base, over);
    base.try_into().map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn append_line(path: &Path, header: &str, line: &str) -> anyhow::Result<()> {
    let fresh = !path.exists();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{line}")?;
    Ok(())
}

fn dataset_build(a: &DatasetBuildArgs) -> anyhow::Result<()> {
    let spec = match a.kind.as_str() {
        "mnist" => DatasetSpec::Mnist,
        "translated" => DatasetSpec::translated(),
        "superimposed" => DatasetSpec::superimposed(),
        k => bail!("unknown dataset kind '{k}' (expected mnist, translated or superimposed)"),
    };
    let defaults = BuildConfig {
        spec,
        threshold: DEFAULT_THRESHOLD,
        seed: 0,
    };
    let mut cfg: BuildConfig = layered(&defaults, a.common.config.as_deref())?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    match &mut cfg.spec {
        DatasetSpec::Mnist => {}
        DatasetSpec::Translated { canvas, n_train, n_test } => {
            *canvas = a.canvas.unwrap_or(*canvas);
            *n_train = a.n_train.or(*n_train);
            *n_test = a.n_test.or(*n_test);
        }
        DatasetSpec::Superimposed { canvas, n_train, n_test } => {
            *canvas = a.canvas.unwrap_or(*canvas);
            *n_train = a.n_train.unwrap_or(*n_train);
            *n_test = a.n_test.unwrap_or(*n_test);
        }
    }
    let data = Mnist::load(&a.mnist)?.build(cfg)?;
    data.save(&a.out)?;
    println!(
        "wrote {} ({} train, {} test, {}x{}) checksum {}",
        a.out.display(),
        data.train.len(),
        data.test.len(),
        data.train.images.h,
        data.train.images.w,
        dir_digest(&a.out)?
    );
    Ok(())
}

fn train_config(a: &TrainArgs, data: &Dataset) -> anyhow::Result<TrainConfig> {
    let (h, w) = data.image_size();
    let kind = a.model.unwrap_or(ModelKind::Stvae);
    let mut cfg: TrainConfig = layered(&TrainConfig::new(ModelConfig::defaults(kind, h, w)), a.common.config.as_deref())?;
    if let Some(k) = a.model {
        if k != cfg.model.kind {
            cfg.model = ModelConfig { kind: k, ..ModelConfig::defaults(k, h, w) };
        }
    }
    let m = &mut cfg.model;
    m.layers = a.layers.unwrap_or(m.layers);
    m.content_dim = a.content_dim.unwrap_or(m.content_dim);
    if let Some(width) = a.content_hidden {
        m.content_hidden = vec![width; m.content_hidden.len().max(1)];
    }
    cfg.seed = a.common.seed.unwrap_or(cfg.seed);
    cfg.max_steps = a.steps.unwrap_or(cfg.max_steps);
    cfg.minibatch_size = a.batch_size.unwrap_or(cfg.minibatch_size);
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.eval_every = a.eval_every.unwrap_or(cfg.eval_every);
    cfg.checkpoint_every = a.checkpoint_every.unwrap_or(cfg.checkpoint_every);
    Ok(cfg)
}

fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let data = Dataset::load(&a.dataset)?;
    let (train, test) = (&data.train.images, Some(&data.test.images));
    let mut trainer = match &a.checkpoint {
        Some(dir) => {
            let mut ckpt = Checkpoint::load(dir)?;
            if let Some(steps) = a.steps {
                ckpt.config.max_steps = steps;
            }
            Trainer::from_checkpoint(ckpt, train, test)?
        }
        None => Trainer::new(train_config(a, &data)?, train, test)?,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_file(&a.out.join("config.toml"), toml::to_string(&trainer.config)?.as_bytes())?;
    let metrics_path = a.out.join("metrics.csv");
    let resuming = a.checkpoint.is_some() && metrics_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resuming)
        .write(true)
        .truncate(!resuming)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let mut metrics = std::io::BufWriter::new(file);
    if !resuming {
        writeln!(metrics, "{METRICS_HEADER}")?;
    }
    let ckpt_dir = a.out.join("checkpoint");
    let outcome = trainer.run(
        |row| {
            if row.split == crate::train::Split::Test {
                eprintln!("{}", row.csv());
            }
            writeln!(metrics, "{}", row.csv())
        },
        Some(&ckpt_dir),
    );
    metrics.flush()?;
    match outcome {
        Ok(()) => {
            println!("trained {} steps; checkpoint {}", trainer.step, ckpt_dir.display());
            Ok(())
        }
        Err(e @ TrainError::Divergence { .. }) => {
            // Parameters are only written after every gradient checks out, so
            // the live state is the last good one.
            let last_good = a.out.join("checkpoint-last-good");
            trainer.checkpoint().save(&last_good)?;
            Err(anyhow!(e).context(format!("last good state saved to {}", last_good.display())))
        }
        Err(e) => Err(e.into()),
    }
}

fn load_model(dir: &Path) -> anyhow::Result<(Model, TrainConfig)> {
    let ckpt = Checkpoint::load(dir)?;
    let model = Model::from_params(ckpt.config.model.clone(), ckpt.params)?;
    Ok((model, ckpt.config))
}

fn classify(a: &ClassifyArgs) -> anyhow::Result<()> {
    let data = Dataset::load(&a.dataset)?;
    let seed = a.common.seed.unwrap_or(0);
    let (input, name, model) = match a.features.as_str() {
        "raw" => (InputKind::RawPixels, "raw".to_string(), None),
        "raw_stn" => (InputKind::RawPixelsWithStn, "raw_stn".to_string(), None),
        kind => {
            let want: ModelKind = kind.parse().map_err(|e: String| anyhow!(e))?;
            let dir = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| anyhow!("--features {kind} needs --checkpoint"))?;
            let (model, _) = load_model(dir)?;
            if model.config.kind != want {
                bail!("checkpoint holds a {} model, not {want}", model.config.kind);
            }
            (InputKind::LatentMeans, kind.to_string(), Some(model))
        }
    };
    let default_hidden = match &model {
        Some(m) if m.config.kind == ModelKind::Cstvae => 256,
        _ => 32,
    };
    let mut cfg: ClassifierConfig = layered(
        &ClassifierConfig::new(input, default_hidden, seed),
        a.common.config.as_deref(),
    )?;
    cfg.input = input;
    cfg.hidden = a.hidden.unwrap_or(cfg.hidden);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.seed = a.common.seed.unwrap_or(cfg.seed);
    let report = match &model {
        Some(m) => {
            let ftr = extract_features(m, &data.train.images)?;
            let fte = extract_features(m, &data.test.images)?;
            classifier::train_and_report(
                &name,
                &cfg,
                (Examples::Features(&ftr), &data.train.labels),
                (Examples::Features(&fte), &data.test.labels),
            )?
        }
        None => classifier::train_and_report(
            &name,
            &cfg,
            (Examples::Images(&data.train.images), &data.train.labels),
            (Examples::Images(&data.test.images), &data.test.labels),
        )?,
    };
    println!("{REPORT_HEADER}");
    println!("{}", report.csv());
    if let Some(path) = &a.out {
        append_line(path, REPORT_HEADER, &report.csv())?;
    }
    Ok(())
}

fn render_cmd(a: &RenderArgs) -> anyhow::Result<()> {
    let (model, cfg) = load_model(&a.checkpoint)?;
    let data = a.dataset.as_deref().map(Dataset::load).transpose()?;
    let inputs = data.as_ref().map(|d| (&d.test.images, &d.test.labels));
    let seed = a.common.seed.unwrap_or(cfg.seed);
    for p in render::render(&model, a.mode, inputs, a.count, seed, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> anyhow::Result<bool> {
    let reports = gradcheck::suite(&a.module, a.seed.unwrap_or(0))?
        .ok_or_else(|| anyhow!("unknown module '{}' (expected {} or all)", a.module, gradcheck::MODULES.join(", ")))?;
    for r in &reports {
        println!("{r}");
    }
    Ok(reports.iter().all(|r| r.passed()))
}

fn split<'a>(data: &'a Dataset, name: &str) -> anyhow::Result<&'a LabeledImageSet> {
    match name {
        "train" => Ok(&data.train),
        "test" => Ok(&data.test),
        s => bail!("unknown split '{s}' (expected train or test)"),
    }
}

fn elbo_report(a: &ElboReportArgs) -> anyhow::Result<()> {
    let (model, cfg) = load_model(&a.checkpoint)?;
    let data = Dataset::load(&a.dataset)?;
    let set = split(&data, &a.split)?;
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut rng = crate::seed::rng_for(a.common.seed.unwrap_or(cfg.seed), "elbo-report");
    let s = evaluate(&model, &set.images, &indices, &mut rng)?;
    let ckpt_step = Checkpoint::load(&a.checkpoint)?.step;
    let line = format!("{ckpt_step},{},{},{},{},{}", a.split, s.elbo, s.kl, s.loglik, s.skipped);
    println!("{METRICS_HEADER}");
    println!("{line}");
    if let Some(path) = &a.out {
        append_line(path, METRICS_HEADER, &line)?;
    }
    Ok(())
}

/// Runs a parsed command; `Ok(false)` means a check ran and failed.
pub fn execute(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Dataset(DatasetCommand::Build(a)) => dataset_build(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(EvalCommand::Classify(a)) => classify(a)?,
        Command::Render(a) => render_cmd(a)?,
        Command::Gradcheck(a) => return gradcheck_cmd(a),
        Command::Elbo(ElboCommand::Report(a)) => elbo_report(a)?,
    }
    Ok(true)
}

/// Parses `args` (program name first) and runs; returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(&cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}
