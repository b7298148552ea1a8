//! Reproducible training runs with on-disk result caching.
//!
//! A run is identified by a hash of its full configuration, the protocol
//! version and the checksums of its source digits. A finished run leaves
//! `result.json`, `metrics.csv` and a final checkpoint under
//! `<results>/<name>-<key>/`; asking for the same run again reuses them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use crate::data::container::sha256_hex;
use crate::data::dataset::{BuildConfig, Dataset, DatasetSpec};
use crate::data::idx::load_idx;
use crate::data::synth::DEFAULT_THRESHOLD;
use crate::data::{ImageStack, LabeledImageSet};
use crate::eval::classifier::{train_and_report, Examples};
use crate::eval::{extract_features, ClassifierConfig, ClassifierReport, InputKind};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::seed;
use crate::tensor::TensorError;
use crate::train::{evaluate, Checkpoint, TrainConfig, Trainer, METRICS_HEADER};

/// Bumped whenever a change would alter the outcome of an existing run.
pub const PROTOCOL: &str = "run-v1";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Source digits: the standard four IDX files in one directory.
pub struct Mnist {
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
}

impl Mnist {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let train = load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
        let test = load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
        Ok(Self { train, test })
    }

    pub fn build(&self, config: BuildConfig) -> anyhow::Result<Dataset> {
        Ok(Dataset::build(&self.train, &self.test, config)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub dataset: BuildConfig,
    pub train: TrainConfig,
}

/// Test-set bound at the end of a run, averaged over every test image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub elbo: f64,
    pub kl: f64,
    pub loglik: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub spec: RunSpec,
    pub key: String,
    pub steps: u64,
    pub skips: u64,
    pub final_test: FinalEval,
    pub metrics_sha256: String,
    pub checkpoint_sha256: String,
    pub seconds: f64,
}

impl RunResult {
    pub fn dir(&self, results: &Path) -> PathBuf {
        run_dir(results, &self.spec, &self.key)
    }

    /// The trained model from the run's final checkpoint.
    pub fn model(&self, results: &Path) -> anyhow::Result<Model> {
        let ckpt = Checkpoint::load(&self.dir(results).join("checkpoint"))?;
        Ok(Model::from_params(ckpt.config.model, ckpt.params)?)
    }
}

/// Superimposed-digit experiments use narrower content networks.
pub const SUPERIMPOSED_CONTENT_HIDDEN: usize = 128;

pub fn translated_spec(kind: ModelKind, seed_: u64, steps: u64) -> RunSpec {
    let dataset = BuildConfig {
        spec: DatasetSpec::Translated {
            canvas: 36,
            n_train: Some(10_000),
            n_test: Some(2_000),
        },
        threshold: DEFAULT_THRESHOLD,
        seed: seed_,
    };
    let mut train = TrainConfig::new(ModelConfig::defaults(kind, 36, 36));
    train.max_steps = steps;
    train.seed = seed_;
    RunSpec {
        name: format!("translated-{kind}-s{seed_}"),
        dataset,
        train,
    }
}

pub fn superimposed_spec(kind: ModelKind, seed_: u64, steps: u64) -> RunSpec {
    let dataset = BuildConfig {
        spec: DatasetSpec::Superimposed {
            canvas: 50,
            n_train: 20_000,
            n_test: 5_000,
        },
        threshold: DEFAULT_THRESHOLD,
        seed: seed_,
    };
    let mut model = ModelConfig::defaults(kind, 50, 50);
    model.content_hidden = vec![SUPERIMPOSED_CONTENT_HIDDEN; 2];
    let mut train = TrainConfig::new(model);
    train.max_steps = steps;
    train.seed = seed_;
    RunSpec {
        name: format!("superimposed-{kind}-s{seed_}"),
        dataset,
        train,
    }
}

/// Hash of everything that determines a run's outcome.
pub fn run_key(spec: &RunSpec, source_sha256: &[String; 2]) -> String {
    let canonical = serde_json::json!({
        "protocol": PROTOCOL,
        "spec": spec,
        "sources": source_sha256,
    });
    sha256_hex(canonical.to_string().as_bytes())[..16].to_string()
}

fn run_dir(results: &Path, spec: &RunSpec, key: &str) -> PathBuf {
    results.join(format!("{}-{key}", spec.name))
}

fn read_cached(dir: &Path, key: &str) -> Option<RunResult> {
    let text = fs::read_to_string(dir.join("result.json")).ok()?;
    let r: RunResult = serde_json::from_str(&text).ok()?;
    (r.key == key).then_some(r)
}

/// Returns the cached result of `spec`, training it first if needed.
///
/// `progress` receives one line per test evaluation.
pub fn run(
    mnist: &Mnist,
    spec: &RunSpec,
    results: &Path,
    mut progress: impl FnMut(&str),
) -> anyhow::Result<RunResult> {
    let data = mnist.build(spec.dataset.clone())?;
    let key = run_key(spec, &data.source_sha256);
    let dir = run_dir(results, spec, &key);
    if let Some(r) = read_cached(&dir, &key) {
        return Ok(r);
    }
    fs::create_dir_all(results).with_context(|| format!("creating {}", results.display()))?;
    let partial = results.join(format!(".{}-{key}.partial", spec.name));
    if partial.exists() {
        fs::remove_dir_all(&partial)?;
    }
    fs::create_dir_all(&partial)?;

    let start = std::time::Instant::now();
    let mut trainer = Trainer::new(spec.train.clone(), &data.train.images, Some(&data.test.images))?;
    let metrics_path = partial.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(fs::File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    trainer.run(
        |row| {
            if row.split == crate::train::Split::Test {
                progress(&format!("{} {}", spec.name, row.csv()));
            }
            writeln!(metrics, "{}", row.csv())
        },
        Some(&partial.join("checkpoint")),
    )?;
    metrics.flush()?;
    drop(metrics);

    let final_test = final_eval(&trainer.model, &data.test.images, spec.train.seed)?;
    let result = RunResult {
        spec: spec.clone(),
        key: key.clone(),
        steps: trainer.step,
        skips: trainer.skips,
        final_test,
        metrics_sha256: sha256_hex(&fs::read(&metrics_path)?),
        checkpoint_sha256: dir_digest(&partial.join("checkpoint"))?,
        seconds: start.elapsed().as_secs_f64(),
    };
    fs::write(partial.join("result.json"), serde_json::to_string_pretty(&result)?)?;
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::rename(&partial, &dir)?;
    Ok(result)
}

/// Bound over the whole test split with its own noise stream.
pub fn final_eval(model: &Model, test: &ImageStack, seed_: u64) -> anyhow::Result<FinalEval> {
    let indices: Vec<usize> = (0..test.n).collect();
    let mut rng = seed::rng_for(seed_, "final-eval");
    let s = evaluate(model, test, &indices, &mut rng)?;
    if s.evaluated == 0 {
        bail!("every test example hit a singular pose");
    }
    Ok(FinalEval {
        elbo: s.elbo,
        kl: s.kl,
        loglik: s.loglik,
        evaluated: s.evaluated,
        skipped: s.skipped,
    })
}

fn cached<T: Serialize + for<'de> Deserialize<'de>>(
    path: &Path,
    compute: impl FnOnce() -> anyhow::Result<T>,
) -> anyhow::Result<T> {
    if let Some(v) = fs::read_to_string(path).ok().and_then(|t| serde_json::from_str(&t).ok()) {
        return Ok(v);
    }
    let v = compute()?;
    let tmp = path.with_extension("json.partial");
    fs::write(&tmp, serde_json::to_string_pretty(&v)?)?;
    fs::rename(&tmp, path)?;
    Ok(v)
}

/// Classifier on the latent content means of a finished run, trained on its
/// training split and scored on its test split. Cached beside the run.
pub fn latent_classifier(
    mnist: &Mnist,
    run: &RunResult,
    results: &Path,
    hidden: usize,
) -> anyhow::Result<ClassifierReport> {
    let path = run.dir(results).join(format!("classifier-latent_means-h{hidden}.json"));
    cached(&path, || {
        let data = mnist.build(run.spec.dataset.clone())?;
        let model = run.model(results)?;
        let train = extract_features(&model, &data.train.images)?;
        let test = extract_features(&model, &data.test.images)?;
        let cfg = ClassifierConfig::new(InputKind::LatentMeans, hidden, run.spec.train.seed);
        Ok(train_and_report(
            model.config.kind.name(),
            &cfg,
            (Examples::Features(&train), &data.train.labels),
            (Examples::Features(&test), &data.test.labels),
        )?)
    })
}

/// Fine-tuning a composited model on its own samples and decomposing
/// held-out samples back into the layers that generated them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistencySpec {
    pub n_train: usize,
    pub n_test: usize,
    pub steps: u64,
    pub seed: u64,
    /// Generated layers are binarized at this level before compositing.
    pub threshold: f64,
}

impl Default for SelfConsistencySpec {
    fn default() -> Self {
        Self {
            n_train: 20_000,
            n_test: 1_000,
            steps: 5_000,
            seed: 0,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistency {
    pub spec: SelfConsistencySpec,
    pub generator_key: String,
    /// Mean absolute per-pixel error over both layers, best layer order per image.
    pub mae: f64,
    /// The same error for the generator before fine-tuning.
    pub mae_before: f64,
    /// Error of predicting blank layers, for scale.
    pub mae_blank: f64,
    /// Mean pixel value of each generated test layer, front-most first.
    pub layer_fill: Vec<f64>,
    pub decomposed: usize,
    pub skipped: usize,
}

/// Prior samples with every layer binarized, and their composites.
pub struct GeneratedSet {
    pub composites: ImageStack,
    /// `[n, h, w]` per layer, front-most first.
    pub layers: Vec<ImageStack>,
}

pub fn generate_layered(model: &Model, n: usize, threshold: f64, rng: &mut seed::Rng) -> anyhow::Result<GeneratedSet> {
    let (h, w) = (model.config.image_h, model.config.image_w);
    let mut composites = ImageStack::zeros(n, h, w);
    let mut layers = vec![ImageStack::zeros(n, h, w); model.config.layers];
    let mut start = 0;
    while start < n {
        let b = (n - start).min(crate::eval::features::CHUNK);
        let g = model.generate(b, rng)?;
        for (k, layer) in g.layers.iter().enumerate() {
            let dst = &mut layers[k].data[start * h * w..(start + b) * h * w];
            for (d, &v) in dst.iter_mut().zip(layer.data()) {
                *d = (v >= threshold) as u8 as f32;
            }
        }
        start += b;
    }
    for (c, px) in composites.data.iter_mut().enumerate() {
        // Binary layers composite to their union.
        *px = layers.iter().map(|l| l.data[c]).fold(0.0, f32::max);
    }
    Ok(GeneratedSet { composites, layers })
}

fn layer_mae(pred: &[&[f64]], truth: &[&[f32]]) -> f64 {
    let pixels = truth[0].len() * truth.len();
    let err = |order: &[usize]| -> f64 {
        order
            .iter()
            .zip(truth)
            .map(|(&k, t)| pred[k].iter().zip(t.iter()).map(|(p, &t)| (p - t as f64).abs()).sum::<f64>())
            .sum::<f64>()
            / pixels as f64
    };
    let mut order: Vec<usize> = (0..pred.len()).collect();
    let mut best = err(&order);
    // Every ordering for small stacks; layers rarely exceed three.
    while next_permutation(&mut order) {
        best = best.min(err(&order));
    }
    best
}

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else { return false };
    let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).unwrap();
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Returns `(mean error, decomposed, skipped)` over `set` at posterior means.
pub fn decomposition_error(model: &Model, set: &GeneratedSet) -> anyhow::Result<(f64, usize, usize)> {
    let n = set.composites.n;
    let (mut total, mut done, mut skipped) = (0.0, 0, 0);
    for chunk in (0..n).collect::<Vec<_>>().chunks(crate::eval::features::CHUNK) {
        let mut keep: Vec<usize> = chunk.to_vec();
        while !keep.is_empty() {
            match model.nets.decompose(&model.store, &set.composites.batch(&keep)) {
                Ok(d) => {
                    let hw = set.composites.pixels();
                    for (r, &i) in keep.iter().enumerate() {
                        let pred: Vec<&[f64]> = d.layers.iter().map(|l| &l.data()[r * hw..(r + 1) * hw]).collect();
                        let truth: Vec<&[f32]> = set.layers.iter().map(|l| l.image(i)).collect();
                        total += layer_mae(&pred, &truth);
                    }
                    done += keep.len();
                    break;
                }
                Err(TensorError::Singular { rows, .. }) => {
                    skipped += rows.len();
                    keep = keep.iter().enumerate().filter(|(r, _)| !rows.contains(r)).map(|(_, &i)| i).collect();
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok((total / done.max(1) as f64, done, skipped))
}

/// Runs (or reloads) the self-consistency experiment for a trained
/// composited model. The fine-tuned checkpoint is kept beside the result.
pub fn self_consistency(
    generator: &RunResult,
    results: &Path,
    spec: &SelfConsistencySpec,
) -> anyhow::Result<SelfConsistency> {
    let model = generator.model(results)?;
    if model.config.layers < 2 {
        bail!("self-consistency needs a composited model, got {} layer(s)", model.config.layers);
    }
    let key = sha256_hex(
        serde_json::json!({"protocol": PROTOCOL, "generator": generator.key, "spec": spec})
            .to_string()
            .as_bytes(),
    )[..16]
        .to_string();
    let dir = results.join(format!("self-consistency-{}-{key}", generator.spec.name));
    fs::create_dir_all(&dir)?;
    cached(&dir.join("result.json"), || {
        let mut rng = seed::rng_for(spec.seed, "self-consistency-data");
        let train = generate_layered(&model, spec.n_train, spec.threshold, &mut rng)?;
        let test = generate_layered(&model, spec.n_test, spec.threshold, &mut rng)?;

        let (mae_before, _, _) = decomposition_error(&model, &test)?;
        let mut cfg = generator.spec.train.clone();
        cfg.max_steps = spec.steps;
        cfg.seed = spec.seed;
        let mut trainer = Trainer::new(cfg, &train.composites, None)?;
        trainer.model = model.clone();
        trainer.run(|_| Ok(()), Some(&dir.join("checkpoint")))?;
        let (mae, decomposed, skipped) = decomposition_error(&trainer.model, &test)?;

        let layer_fill: Vec<f64> = test
            .layers
            .iter()
            .map(|l| l.data.iter().map(|&v| v as f64).sum::<f64>() / l.data.len() as f64)
            .collect();
        let blank = layer_fill.iter().sum::<f64>() / layer_fill.len() as f64;
        Ok(SelfConsistency {
            spec: spec.clone(),
            generator_key: generator.key.clone(),
            mae,
            mae_before,
            mae_blank: blank,
            layer_fill,
            decomposed,
            skipped,
        })
    })
}

/// SHA-256 over the sorted file names and contents of a directory.
pub fn dir_digest(dir: &Path) -> anyhow::Result<String> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    let mut all = Vec::new();
    for n in names {
        all.extend_from_slice(n.to_string_lossy().as_bytes());
        all.push(0);
        all.extend_from_slice(sha256_hex(&fs::read(dir.join(&n))?).as_bytes());
    }
    Ok(sha256_hex(&all))
}
