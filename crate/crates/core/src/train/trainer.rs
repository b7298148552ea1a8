//! The training loop.

use std::path::Path;

use rand::seq::index;

use super::adagrad::AdagradState;
use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use crate::data::{DataError, ImageStack};
use crate::model::Model;
use crate::seed;
use crate::stvae::LayerNoise;
use crate::tape::Tape;
use crate::tensor::TensorError;

pub const METRICS_HEADER: &str = "step,split,elbo_per_example,kl_total,loglik,skips";

/// Evaluation chunk size; bounds tape memory during test passes.
const EVAL_CHUNK: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("diverged at step {step}: non-finite {what}")]
    Divergence { step: u64, what: String },
    #[error("{skips} of {examples} examples skipped for singular transforms (limit {limit})")]
    SkipRate { skips: u64, examples: u64, limit: f64 },
    #[error(transparent)]
    Model(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("writing metrics: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One line of the metrics log. Bound terms are per-example means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub split: Split,
    pub elbo_per_example: f64,
    pub kl_total: f64,
    pub loglik: f64,
    /// Training examples skipped so far.
    pub skips: u64,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.split.name(),
            self.elbo_per_example,
            self.kl_total,
            self.loglik,
            self.skips
        )
    }
}

/// Mean bound terms over a fixed image subset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub elbo: f64,
    pub kl: f64,
    pub loglik: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Evaluates `model` on `images[indices]` with noise drawn from `rng`.
///
/// Examples whose sampled pose cannot be inverted are left out of the means
/// and counted in `skipped`.
pub fn evaluate(model: &Model, images: &ImageStack, indices: &[usize], rng: &mut seed::Rng) -> Result<EvalSummary, TrainError> {
    let mut sums = (0.0, 0.0, 0.0);
    let (mut evaluated, mut skipped) = (0, 0);
    for chunk in indices.chunks(EVAL_CHUNK) {
        let noise = model.sample_noise(chunk.len(), rng);
        let mut keep: Vec<usize> = (0..chunk.len()).collect();
        while !keep.is_empty() {
            let rows: Vec<usize> = keep.iter().map(|&k| chunk[k]).collect();
            let nz: Vec<LayerNoise> = noise.iter().map(|n| n.select_rows(&keep)).collect();
            match model.evaluate(&images.batch(&rows), &nz) {
                Ok(e) => {
                    sums.0 += e.elbo.iter().sum::<f64>();
                    sums.1 += e.kl.iter().sum::<f64>();
                    sums.2 += e.loglik.iter().sum::<f64>();
                    evaluated += keep.len();
                    break;
                }
                Err(TensorError::Singular { rows: bad, .. }) => {
                    skipped += bad.len();
                    keep = keep.iter().enumerate().filter(|(i, _)| !bad.contains(i)).map(|(_, &k)| k).collect();
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    let n = evaluated.max(1) as f64;
    Ok(EvalSummary {
        elbo: sums.0 / n,
        kl: sums.1 / n,
        loglik: sums.2 / n,
        evaluated,
        skipped,
    })
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: Model,
    pub opt: AdagradState,
    pub step: u64,
    pub skips: u64,
    pub examples: u64,
    rng: seed::Rng,
    train: &'a ImageStack,
    test: Option<&'a ImageStack>,
    eval_indices: Vec<usize>,
}

fn eval_subset(config: &TrainConfig, test: Option<&ImageStack>) -> Vec<usize> {
    let Some(t) = test else { return Vec::new() };
    if t.n <= config.eval_examples {
        return (0..t.n).collect();
    }
    let mut rng = seed::rng_for(config.seed, "eval-subset");
    let mut v = index::sample(&mut rng, t.n, config.eval_examples).into_vec();
    v.sort_unstable();
    v
}

fn check_data(config: &TrainConfig, set: &ImageStack, what: &str) -> Result<(), TrainError> {
    let m = &config.model;
    if (set.h, set.w) != (m.image_h, m.image_w) {
        return Err(TrainError::Config(format!(
            "{what} images are {}x{}, model expects {}x{}",
            set.h, set.w, m.image_h, m.image_w
        )));
    }
    if set.n == 0 {
        return Err(TrainError::Config(format!("{what} set is empty")));
    }
    if m.likelihood.is_bernoulli() && !set.is_binary() {
        return Err(TrainError::Config(format!("{what} images must be binary for a Bernoulli likelihood")));
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    /// Fresh run: weights from `derive(seed, "init")`, minibatches and noise
    /// from `derive(seed, "train")`.
    pub fn new(config: TrainConfig, train: &'a ImageStack, test: Option<&'a ImageStack>) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        check_data(&config, train, "training")?;
        if let Some(t) = test {
            check_data(&config, t, "test")?;
        }
        let model = Model::new(config.model.clone(), seed::derive(config.seed, seed::key("init")))?;
        let opt = AdagradState::new(&model.store, config.learning_rate);
        Ok(Self {
            eval_indices: eval_subset(&config, test),
            rng: seed::rng_for(config.seed, "train"),
            config,
            model,
            opt,
            step: 0,
            skips: 0,
            examples: 0,
            train,
            test,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, train: &'a ImageStack, test: Option<&'a ImageStack>) -> Result<Self, TrainError> {
        let mut t = Self::new(ckpt.config.clone(), train, test)?;
        t.model = Model::from_params(ckpt.config.model.clone(), ckpt.params)?;
        if ckpt.accum.len() != t.model.store.len() {
            return Err(TrainError::Config("optimizer state does not match parameters".into()));
        }
        t.opt.accum = ckpt.accum;
        t.step = ckpt.step;
        t.skips = ckpt.skips;
        t.examples = ckpt.examples;
        t.rng = ckpt.rng.restore()?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            skips: self.skips,
            examples: self.examples,
            rng: RngState::capture(&self.rng),
            params: self.model.store.clone(),
            accum: self.opt.accum.clone(),
        }
    }

    /// One minibatch update; returns the training row for it.
    pub fn step_once(&mut self) -> Result<MetricRow, TrainError> {
        let n = self.train.n;
        let b = self.config.minibatch_size.min(n);
        let idx = index::sample(&mut self.rng, n, b).into_vec();
        let noise = self.model.sample_noise(b, &mut self.rng);
        let mut keep: Vec<usize> = (0..b).collect();
        let mut result = None;
        while !keep.is_empty() {
            let rows: Vec<usize> = keep.iter().map(|&k| idx[k]).collect();
            let nz: Vec<LayerNoise> = noise.iter().map(|z| z.select_rows(&keep)).collect();
            let x = self.train.batch(&rows);
            let tape = Tape::new();
            let p = self.model.store.bind(&tape);
            match self.model.forward(&p, &x, &nz) {
                Ok((terms, _)) => {
                    let total = terms.elbo.sum_all();
                    if !total.item().is_finite() {
                        return Err(TrainError::Divergence {
                            step: self.step,
                            what: "loss".into(),
                        });
                    }
                    let m = keep.len() as f64;
                    let means = (
                        total.item() / m,
                        terms.kl.value().data().iter().sum::<f64>() / m,
                        terms.loglik.value().data().iter().sum::<f64>() / m,
                    );
                    tape.backward(total.neg())?;
                    result = Some((p.grads(), means));
                    break;
                }
                Err(TensorError::Singular { rows: bad, .. }) => {
                    self.skips += bad.len() as u64;
                    keep = keep.iter().enumerate().filter(|(i, _)| !bad.contains(i)).map(|(_, &k)| k).collect();
                }
                Err(e @ TensorError::Domain { .. }) => {
                    return Err(TrainError::Divergence {
                        step: self.step,
                        what: e.to_string(),
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
        self.examples += b as u64;
        let (elbo, kl, loglik) = match result {
            Some((grads, means)) => {
                let decay = self.config.weight_decay_lambda * keep.len() as f64 / n as f64;
                self.opt
                    .step(&mut self.model.store, &grads, decay)
                    .map_err(|d| TrainError::Divergence {
                        step: self.step,
                        what: format!("gradient for '{}'", d.param),
                    })?;
                means
            }
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        self.step += 1;
        Ok(MetricRow {
            step: self.step,
            split: Split::Train,
            elbo_per_example: elbo,
            kl_total: kl,
            loglik,
            skips: self.skips,
        })
    }

    /// Test-subset evaluation with the run's fixed evaluation noise stream.
    pub fn evaluate_test(&self) -> Result<Option<MetricRow>, TrainError> {
        let Some(test) = self.test else { return Ok(None) };
        let mut rng = seed::rng_for(self.config.seed, "eval");
        let s = evaluate(&self.model, test, &self.eval_indices, &mut rng)?;
        Ok(Some(MetricRow {
            step: self.step,
            split: Split::Test,
            elbo_per_example: s.elbo,
            kl_total: s.kl,
            loglik: s.loglik,
            skips: self.skips,
        }))
    }

    fn check_skip_rate(&self) -> Result<(), TrainError> {
        let limit = self.config.max_skip_rate;
        if self.examples > 0 && self.skips as f64 > limit * self.examples as f64 {
            return Err(TrainError::SkipRate {
                skips: self.skips,
                examples: self.examples,
                limit,
            });
        }
        Ok(())
    }

    /// Trains up to `config.max_steps`, handing every metric row to `sink`.
    ///
    /// Test rows are produced at step 0, every `eval_every` steps and at the
    /// final step. Checkpoints go to `checkpoint_dir` every
    /// `checkpoint_every` steps and at the end.
    pub fn run(
        &mut self,
        mut sink: impl FnMut(&MetricRow) -> std::io::Result<()>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<(), TrainError> {
        let last = self.config.max_steps;
        if self.step == 0 {
            if let Some(r) = self.evaluate_test()? {
                sink(&r)?;
            }
        }
        while self.step < last {
            let row = self.step_once()?;
            sink(&row)?;
            if self.step.is_multiple_of(self.config.eval_every) || self.step == last {
                if let Some(r) = self.evaluate_test()? {
                    sink(&r)?;
                }
                self.check_skip_rate()?;
            }
            let every = self.config.checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if (every > 0 && self.step.is_multiple_of(every)) || self.step == last {
                    self.checkpoint().save(dir)?;
                }
            }
        }
        self.check_skip_rate()
    }
}
