//! Supervised probes: a two-hidden-layer ReLU network trained with the same
//! Adagrad harness as the generative models.
//!
//! Pair labels are predicted by two softmax heads, one for the smaller digit
//! and one for the larger, and scored without regard to order.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ImageStack, Labels};
use crate::nn::{Activation, Mlp, ParamStore};
use crate::seed;
use crate::spatial::{warp, AffineTransform};
use crate::tape::Tape;
use crate::tensor::{Result, Tensor, TensorError};
use crate::train::AdagradState;

/// Chance level of naming both digits of an unordered pair.
pub const CHANCE_BOTH_DIGITS: f64 = 0.018;

pub const REPORT_HEADER: &str = "model,input_kind,train_acc,test_acc,seed";

const CLASSES: usize = 10;
const EVAL_CHUNK: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    LatentMeans,
    RawPixels,
    RawPixelsWithStn,
}

impl InputKind {
    pub fn name(self) -> &'static str {
        match self {
            InputKind::LatentMeans => "latent_means",
            InputKind::RawPixels => "raw_pixels",
            InputKind::RawPixelsWithStn => "raw_pixels_with_stn",
        }
    }
}

impl std::str::FromStr for InputKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "latent_means" => Ok(InputKind::LatentMeans),
            "raw_pixels" => Ok(InputKind::RawPixels),
            "raw_pixels_with_stn" => Ok(InputKind::RawPixelsWithStn),
            _ => Err(format!(
                "unknown input kind '{s}' (expected latent_means, raw_pixels or raw_pixels_with_stn)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub input: InputKind,
    /// Width of both hidden layers.
    pub hidden: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::minibatch_size")]
    pub minibatch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::weight_decay_lambda")]
    pub weight_decay_lambda: f64,
    /// Hidden widths of the localization network for `raw_pixels_with_stn`.
    #[serde(default = "defaults::localizer_hidden")]
    pub localizer_hidden: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn epochs() -> usize {
        30
    }
    pub fn minibatch_size() -> usize {
        100
    }
    pub fn learning_rate() -> f64 {
        0.01
    }
    pub fn weight_decay_lambda() -> f64 {
        1.0
    }
    pub fn localizer_hidden() -> Vec<usize> {
        vec![32, 32]
    }
}

impl ClassifierConfig {
    pub fn new(input: InputKind, hidden: usize, seed: u64) -> Self {
        Self {
            input,
            hidden,
            epochs: defaults::epochs(),
            minibatch_size: defaults::minibatch_size(),
            learning_rate: defaults::learning_rate(),
            weight_decay_lambda: defaults::weight_decay_lambda(),
            localizer_hidden: defaults::localizer_hidden(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.minibatch_size == 0 {
            return Err(TensorError::Contract("hidden, epochs and minibatch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay_lambda >= 0.0) {
            return Err(TensorError::Contract("learning rate and decay must be non-negative".into()));
        }
        if self.input == InputKind::RawPixelsWithStn && self.localizer_hidden.contains(&0) {
            return Err(TensorError::Contract("localizer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Classifier inputs: precomputed feature rows or raw images.
#[derive(Clone, Copy, Debug)]
pub enum Examples<'a> {
    Features(&'a Tensor),
    Images(&'a ImageStack),
}

impl Examples<'_> {
    pub fn len(&self) -> usize {
        match self {
            Examples::Features(t) => t.shape()[0],
            Examples::Images(s) => s.n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn width(&self) -> usize {
        match self {
            Examples::Features(t) => t.shape()[1],
            Examples::Images(s) => s.pixels(),
        }
    }

    fn batch(&self, rows: &[usize]) -> Tensor {
        match self {
            Examples::Features(t) => t.select_rows(rows),
            Examples::Images(s) => s.batch(rows),
        }
    }
}

/// Targets per head: the digit, or the sorted pair.
fn targets(labels: &Labels) -> Vec<Vec<u8>> {
    match labels {
        Labels::Single(l) => l.iter().map(|&d| vec![d]).collect(),
        Labels::Pair(l) => l.iter().map(|p| vec![p[0].min(p[1]), p[0].max(p[1])]).collect(),
    }
}

fn check_labels(labels: &Labels) -> Result<()> {
    let all: Vec<u8> = match labels {
        Labels::Single(l) => l.clone(),
        Labels::Pair(l) => l.iter().flatten().copied().collect(),
    };
    if let Some(bad) = all.iter().find(|&&d| d as usize >= CLASSES) {
        return Err(TensorError::Contract(format!("label {bad} is not a digit")));
    }
    if all.iter().all(|&d| d == all[0]) {
        return Err(TensorError::Contract("labels contain fewer than two distinct classes".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub store: ParamStore,
    net: Mlp,
    localizer: Option<(Mlp, usize, usize)>,
    heads: usize,
}

/// Both-digit and at-least-one-digit accuracy. For single labels they agree.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub both: f64,
    pub single: f64,
}

impl Classifier {
    fn build(config: &ClassifierConfig, x: &Examples<'_>, heads: usize) -> Result<Self> {
        config.validate()?;
        let init = seed::derive(config.seed, seed::key("classifier-init"));
        let mut store = ParamStore::new();
        let localizer = match (config.input, x) {
            (InputKind::RawPixelsWithStn, Examples::Images(s)) => {
                let mut dims = vec![s.pixels()];
                dims.extend_from_slice(&config.localizer_hidden);
                dims.push(6);
                let loc = Mlp::build(&mut store, "localizer", &dims, Activation::Tanh, Activation::Identity, init)?;
                let last = loc.last();
                store.get_mut(last.weight).data_mut().fill(0.0);
                store.get_mut(last.bias).data_mut().copy_from_slice(&AffineTransform::IDENTITY);
                Some((loc, s.h, s.w))
            }
            (InputKind::LatentMeans, Examples::Features(_)) | (InputKind::RawPixels, Examples::Images(_)) => None,
            (kind, _) => {
                return Err(TensorError::Contract(format!(
                    "input kind {} does not match the examples supplied",
                    kind.name()
                )))
            }
        };
        let h = config.hidden;
        let net = Mlp::build(
            &mut store,
            "classifier",
            &[x.width(), h, h, heads * CLASSES],
            Activation::Relu,
            Activation::Identity,
            init,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            net,
            localizer,
            heads,
        })
    }

    /// Log-probabilities `[B, heads·10]`, each head normalized separately.
    fn log_probs<'t>(&self, p: &crate::nn::Bound<'t>, x: &Tensor) -> Result<crate::tape::Var<'t>> {
        let tape = p.vars()[0].tape();
        let b = x.shape()[0];
        let mut input = tape.constant(x.clone());
        if let Some((loc, h, w)) = &self.localizer {
            let flat = input.reshape(vec![b, h * w])?;
            let theta = loc.forward(p, &flat)?;
            input = warp(&input, &theta, *h, *w)?;
        }
        let flat = input.reshape(vec![b, x.numel() / b])?;
        let logits = self.net.forward(p, &flat)?;
        let heads: Vec<_> = (0..self.heads)
            .map(|k| logits.narrow(1, k * CLASSES, CLASSES)?.log_softmax())
            .collect::<Result<_>>()?;
        crate::tape::concat(&heads, 1)
    }

    /// Trains on `x` with `labels` for `config.epochs` passes.
    pub fn train(config: &ClassifierConfig, x: Examples<'_>, labels: &Labels) -> Result<Self> {
        if x.len() != labels.len() || x.is_empty() {
            return Err(TensorError::Contract(format!(
                "{} examples but {} labels",
                x.len(),
                labels.len()
            )));
        }
        check_labels(labels)?;
        let t = targets(labels);
        let heads = t[0].len();
        let mut clf = Self::build(config, &x, heads)?;
        let mut opt = AdagradState::new(&clf.store, config.learning_rate);
        let mut rng = seed::rng_for(config.seed, "classifier");
        let n = x.len();
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for rows in order.chunks(config.minibatch_size) {
                let tape = Tape::new();
                let p = clf.store.bind(&tape);
                let logp = clf.log_probs(&p, &x.batch(rows))?;
                let mut onehot = vec![0.0; rows.len() * heads * CLASSES];
                for (i, &r) in rows.iter().enumerate() {
                    for (k, &d) in t[r].iter().enumerate() {
                        onehot[(i * heads + k) * CLASSES + d as usize] = 1.0;
                    }
                }
                let mask = tape.constant(Tensor::new(vec![rows.len(), heads * CLASSES], onehot)?);
                let loss = logp.mul(&mask)?.sum_all().neg();
                tape.backward(loss)?;
                let decay = config.weight_decay_lambda * rows.len() as f64 / n as f64;
                opt.step(&mut clf.store, &p.grads(), decay)
                    .map_err(|d| TensorError::Contract(format!("classifier diverged at '{}'", d.param)))?;
            }
        }
        Ok(clf)
    }

    /// Most probable digit per head.
    pub fn predict(&self, x: Examples<'_>) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::with_capacity(x.len());
        let all: Vec<usize> = (0..x.len()).collect();
        for rows in all.chunks(EVAL_CHUNK) {
            let tape = Tape::new();
            let p = self.store.bind_frozen(&tape);
            let logp = self.log_probs(&p, &x.batch(rows))?.value();
            for i in 0..rows.len() {
                let row = logp.row(i);
                out.push(
                    (0..self.heads)
                        .map(|k| argmax(&row[k * CLASSES..(k + 1) * CLASSES]) as u8)
                        .collect(),
                );
            }
        }
        Ok(out)
    }

    pub fn accuracy(&self, x: Examples<'_>, labels: &Labels) -> Result<Accuracy> {
        if x.len() != labels.len() || x.is_empty() {
            return Err(TensorError::Contract(format!("{} examples but {} labels", x.len(), labels.len())));
        }
        Ok(score(&self.predict(x)?, labels))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Scores predictions; pairs match when they are equal as multisets.
pub fn score(pred: &[Vec<u8>], labels: &Labels) -> Accuracy {
    let n = pred.len().max(1) as f64;
    match labels {
        Labels::Single(l) => {
            let hits = pred.iter().zip(l).filter(|(p, &d)| p[0] == d).count() as f64 / n;
            Accuracy { both: hits, single: hits }
        }
        Labels::Pair(l) => {
            let (mut both, mut single) = (0usize, 0usize);
            for (p, t) in pred.iter().zip(l) {
                let mut ps = [p[0], p[1]];
                let mut ts = *t;
                ps.sort_unstable();
                ts.sort_unstable();
                if ps == ts {
                    both += 1;
                }
                if p.iter().any(|d| t.contains(d)) {
                    single += 1;
                }
            }
            Accuracy {
                both: both as f64 / n,
                single: single as f64 / n,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub model: String,
    pub input_kind: InputKind,
    pub train: Accuracy,
    pub test: Accuracy,
    pub seed: u64,
}

impl ClassifierReport {
    /// One row under [`REPORT_HEADER`]; accuracies are both-digit for pairs.
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{}",
            self.model,
            self.input_kind.name(),
            self.train.both,
            self.test.both,
            self.seed
        )
    }
}

/// Trains on one split and scores both.
pub fn train_and_report(
    model: &str,
    config: &ClassifierConfig,
    train: (Examples<'_>, &Labels),
    test: (Examples<'_>, &Labels),
) -> Result<ClassifierReport> {
    let clf = Classifier::train(config, train.0, train.1)?;
    Ok(ClassifierReport {
        model: model.to_string(),
        input_kind: config.input,
        train: clf.accuracy(train.0, train.1)?,
        test: clf.accuracy(test.0, test.1)?,
        seed: config.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unordered_pair_scoring() {
        let labels = Labels::Pair(vec![[3, 7], [1, 1], [2, 5]]);
        let pred = vec![vec![7, 3], vec![1, 2], vec![0, 9]];
        let acc = score(&pred, &labels);
        assert!((acc.both - 1.0 / 3.0).abs() < 1e-12);
        assert!((acc.single - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_labels_rejected() {
        let x = Tensor::zeros(vec![4, 2]);
        let cfg = ClassifierConfig::new(InputKind::LatentMeans, 4, 0);
        let err = Classifier::train(&cfg, Examples::Features(&x), &Labels::Single(vec![3; 4]));
        assert!(matches!(err, Err(TensorError::Contract(_))));
    }

    #[test]
    fn learns_separable_features() {
        // Two clusters per digit pair along distinct axes.
        let n = 200;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let d = (i % 4) as u8;
            let mut row = vec![0.0; 4];
            row[d as usize] = 2.0 + (i as f64 * 0.37).sin() * 0.1;
            data.extend(row);
            labels.push(d);
        }
        let x = Tensor::new(vec![n, 4], data).unwrap();
        let labels = Labels::Single(labels);
        let mut cfg = ClassifierConfig::new(InputKind::LatentMeans, 16, 1);
        cfg.epochs = 20;
        cfg.minibatch_size = 20;
        cfg.learning_rate = 0.1;
        let clf = Classifier::train(&cfg, Examples::Features(&x), &labels).unwrap();
        assert_eq!(clf.accuracy(Examples::Features(&x), &labels).unwrap().both, 1.0);
    }

    #[test]
    fn stn_input_starts_at_identity() {
        let imgs = ImageStack::new(2, 4, 4, (0..32).map(|v| (v % 2) as f32).collect()).unwrap();
        let cfg = ClassifierConfig::new(InputKind::RawPixelsWithStn, 8, 0);
        let stn = Classifier::build(&cfg, &Examples::Images(&imgs), 1).unwrap();
        let plain_cfg = ClassifierConfig::new(InputKind::RawPixels, 8, 0);
        let plain = Classifier::build(&plain_cfg, &Examples::Images(&imgs), 1).unwrap();
        let tape = Tape::new();
        let a = stn.log_probs(&stn.store.bind_frozen(&tape), &imgs.to_tensor()).unwrap();
        let b = plain.log_probs(&plain.store.bind_frozen(&tape), &imgs.to_tensor()).unwrap();
        assert!(a.value().max_abs_diff(&b.value()) < 1e-12);
    }

    #[test]
    fn mismatched_input_kind() {
        let x = Tensor::zeros(vec![2, 3]);
        let cfg = ClassifierConfig::new(InputKind::RawPixels, 4, 0);
        assert!(Classifier::train(&cfg, Examples::Features(&x), &Labels::Single(vec![0, 1])).is_err());
    }
}
