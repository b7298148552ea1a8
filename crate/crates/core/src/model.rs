//! The three model families behind one interface.
//!
//! Every model is a stack of layer networks: the VAE baseline is a single
//! layer whose pose is pinned to the identity, the ST-VAE is a single layer
//! with a learned pose, and the CST-VAE composites `layers` of them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cstvae::{self, CstvaeTrace, Cstvae, ElboTerms};
use crate::nn::{Bound, ParamStore};
use crate::stvae::{LayerArch, LayerNoise};
use crate::tape::{concat, Tape};
use crate::tensor::{Result, Tensor, TensorError};
use crate::vae::{KlEstimator, LikelihoodModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vae,
    Stvae,
    Cstvae,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::Stvae => "stvae",
            ModelKind::Cstvae => "cstvae",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vae" => Ok(ModelKind::Vae),
            "stvae" => Ok(ModelKind::Stvae),
            "cstvae" => Ok(ModelKind::Cstvae),
            _ => Err(format!("unknown model kind '{s}' (expected vae, stvae or cstvae)")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub image_h: usize,
    pub image_w: usize,
    /// Content latent dimension per layer.
    pub content_dim: usize,
    pub pose_dim: usize,
    pub content_hidden: Vec<usize>,
    pub pose_hidden: Vec<usize>,
    pub layers: usize,
    #[serde(default)]
    pub tied: bool,
    #[serde(default)]
    pub likelihood: LikelihoodModel,
    #[serde(default)]
    pub kl_estimator: KlEstimator,
}

impl ModelConfig {
    /// Single-layer models get 50 content dimensions, composited ones 20 per
    /// layer over two layers.
    pub fn defaults(kind: ModelKind, image_h: usize, image_w: usize) -> Self {
        let (content_dim, layers) = match kind {
            ModelKind::Cstvae => (20, 2),
            _ => (50, 1),
        };
        Self {
            kind,
            image_h,
            image_w,
            content_dim,
            pose_dim: 6,
            content_hidden: vec![256, 256],
            pose_hidden: vec![32, 32],
            layers,
            tied: false,
            likelihood: LikelihoodModel::Bernoulli,
            kl_estimator: KlEstimator::Analytic,
        }
    }

    pub fn layer_arch(&self) -> LayerArch {
        LayerArch {
            image_h: self.image_h,
            image_w: self.image_w,
            content_dim: self.content_dim,
            pose_dim: self.pose_dim,
            content_hidden: self.content_hidden.clone(),
            pose_hidden: self.pose_hidden.clone(),
            learn_pose: self.kind != ModelKind::Vae,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Contract(msg));
        if self.image_h < 2 || self.image_w < 2 {
            return bad(format!("image size {}x{} is too small", self.image_h, self.image_w));
        }
        if self.content_dim == 0 || self.layers == 0 {
            return bad("content_dim and layers must be positive".into());
        }
        if self.kind != ModelKind::Cstvae && self.layers != 1 {
            return bad(format!("{} is a single-layer model, got layers = {}", self.kind, self.layers));
        }
        if self.kind != ModelKind::Vae && self.pose_dim == 0 {
            return bad("pose_dim must be positive".into());
        }
        if let LikelihoodModel::Gaussian { variance } = self.likelihood {
            if variance <= 0.0 {
                return bad(format!("gaussian variance must be positive, got {variance}"));
            }
        }
        Ok(())
    }

    /// Total latent dimensions across layers.
    pub fn latent_dims(&self) -> usize {
        let pose = if self.kind == ModelKind::Vae { 0 } else { self.pose_dim };
        self.layers * (self.content_dim + pose)
    }
}

/// Per-example bound terms evaluated without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub elbo: Vec<f64>,
    pub loglik: Vec<f64>,
    pub kl: Vec<f64>,
}

/// Ancestral samples from the generative model.
#[derive(Clone, Debug)]
pub struct Generated {
    /// `[B, h, w]` per layer, front-most first.
    pub canonicals: Vec<Tensor>,
    pub poses: Vec<Tensor>,
    pub layers: Vec<Tensor>,
    pub composite: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub nets: Cstvae,
}

impl Model {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let nets = Cstvae::build(&mut store, &config.layer_arch(), config.layers, config.tied, init_seed)?;
        Ok(Self { config, store, nets })
    }

    /// Rebuilds the networks for `config` and adopts `store`, which must hold
    /// exactly the parameters the networks register, in the same order.
    pub fn from_params(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        let expected: Vec<(&str, &[usize])> = fresh.store.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = store.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != got {
            return Err(TensorError::Contract(format!(
                "parameter registry does not match a {} model ({} expected, {} found)",
                fresh.config.kind,
                expected.len(),
                got.len()
            )));
        }
        Ok(Self { store, ..fresh })
    }

    pub fn zero_noise(&self, batch: usize) -> Vec<LayerNoise> {
        self.nets
            .layers
            .iter()
            .map(|n| LayerNoise::zeros(&n.arch, batch))
            .collect()
    }

    /// Noise for every layer, drawn layer by layer.
    pub fn sample_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<LayerNoise> {
        self.nets
            .layers
            .iter()
            .map(|n| LayerNoise::sample(&n.arch, batch, rng))
            .collect()
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: &Tensor,
        noise: &[LayerNoise],
    ) -> Result<(ElboTerms<'t>, CstvaeTrace<'t>)> {
        self.nets
            .elbo_step(p, x, noise, self.config.likelihood, self.config.kl_estimator)
    }

    pub fn evaluate(&self, x: &Tensor, noise: &[LayerNoise]) -> Result<Evaluation> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let (terms, _) = self.forward(&p, x, noise)?;
        Ok(Evaluation {
            elbo: terms.elbo.value().data().to_vec(),
            loglik: terms.loglik.value().data().to_vec(),
            kl: terms.kl.value().data().to_vec(),
        })
    }

    /// Posterior content means, concatenated across layers: `[B, layers·z_C]`.
    pub fn content_means(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let batch = x.shape()[0];
        let trace = self
            .nets
            .infer(&p, &tape.constant(x.clone()), &self.zero_noise(batch))?;
        let mus: Vec<_> = trace.layers.iter().map(|l| l.stvae.q_content.mu).collect();
        Ok(concat(&mus, 1)?.value().as_ref().clone())
    }

    /// Each layer's input pulled back into canonical position by its
    /// posterior-mean pose.
    pub fn canonical_estimates(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let batch = x.shape()[0];
        let trace = self
            .nets
            .infer(&p, &tape.constant(x.clone()), &self.zero_noise(batch))?;
        Ok(trace
            .layers
            .iter()
            .map(|l| l.stvae.canonical_estimate.value().as_ref().clone())
            .collect())
    }

    /// Draws every latent from the prior and decodes.
    pub fn generate<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Generated> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let mut draw = |d: usize| {
            let data = (0..batch * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::new(vec![batch, d], data)
        };
        let mut out = Generated {
            canonicals: Vec::new(),
            poses: Vec::new(),
            layers: Vec::new(),
            composite: Tensor::zeros(vec![batch, self.config.image_h, self.config.image_w]),
        };
        for nets in &self.nets.layers {
            let z_pose = if nets.pose.is_some() {
                Some(tape.constant(draw(nets.arch.pose_dim)?))
            } else {
                None
            };
            let z_content = tape.constant(draw(nets.arch.content_dim)?);
            let d = nets.decode(&p, &z_content, z_pose.as_ref())?;
            out.canonicals.push(d.canonical.value().as_ref().clone());
            out.poses.push(d.theta.value().as_ref().clone());
            out.layers.push(d.layer.value().as_ref().clone());
        }
        out.composite = cstvae::composite(&out.layers)?;
        Ok(out)
    }
}
