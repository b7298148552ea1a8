//! Gaussian latents, pixel likelihoods and the evidence lower bound.
//!
//! Everything here is batched along the leading axis: latents are `[B, d]`,
//! images are `[B, ...]`, and per-example terms come back as `[B]`.

use serde::{Deserialize, Serialize};

use crate::tape::Var;
use crate::tensor::{Result, Tensor, TensorError};

/// Floor/ceiling applied to Bernoulli probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-6;

/// Diagonal Gaussian posterior `N(mu, exp(logvar))`, one row per example.
#[derive(Clone, Copy, Debug)]
pub struct GaussianLatent<'t> {
    pub mu: Var<'t>,
    pub logvar: Var<'t>,
}

impl<'t> GaussianLatent<'t> {
    pub fn new(mu: Var<'t>, logvar: Var<'t>) -> Result<Self> {
        if mu.shape() != logvar.shape() {
            return Err(TensorError::Shape {
                op: "gaussian_latent",
                lhs: mu.shape(),
                rhs: logvar.shape(),
            });
        }
        Ok(Self { mu, logvar })
    }

    pub fn dim(&self) -> usize {
        *self.mu.shape().last().unwrap_or(&1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum LikelihoodModel {
    /// Bernoulli with probability `clamp(x̂, ε, 1 − ε)`.
    #[default]
    Bernoulli,
    /// Bernoulli with probability `σ(x̂)`.
    BernoulliSigmoid,
    Gaussian { variance: f64 },
}


impl LikelihoodModel {
    pub const DEFAULT_GAUSSIAN_VARIANCE: f64 = 0.1;

    pub fn gaussian() -> Self {
        LikelihoodModel::Gaussian {
            variance: Self::DEFAULT_GAUSSIAN_VARIANCE,
        }
    }

    pub fn is_bernoulli(&self) -> bool {
        !matches!(self, LikelihoodModel::Gaussian { .. })
    }
}

/// How the `−log Q(z) + log P(z)` part of the bound is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Closed-form KL to the standard normal prior.
    #[default]
    Analytic,
    /// Single-sample `log Q(z) − log P(z)` at the reparameterized draw.
    Sampled,
}

fn check_noise(q: &GaussianLatent<'_>, noise: &Tensor) -> Result<()> {
    if q.mu.shape() != noise.shape() {
        return Err(TensorError::Shape {
            op: "reparam_sample",
            lhs: q.mu.shape(),
            rhs: noise.shape().to_vec(),
        });
    }
    Ok(())
}

/// `z = mu + exp(logvar / 2) ⊙ noise`; `noise` is treated as a constant.
pub fn reparam_sample<'t>(q: &GaussianLatent<'t>, noise: &Tensor) -> Result<Var<'t>> {
    check_noise(q, noise)?;
    let eps = q.mu.tape().constant(noise.clone());
    let std = q.logvar.mul_scalar(0.5).exp();
    q.mu.add(&std.mul(&eps)?)
}

fn last_axis(v: &Var<'_>) -> Vec<usize> {
    let n = v.shape().len();
    if n == 0 {
        vec![]
    } else {
        vec![n - 1]
    }
}

/// `Σ_d ½(μ² + σ² − 1 − log σ²)` per row.
pub fn kl_to_standard_normal<'t>(q: &GaussianLatent<'t>) -> Result<Var<'t>> {
    let terms = q
        .mu
        .square()
        .add(&q.logvar.exp())?
        .sub(&q.logvar)?
        .add_scalar(-1.0)
        .mul_scalar(0.5);
    terms.sum(&last_axis(&terms))
}

/// `log Q(z) − log P(z)` per row at `z = mu + σ ⊙ noise`.
///
/// Equals `Σ_d ½(z² − noise² − logvar)`; its expectation over `noise` is the
/// analytic KL.
pub fn sampled_kl<'t>(q: &GaussianLatent<'t>, z: &Var<'t>, noise: &Tensor) -> Result<Var<'t>> {
    check_noise(q, noise)?;
    let eps_sq = z.tape().constant(noise.map(|e| e * e));
    let terms = z.square().sub(&eps_sq)?.sub(&q.logvar)?.mul_scalar(0.5);
    terms.sum(&last_axis(&terms))
}

fn event_axes(shape: &[usize]) -> Vec<usize> {
    (1..shape.len()).collect()
}

/// Per-example log-likelihood of observation `x` under reconstruction `x_hat`.
///
/// Both are `[B, ...]`; the result is `[B]`.
pub fn log_likelihood<'t>(x: &Tensor, x_hat: &Var<'t>, model: LikelihoodModel) -> Result<Var<'t>> {
    if x.shape() != x_hat.shape().as_slice() {
        return Err(TensorError::Shape {
            op: "log_likelihood",
            lhs: x.shape().to_vec(),
            rhs: x_hat.shape(),
        });
    }
    let tape = x_hat.tape();
    let axes = event_axes(x.shape());
    let per_pixel = match model {
        LikelihoodModel::Bernoulli | LikelihoodModel::BernoulliSigmoid => {
            if let Some(bad) = x.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(TensorError::Contract(format!(
                    "bernoulli likelihood needs binary observations, found {bad}"
                )));
            }
            let p = match model {
                LikelihoodModel::Bernoulli => *x_hat,
                _ => x_hat.sigmoid(),
            }
            .clamp(PROB_EPS, 1.0 - PROB_EPS);
            let on = tape.constant(x.clone());
            let off = tape.constant(x.map(|v| 1.0 - v));
            on.mul(&p.log()?)?.add(&off.mul(&p.neg().add_scalar(1.0).log()?)?)?
        }
        LikelihoodModel::Gaussian { variance } => {
            if variance <= 0.0 {
                return Err(TensorError::Contract(format!(
                    "gaussian variance must be positive, got {variance}"
                )));
            }
            let norm = -0.5 * (2.0 * std::f64::consts::PI * variance).ln();
            let target = tape.constant(x.clone());
            x_hat
                .sub(&target)?
                .square()
                .mul_scalar(-0.5 / variance)
                .add_scalar(norm)
        }
    };
    if axes.is_empty() {
        Ok(per_pixel)
    } else {
        per_pixel.sum(&axes)
    }
}

/// `loglik − Σ kls`, elementwise over the batch.
pub fn elbo<'t>(loglik: &Var<'t>, kls: &[Var<'t>]) -> Result<Var<'t>> {
    kls.iter().try_fold(*loglik, |acc, kl| acc.sub(kl))
}
