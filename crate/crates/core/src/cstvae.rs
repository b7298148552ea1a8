//! Multi-layer model: layers composited front to back with the over operator,
//! and recognition that peels one layer at a time off a residual image.
//!
//! Pixel values double as premultiplied coverage, so over is
//! `front + (1 − front) · back`. Starting from a black canvas, layer `i`
//! goes behind everything composited so far.

use crate::nn::{Bound, ParamStore};
use crate::stvae::{LayerArch, LayerNoise, StvaeNets, StvaeTrace};
use crate::tape::Var;
use crate::tensor::{Result, Tensor, TensorError};
use crate::vae::{self, KlEstimator, LikelihoodModel};

fn check_unit(op: &str, t: &Tensor) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(TensorError::Contract(format!("{op}: pixel {v} outside [0, 1]")));
    }
    Ok(())
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `front ⊕ back` for premultiplied grayscale images in `[0, 1]`.
pub fn over(front: &Tensor, back: &Tensor) -> Result<Tensor> {
    check_same("over", front, back)?;
    check_unit("over", front)?;
    check_unit("over", back)?;
    let data = front
        .data()
        .iter()
        .zip(back.data())
        .map(|(f, b)| f + (1.0 - f) * b)
        .collect();
    Tensor::new(front.shape().to_vec(), data)
}

/// Left fold of [`over`] from a black canvas; `layers[0]` is front-most.
pub fn composite(layers: &[Tensor]) -> Result<Tensor> {
    let first = layers
        .first()
        .ok_or_else(|| TensorError::Contract("composite needs at least one layer".into()))?;
    layers
        .iter()
        .try_fold(Tensor::zeros(first.shape().to_vec()), |acc, l| over(&acc, l))
}

/// `max(0, delta − layer)`.
pub fn residual(delta: &Tensor, layer: &Tensor) -> Result<Tensor> {
    check_same("residual", delta, layer)?;
    let data = delta
        .data()
        .iter()
        .zip(layer.data())
        .map(|(d, l)| (d - l).max(0.0))
        .collect();
    Tensor::new(delta.shape().to_vec(), data)
}

/// Differentiable [`over`].
pub fn over_var<'t>(front: &Var<'t>, back: &Var<'t>) -> Result<Var<'t>> {
    front.add(&front.neg().add_scalar(1.0).mul(back)?)
}

/// Differentiable [`residual`].
pub fn residual_var<'t>(delta: &Var<'t>, layer: &Var<'t>) -> Result<Var<'t>> {
    Ok(delta.sub(layer)?.relu())
}

#[derive(Clone, Copy, Debug)]
pub struct LayerTrace<'t> {
    /// Residual image this layer was inferred from.
    pub delta: Var<'t>,
    pub stvae: StvaeTrace<'t>,
    /// Composite of layers `1..=i`.
    pub composite: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct CstvaeTrace<'t> {
    pub layers: Vec<LayerTrace<'t>>,
    pub reconstruction: Var<'t>,
}

/// Per-example terms of the bound.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms<'t> {
    pub elbo: Var<'t>,
    pub loglik: Var<'t>,
    pub kl: Var<'t>,
}

/// Per-layer networks, front-most first.
#[derive(Clone, Debug)]
pub struct Cstvae {
    pub layers: Vec<StvaeNets>,
}

/// Posterior-mean decomposition of a batch.
#[derive(Clone, Debug)]
pub struct Decomposition {
    /// `[B, h, w]` per layer, front-most first.
    pub layers: Vec<Tensor>,
    pub canonicals: Vec<Tensor>,
    /// `[B, 6]` per layer.
    pub poses: Vec<Tensor>,
    pub reconstruction: Tensor,
}

impl Cstvae {
    /// Builds `n_layers` layer networks. With `tied`, every layer reuses the
    /// parameters registered for layer 0.
    pub fn build(store: &mut ParamStore, arch: &LayerArch, n_layers: usize, tied: bool, init_seed: u64) -> Result<Self> {
        if n_layers == 0 {
            return Err(TensorError::Contract("layer count must be at least 1".into()));
        }
        let mut layers: Vec<StvaeNets> = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            if tied && i > 0 {
                layers.push(layers[0].clone());
            } else {
                layers.push(StvaeNets::build(store, &format!("layer{i}"), arch, init_seed)?);
            }
        }
        Ok(Self { layers })
    }

    pub fn arch(&self) -> &LayerArch {
        &self.layers[0].arch
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Front-to-back recognition with residual peeling, followed by compositing.
    ///
    /// `image` is `[B, h, w]` with values in `[0, 1]`.
    pub fn infer<'t>(&self, p: &Bound<'t>, image: &Var<'t>, noise: &[LayerNoise]) -> Result<CstvaeTrace<'t>> {
        if noise.len() != self.layers.len() {
            return Err(TensorError::Contract(format!(
                "{} noise draws for {} layers",
                noise.len(),
                self.layers.len()
            )));
        }
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut delta = *image;
        let mut acc: Option<Var<'t>> = None;
        for (i, (nets, eps)) in self.layers.iter().zip(noise).enumerate() {
            let tr = nets.encode(p, &delta, eps)?;
            // over(0, L) = L exactly, so the black canvas is implicit.
            let composite = match acc {
                None => tr.layer,
                Some(front) => over_var(&front, &tr.layer)?,
            };
            traces.push(LayerTrace {
                delta,
                stvae: tr,
                composite,
            });
            acc = Some(composite);
            if i + 1 < self.layers.len() {
                delta = residual_var(&delta, &tr.layer)?;
            }
        }
        Ok(CstvaeTrace {
            reconstruction: acc.expect("at least one layer"),
            layers: traces,
        })
    }

    /// Per-example ELBO: `log p(x | x_N) − Σ_i [KL(q_T,i) + KL(q_C,i)]`.
    pub fn elbo_step<'t>(
        &self,
        p: &Bound<'t>,
        x: &Tensor,
        noise: &[LayerNoise],
        likelihood: LikelihoodModel,
        estimator: KlEstimator,
    ) -> Result<(ElboTerms<'t>, CstvaeTrace<'t>)> {
        let tape = p.vars()[0].tape();
        let trace = self.infer(p, &tape.constant(x.clone()), noise)?;
        let loglik = vae::log_likelihood(x, &trace.reconstruction, likelihood)?;
        let mut kl: Option<Var<'t>> = None;
        for ((nets, lt), eps) in self.layers.iter().zip(&trace.layers).zip(noise) {
            let k = nets.kl(&lt.stvae, eps, estimator)?;
            kl = Some(match kl {
                None => k,
                Some(acc) => acc.add(&k)?,
            });
        }
        let kl = kl.expect("at least one layer");
        let elbo = vae::elbo(&loglik, &[kl])?;
        Ok((ElboTerms { elbo, loglik, kl }, trace))
    }

    /// Runs recognition at the posterior means and returns each layer.
    pub fn decompose(&self, store: &ParamStore, x: &Tensor) -> Result<Decomposition> {
        let tape = crate::tape::Tape::new();
        let p = store.bind_frozen(&tape);
        let batch = x.shape()[0];
        let noise: Vec<LayerNoise> = self
            .layers
            .iter()
            .map(|n| LayerNoise::zeros(&n.arch, batch))
            .collect();
        let trace = self.infer(&p, &tape.constant(x.clone()), &noise)?;
        let mut out = Decomposition {
            layers: Vec::new(),
            canonicals: Vec::new(),
            poses: Vec::new(),
            reconstruction: trace.reconstruction.value().as_ref().clone(),
        };
        for l in &trace.layers {
            out.layers.push(l.stvae.layer.value().as_ref().clone());
            out.canonicals.push(l.stvae.canonical.value().as_ref().clone());
            out.poses.push(l.stvae.theta.value().as_ref().clone());
        }
        Ok(out)
    }
}
