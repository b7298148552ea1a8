//! Single-layer spatially transformed VAE.
//!
//! Generative side: a content decoder produces a canonical image
//! `C = σ(f_C(z_C))`, a pose decoder produces six affine entries
//! `T = f_T(z_T)`, and the layer is `L = stn(C, T)`.
//!
//! Recognition is two-stage. The pose encoder reads `L` and yields `q(z_T)`;
//! the sampled pose is decoded with the *same* `f_T`, its inverse warps `L`
//! back to a canonical estimate `Ĉ`, and only `Ĉ` is seen by the content
//! encoder.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Bound, Mlp, ParamStore};
use crate::spatial::{invert_affine, warp, AffineTransform};
use crate::tape::Var;
use crate::tensor::{Result, Tensor, TensorError};
use crate::vae::{self, GaussianLatent, KlEstimator, LikelihoodModel};

/// Bounds applied to encoder log-variances before exponentiation.
pub const LOGVAR_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerArch {
    pub image_h: usize,
    pub image_w: usize,
    pub content_dim: usize,
    pub pose_dim: usize,
    pub content_hidden: Vec<usize>,
    pub pose_hidden: Vec<usize>,
    /// When false the pose is pinned to the identity transform and no pose
    /// networks or pose latents exist.
    pub learn_pose: bool,
}

impl LayerArch {
    pub fn pixels(&self) -> usize {
        self.image_h * self.image_w
    }
}

#[derive(Clone, Debug)]
pub struct PoseNets {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

#[derive(Clone, Debug)]
pub struct StvaeNets {
    pub arch: LayerArch,
    pub content_encoder: Mlp,
    pub content_decoder: Mlp,
    pub pose: Option<PoseNets>,
}

/// Standard-normal draws for one layer's latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNoise {
    pub pose: Option<Tensor>,
    pub content: Tensor,
}

impl LayerNoise {
    pub fn zeros(arch: &LayerArch, batch: usize) -> Self {
        Self {
            pose: arch.learn_pose.then(|| Tensor::zeros(vec![batch, arch.pose_dim])),
            content: Tensor::zeros(vec![batch, arch.content_dim]),
        }
    }

    pub fn sample<R: Rng + ?Sized>(arch: &LayerArch, batch: usize, rng: &mut R) -> Self {
        let mut draw = |d: usize| {
            let data = (0..batch * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::new(vec![batch, d], data).expect("noise shape")
        };
        let pose = arch.learn_pose.then(|| draw(arch.pose_dim));
        let content = draw(arch.content_dim);
        Self { pose, content }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            pose: self.pose.as_ref().map(|p| p.select_rows(rows)),
            content: self.content.select_rows(rows),
        }
    }
}

/// Intermediate values of one layer's recognition and reconstruction.
#[derive(Clone, Copy, Debug)]
pub struct StvaeTrace<'t> {
    pub q_pose: Option<GaussianLatent<'t>>,
    pub z_pose: Option<Var<'t>>,
    /// Pose decoded from the sampled pose latent, `[B, 6]`.
    pub theta: Var<'t>,
    /// `stn(L, T̂⁻¹)`.
    pub canonical_estimate: Var<'t>,
    pub q_content: GaussianLatent<'t>,
    pub z_content: Var<'t>,
    /// Decoded canonical image `C`.
    pub canonical: Var<'t>,
    /// Decoded layer `L = stn(C, T)`.
    pub layer: Var<'t>,
}

/// Output of the generative half.
#[derive(Clone, Copy, Debug)]
pub struct Decoded<'t> {
    pub canonical: Var<'t>,
    pub theta: Var<'t>,
    pub layer: Var<'t>,
}

fn split_gaussian<'t>(out: Var<'t>, dim: usize) -> Result<GaussianLatent<'t>> {
    let mu = out.narrow(1, 0, dim)?;
    let logvar = out.narrow(1, dim, dim)?.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1);
    GaussianLatent::new(mu, logvar)
}

impl StvaeNets {
    pub fn build(store: &mut ParamStore, prefix: &str, arch: &LayerArch, init_seed: u64) -> Result<Self> {
        let d = arch.pixels();
        let dims = |first: usize, hidden: &[usize], last: usize| {
            let mut v = vec![first];
            v.extend_from_slice(hidden);
            v.push(last);
            v
        };
        let content_encoder = Mlp::build(
            store,
            &format!("{prefix}.content_enc"),
            &dims(d, &arch.content_hidden, 2 * arch.content_dim),
            Activation::Relu,
            Activation::Identity,
            init_seed,
        )?;
        let content_decoder = Mlp::build(
            store,
            &format!("{prefix}.content_dec"),
            &dims(arch.content_dim, &arch.content_hidden, d),
            Activation::Relu,
            Activation::Sigmoid,
            init_seed,
        )?;
        let pose = if arch.learn_pose {
            if arch.pose_dim == 0 {
                return Err(TensorError::Dimension {
                    op: "stvae",
                    msg: "pose latent dimension must be positive".into(),
                });
            }
            let encoder = Mlp::build(
                store,
                &format!("{prefix}.pose_enc"),
                &dims(d, &arch.pose_hidden, 2 * arch.pose_dim),
                Activation::Tanh,
                Activation::Identity,
                init_seed,
            )?;
            let decoder = Mlp::build(
                store,
                &format!("{prefix}.pose_dec"),
                &dims(arch.pose_dim, &arch.pose_hidden, 6),
                Activation::Tanh,
                Activation::Identity,
                init_seed,
            )?;
            // Start every pose at the identity transform.
            let last = decoder.last();
            store.get_mut(last.weight).data_mut().fill(0.0);
            store
                .get_mut(last.bias)
                .data_mut()
                .copy_from_slice(&AffineTransform::IDENTITY);
            Some(PoseNets { encoder, decoder })
        } else {
            None
        };
        Ok(Self {
            arch: arch.clone(),
            content_encoder,
            content_decoder,
            pose,
        })
    }

    fn identity_theta<'t>(&self, p: &Bound<'t>, batch: usize) -> Result<Var<'t>> {
        let tape = p.vars()[0].tape();
        tape.constant(Tensor::new(vec![6], AffineTransform::IDENTITY.to_vec())?)
            .tile(batch)
    }

    /// `f_T(z_T)`, or the identity when the pose is frozen.
    pub fn decode_pose<'t>(&self, p: &Bound<'t>, z_pose: Option<&Var<'t>>, batch: usize) -> Result<Var<'t>> {
        match (&self.pose, z_pose) {
            (Some(nets), Some(z)) => nets.decoder.forward(p, z),
            (None, _) => self.identity_theta(p, batch),
            (Some(_), None) => Err(TensorError::Contract("pose latent required".into())),
        }
    }

    /// `C = σ(f_C(z_C))` reshaped to `[B, h, w]`.
    pub fn decode_content<'t>(&self, p: &Bound<'t>, z_content: &Var<'t>) -> Result<Var<'t>> {
        let batch = z_content.shape()[0];
        self.content_decoder
            .forward(p, z_content)?
            .reshape(vec![batch, self.arch.image_h, self.arch.image_w])
    }

    pub fn decode<'t>(&self, p: &Bound<'t>, z_content: &Var<'t>, z_pose: Option<&Var<'t>>) -> Result<Decoded<'t>> {
        let batch = z_content.shape()[0];
        let canonical = self.decode_content(p, z_content)?;
        let theta = self.decode_pose(p, z_pose, batch)?;
        self.place(canonical, theta)
    }

    fn place<'t>(&self, canonical: Var<'t>, theta: Var<'t>) -> Result<Decoded<'t>> {
        let layer = warp(&canonical, &theta, self.arch.image_h, self.arch.image_w)?;
        Ok(Decoded {
            canonical,
            theta,
            layer,
        })
    }

    /// Two-stage recognition followed by reconstruction of the layer.
    ///
    /// `image` is `[B, h, w]`. Fails with [`TensorError::Singular`] when a
    /// sampled pose cannot be inverted.
    pub fn encode<'t>(&self, p: &Bound<'t>, image: &Var<'t>, noise: &LayerNoise) -> Result<StvaeTrace<'t>> {
        let shape = image.shape();
        let expected = [shape[0], self.arch.image_h, self.arch.image_w];
        if shape.as_slice() != expected {
            return Err(TensorError::Shape {
                op: "stvae.encode",
                lhs: shape,
                rhs: expected.to_vec(),
            });
        }
        let batch = shape[0];
        let flat = image.reshape(vec![batch, self.arch.pixels()])?;

        let (q_pose, z_pose) = match (&self.pose, &noise.pose) {
            (Some(nets), Some(eps)) => {
                let q = split_gaussian(nets.encoder.forward(p, &flat)?, self.arch.pose_dim)?;
                let z = vae::reparam_sample(&q, eps)?;
                (Some(q), Some(z))
            }
            (None, _) => (None, None),
            (Some(_), None) => return Err(TensorError::Contract("pose noise required".into())),
        };
        let theta = self.decode_pose(p, z_pose.as_ref(), batch)?;
        let inverse = invert_affine(&theta)?;
        let canonical_estimate = warp(image, &inverse, self.arch.image_h, self.arch.image_w)?;

        let c_flat = canonical_estimate.reshape(vec![batch, self.arch.pixels()])?;
        let q_content = split_gaussian(self.content_encoder.forward(p, &c_flat)?, self.arch.content_dim)?;
        let z_content = vae::reparam_sample(&q_content, &noise.content)?;

        // The generative pose is f_T at the same sampled latent, i.e. `theta`.
        let decoded = self.place(self.decode_content(p, &z_content)?, theta)?;
        Ok(StvaeTrace {
            q_pose,
            z_pose,
            theta,
            canonical_estimate,
            q_content,
            z_content,
            canonical: decoded.canonical,
            layer: decoded.layer,
        })
    }

    /// Per-example `KL(q_T) + KL(q_C)` (or the sampled estimate).
    pub fn kl<'t>(&self, trace: &StvaeTrace<'t>, noise: &LayerNoise, estimator: KlEstimator) -> Result<Var<'t>> {
        let one = |q: &GaussianLatent<'t>, z: &Var<'t>, eps: &Tensor| match estimator {
            KlEstimator::Analytic => vae::kl_to_standard_normal(q),
            KlEstimator::Sampled => vae::sampled_kl(q, z, eps),
        };
        let content = one(&trace.q_content, &trace.z_content, &noise.content)?;
        match (&trace.q_pose, &trace.z_pose, &noise.pose) {
            (Some(q), Some(z), Some(eps)) => content.add(&one(q, z, eps)?),
            _ => Ok(content),
        }
    }

    /// One-layer ELBO per example: `log p(x | L) − KL(q_T) − KL(q_C)`.
    pub fn elbo_step<'t>(
        &self,
        p: &Bound<'t>,
        x: &Tensor,
        noise: &LayerNoise,
        likelihood: LikelihoodModel,
        estimator: KlEstimator,
    ) -> Result<(Var<'t>, StvaeTrace<'t>)> {
        let tape = p.vars()[0].tape();
        let image = tape.constant(x.clone());
        let trace = self.encode(p, &image, noise)?;
        let loglik = vae::log_likelihood(x, &trace.layer, likelihood)?;
        let kl = self.kl(&trace, noise, estimator)?;
        Ok((vae::elbo(&loglik, &[kl])?, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn arch(learn_pose: bool) -> LayerArch {
        LayerArch {
            image_h: 6,
            image_w: 6,
            content_dim: 2,
            pose_dim: 6,
            content_hidden: vec![8],
            pose_hidden: vec![4],
            learn_pose,
        }
    }

    fn image(batch: usize) -> Tensor {
        let data = (0..batch * 36).map(|k| ((k * 37 + 11) % 5 == 0) as u8 as f64).collect();
        Tensor::new(vec![batch, 6, 6], data).unwrap()
    }

    #[test]
    fn fresh_pose_decoder_emits_identity() {
        let mut store = ParamStore::new();
        let nets = StvaeNets::build(&mut store, "l0", &arch(true), 5).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let z_c = tape.constant(Tensor::zeros(vec![1, 2]));
        let z_t = tape.constant(Tensor::zeros(vec![1, 6]));
        let d = nets.decode(&p, &z_c, Some(&z_t)).unwrap();
        assert_eq!(d.theta.value().data(), &AffineTransform::IDENTITY);
        assert!(d.layer.value().max_abs_diff(&d.canonical.value()) <= 1e-12);
        // arbitrary pose latents still give identity: the final pose layer starts at zero
        let z_t = tape.constant(Tensor::full(vec![1, 6], 3.0));
        let d = nets.decode(&p, &z_c, Some(&z_t)).unwrap();
        assert_eq!(d.theta.value().data(), &AffineTransform::IDENTITY);
    }

    #[test]
    fn layers_stay_in_unit_interval() {
        let mut store = ParamStore::new();
        let nets = StvaeNets::build(&mut store, "l0", &arch(true), 5).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let z_c = tape.constant(Tensor::full(vec![2, 2], 40.0));
        let z_t = tape.constant(Tensor::full(vec![2, 6], -3.0));
        let d = nets.decode(&p, &z_c, Some(&z_t)).unwrap();
        assert!(d.layer.value().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_noise_gives_posterior_means() {
        let mut store = ParamStore::new();
        let a = arch(true);
        let nets = StvaeNets::build(&mut store, "l0", &a, 5).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(image(3));
        let tr = nets.encode(&p, &x, &LayerNoise::zeros(&a, 3)).unwrap();
        assert_eq!(tr.z_pose.unwrap().value().data(), tr.q_pose.unwrap().mu.value().data());
        assert_eq!(tr.z_content.value().data(), tr.q_content.mu.value().data());
        // identity pose at init: Ĉ = L
        assert!(tr.canonical_estimate.value().max_abs_diff(&x.value()) <= 1e-12);
    }

    #[test]
    fn elbo_is_finite_on_random_binary_images() {
        let mut store = ParamStore::new();
        let a = arch(true);
        let nets = StvaeNets::build(&mut store, "l0", &a, 11).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let mut rng = crate::seed::rng(4);
        let noise = LayerNoise::sample(&a, 4, &mut rng);
        let (elbo, _) = nets
            .elbo_step(&p, &image(4), &noise, LikelihoodModel::Bernoulli, KlEstimator::Analytic)
            .unwrap();
        assert!(elbo.value().all_finite());
        assert_eq!(elbo.shape(), vec![4]);
    }

    #[test]
    fn content_posterior_sees_only_the_canonical_estimate() {
        // Pin T̂ to a 2× zoom-out: its inverse reads only the central 4×4
        // block of a 6×6 image, so editing the border leaves Ĉ and q_C alone.
        let mut store = ParamStore::new();
        let a = arch(true);
        let nets = StvaeNets::build(&mut store, "l0", &a, 2).unwrap();
        let bias = nets.pose.as_ref().unwrap().decoder.last().bias;
        store.get_mut(bias).data_mut().copy_from_slice(&[2.0, 0.0, 0.0, 0.0, 2.0, 0.0]);

        let x = image(1);
        let mut edited = x.clone();
        for (k, v) in edited.data_mut().iter_mut().enumerate() {
            let (i, j) = (k / 6, k % 6);
            if i == 0 || j == 0 || i == 5 || j == 5 {
                *v = 1.0 - *v;
            }
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut rng = crate::seed::rng(8);
        let noise = LayerNoise::sample(&a, 1, &mut rng);
        let tr1 = nets.encode(&p, &tape.constant(x), &noise).unwrap();
        let tr2 = nets.encode(&p, &tape.constant(edited), &noise).unwrap();
        assert_eq!(tr1.theta.value().data(), tr2.theta.value().data());
        assert_eq!(tr1.canonical_estimate.value().data(), tr2.canonical_estimate.value().data());
        assert_eq!(tr1.q_content.mu.value().data(), tr2.q_content.mu.value().data());
        assert_eq!(tr1.q_content.logvar.value().data(), tr2.q_content.logvar.value().data());
        // while the pose posterior did see the edit
        assert_ne!(tr1.q_pose.unwrap().mu.value().data(), tr2.q_pose.unwrap().mu.value().data());
    }
}
