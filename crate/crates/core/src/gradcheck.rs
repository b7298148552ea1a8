//! Central finite-difference gradient checking.
//!
//! [`check`] perturbs every scalar of every input by `±h`, compares the
//! central difference with the tape's gradient, and skips coordinates where
//! the one-sided differences disagree (the perturbation straddled a kink).
//! [`suite`] bundles the checks run by the `gradcheck` command.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::cstvae::Cstvae;
use crate::nn::{Bound, ParamStore};
use crate::seed;
use crate::spatial::{affine_grid, grid_sample, invert_affine, warp};
use crate::stvae::{LayerArch, LayerNoise, StvaeNets};
use crate::tape::{concat, Tape, Var};
use crate::tensor::{Result, Tensor};
use crate::vae::{self, GaussianLatent, KlEstimator, LikelihoodModel};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose one-sided differences disagreed.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    /// Passes when every smooth coordinate is within tolerance and at most 5%
    /// of coordinates had to be skipped.
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance && self.skipped_kinks * 20 <= self.checked + self.skipped_kinks
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<32} max_rel_err={:.3e} tol={:.0e} checked={} kinks={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.checked,
            self.skipped_kinks
        )
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares analytic and numeric gradients of the scalar `f(inputs)`.
pub fn check<F>(name: &str, inputs: &[Tensor], h: f64, tolerance: f64, f: F) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    let f0 = loss.item();
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let mut report = CheckReport {
        name: name.to_string(),
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
        tolerance,
    };
    let mut xs = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = xs[k].data()[j];
            xs[k].data_mut()[j] = orig + h;
            let fp = eval(&xs)?;
            xs[k].data_mut()[j] = orig - h;
            let fm = eval(&xs)?;
            xs[k].data_mut()[j] = orig;
            let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
            let central = (fp - fm) / (2.0 * h);
            if (fwd - bwd).abs() > 1e-3 * central.abs().max(1.0) {
                report.skipped_kinks += 1;
                continue;
            }
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err(grad.data()[j], central));
        }
    }
    Ok(report)
}

/// Like [`check`] but over every parameter of `store`.
pub fn check_params<F>(name: &str, store: &ParamStore, h: f64, tolerance: f64, f: F) -> Result<CheckReport>
where
    F: for<'t> Fn(&Bound<'t>) -> Result<Var<'t>>,
{
    let inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    check(name, &inputs, h, tolerance, |_, vars| f(&Bound::from_vars(vars.to_vec())))
}

fn randn(rng: &mut seed::Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn uniform(rng: &mut seed::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Values with `|x| > 0.05`, clear of the ReLU kink.
fn away_from_zero(rng: &mut seed::Rng, shape: &[usize]) -> Tensor {
    randn(rng, shape, 1.0).map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x })
}

/// `Σ w ⊙ v` with fixed random weights, so every output entry matters.
fn project<'t>(v: Var<'t>, rng_seed: u64) -> Result<Var<'t>> {
    let mut rng = seed::rng(rng_seed);
    let w = v.tape().constant(randn(&mut rng, &v.shape(), 1.0));
    Ok(v.mul(&w)?.sum_all())
}

fn random_theta(rng: &mut seed::Rng, batch: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch * 6);
    for _ in 0..batch {
        let base = [0.9, 0.0, 0.0, 0.0, 0.9, 0.0];
        data.extend(base.iter().map(|b| b + rng.random_range(-0.15..0.15)));
    }
    Tensor::new(vec![batch, 6], data).expect("theta")
}

pub fn tensor_suite(seed_: u64) -> Result<Vec<CheckReport>> {
    let mut rng = seed::rng_for(seed_, "gradcheck.tensor");
    let h = DEFAULT_STEP;
    let tol = 1e-4;
    let a = randn(&mut rng, &[3, 4], 1.0);
    let b = randn(&mut rng, &[4, 2], 1.0);
    let c = randn(&mut rng, &[3, 4], 1.0);
    let pos = uniform(&mut rng, &[3, 4], 0.5, 2.0);
    let kinked = away_from_zero(&mut rng, &[3, 4]);
    let t3 = randn(&mut rng, &[2, 3, 4], 1.0);
    let r = &mut rng;
    let s = r.random();
    Ok(vec![
        check("matmul", &[a.clone(), b.clone()], h, tol, |_, v| project(v[0].matmul(&v[1])?, s))?,
        check("add", &[a.clone(), c.clone()], h, tol, |_, v| project(v[0].add(&v[1])?, s))?,
        check("sub", &[a.clone(), c.clone()], h, tol, |_, v| project(v[0].sub(&v[1])?, s))?,
        check("mul", &[a.clone(), c.clone()], h, tol, |_, v| project(v[0].mul(&v[1])?, s))?,
        check("div", &[a.clone(), pos.clone()], h, tol, |_, v| project(v[0].div(&v[1])?, s))?,
        check("scalar_broadcast", &[a.clone(), Tensor::scalar(0.7)], h, tol, |_, v| {
            project(v[0].mul(&v[1])?.add(&v[1])?, s)
        })?,
        check("add_scalar_mul_scalar", std::slice::from_ref(&a), h, tol, |_, v| project(v[0].add_scalar(0.3).mul_scalar(-1.7), s))?,
        check("relu", &[kinked], h, tol, |_, v| project(v[0].relu(), s))?,
        check("tanh", std::slice::from_ref(&a), h, tol, |_, v| project(v[0].tanh(), s))?,
        check("sigmoid", std::slice::from_ref(&a), h, tol, |_, v| project(v[0].sigmoid(), s))?,
        check("log", std::slice::from_ref(&pos), h, tol, |_, v| project(v[0].log()?, s))?,
        check("exp", std::slice::from_ref(&a), h, tol, |_, v| project(v[0].exp(), s))?,
        check("clamp", &[a.map(|x| x * 0.4)], h, tol, |_, v| project(v[0].clamp(-0.3, 0.3), s))?,
        check("sum_axes", std::slice::from_ref(&t3), h, tol, |_, v| project(v[0].sum(&[0, 2])?, s))?,
        check("mean_axes", std::slice::from_ref(&t3), h, tol, |_, v| project(v[0].mean(&[1])?, s))?,
        check("reshape", std::slice::from_ref(&t3), h, tol, |_, v| project(v[0].reshape(vec![6, 4])?, s))?,
        check("tile", std::slice::from_ref(&c), h, tol, |_, v| project(v[0].tile(3)?, s))?,
        check("narrow", std::slice::from_ref(&t3), h, tol, |_, v| project(v[0].narrow(2, 1, 2)?, s))?,
        check("concat", &[a.clone(), c.clone()], h, tol, |_, v| project(concat(&[v[0], v[1]], 1)?, s))?,
        check("log_softmax", &[a], h, tol, |_, v| project(v[0].log_softmax()?, s))?,
    ])
}

pub fn spatial_suite(seed_: u64) -> Result<Vec<CheckReport>> {
    let mut rng = seed::rng_for(seed_, "gradcheck.spatial");
    let h = DEFAULT_STEP;
    let tol = 1e-4;
    let src = uniform(&mut rng, &[2, 5, 6], 0.0, 1.0);
    let theta = random_theta(&mut rng, 2);
    let grid = uniform(&mut rng, &[2, 4, 3, 2], -1.2, 1.2);
    let s = rng.random();
    Ok(vec![
        check("affine_grid", std::slice::from_ref(&theta), h, tol, |_, v| project(affine_grid(&v[0], 4, 5)?, s))?,
        check("grid_sample", &[src.clone(), grid], h, tol, |_, v| project(grid_sample(&v[0], &v[1])?, s))?,
        check("warp_src_and_theta", &[src.clone(), theta.clone()], h, tol, |_, v| {
            project(warp(&v[0], &v[1], 5, 6)?, s)
        })?,
        check("warp_sum_theta", std::slice::from_ref(&theta), h, tol, |t, v| {
            Ok(warp(&t.constant(src.clone()), &v[0], 5, 6)?.sum_all())
        })?,
        check("invert_affine", &[theta], h, tol, |_, v| project(invert_affine(&v[0])?, s))?,
    ])
}

pub fn vae_suite(seed_: u64) -> Result<Vec<CheckReport>> {
    let mut rng = seed::rng_for(seed_, "gradcheck.vae");
    let h = DEFAULT_STEP;
    let tol = 1e-4;
    let mu = randn(&mut rng, &[3, 4], 1.0);
    let logvar = randn(&mut rng, &[3, 4], 0.5);
    let noise = randn(&mut rng, &[3, 4], 1.0);
    let x = uniform(&mut rng, &[3, 5], 0.0, 1.0).map(|v| (v > 0.5) as u8 as f64);
    let xg = uniform(&mut rng, &[3, 5], 0.0, 1.0);
    let probs = uniform(&mut rng, &[3, 5], 0.05, 0.95);
    let logits = randn(&mut rng, &[3, 5], 1.0);
    let s = rng.random();
    let n2 = noise.clone();
    let n3 = noise.clone();
    let (x1, x2, x3) = (x.clone(), x.clone(), xg);
    Ok(vec![
        check("reparam_sample", &[mu.clone(), logvar.clone()], h, tol, move |_, v| {
            project(vae::reparam_sample(&GaussianLatent::new(v[0], v[1])?, &noise)?, s)
        })?,
        check("kl_to_standard_normal", &[mu.clone(), logvar.clone()], h, tol, |_, v| {
            project(vae::kl_to_standard_normal(&GaussianLatent::new(v[0], v[1])?)?, s)
        })?,
        check("sampled_kl", &[mu.clone(), logvar.clone()], h, tol, move |_, v| {
            let q = GaussianLatent::new(v[0], v[1])?;
            let z = vae::reparam_sample(&q, &n2)?;
            project(vae::sampled_kl(&q, &z, &n2)?, s)
        })?,
        check("bernoulli_loglik", &[probs], h, tol, move |_, v| {
            project(vae::log_likelihood(&x1, &v[0], LikelihoodModel::Bernoulli)?, s)
        })?,
        check("bernoulli_sigmoid_loglik", &[logits], h, tol, move |_, v| {
            project(vae::log_likelihood(&x2, &v[0], LikelihoodModel::BernoulliSigmoid)?, s)
        })?,
        check("gaussian_loglik", &[uniform(&mut rng, &[3, 5], 0.0, 1.0)], h, tol, move |_, v| {
            project(vae::log_likelihood(&x3, &v[0], LikelihoodModel::gaussian())?, s)
        })?,
        check("elbo", &[mu, logvar], h, tol, move |t, v| {
            let q = GaussianLatent::new(v[0], v[1])?;
            let z = vae::reparam_sample(&q, &n3)?.sigmoid().narrow(1, 0, 4)?;
            let target = Tensor::new(vec![3, 4], x.data()[..12].to_vec())?;
            let ll = vae::log_likelihood(&target, &z, LikelihoodModel::Bernoulli)?;
            let _ = t;
            vae::elbo(&ll, &[vae::kl_to_standard_normal(&q)?])?.sum(&[0])
        })?,
    ])
}

/// The miniature architecture of the end-to-end checks: 6×6 images, content
/// width 8, pose width 4, two content dimensions.
pub fn miniature_arch() -> LayerArch {
    LayerArch {
        image_h: 6,
        image_w: 6,
        content_dim: 2,
        pose_dim: 6,
        content_hidden: vec![8],
        pose_hidden: vec![4],
        learn_pose: true,
    }
}

/// Moves every pose decoder off the exact identity so sampling grids do not
/// sit on pixel centres, where bilinear interpolation has kinks.
pub fn perturb_pose_decoders(store: &mut ParamStore, layers: &[StvaeNets], rng: &mut seed::Rng) {
    for l in layers {
        if let Some(p) = &l.pose {
            let last = p.decoder.last();
            let w = store.get_mut(last.weight);
            for v in w.data_mut() {
                *v = rng.random_range(-0.05..0.05);
            }
            let b = store.get_mut(last.bias);
            for v in b.data_mut() {
                *v += rng.random_range(-0.12..0.12);
            }
        }
    }
}

fn miniature_images(rng: &mut seed::Rng, batch: usize) -> Tensor {
    uniform(rng, &[batch, 6, 6], 0.0, 1.0).map(|v| (v > 0.6) as u8 as f64)
}

pub fn stvae_suite(seed_: u64) -> Result<Vec<CheckReport>> {
    let mut rng = seed::rng_for(seed_, "gradcheck.stvae");
    let arch = miniature_arch();
    let mut store = ParamStore::new();
    let nets = StvaeNets::build(&mut store, "layer0", &arch, seed_)?;
    perturb_pose_decoders(&mut store, std::slice::from_ref(&nets), &mut rng);
    let x = miniature_images(&mut rng, 2);
    let noise = LayerNoise::sample(&arch, 2, &mut rng);
    let mut out = Vec::new();
    for est in [KlEstimator::Analytic, KlEstimator::Sampled] {
        out.push(check_params(&format!("stvae_neg_elbo_{est:?}").to_lowercase(), &store, DEFAULT_STEP, 1e-3, |p| {
            let (elbo, _) = nets.elbo_step(p, &x, &noise, LikelihoodModel::Bernoulli, est)?;
            Ok(elbo.sum_all().neg())
        })?);
    }
    Ok(out)
}

pub fn cstvae_suite(seed_: u64) -> Result<Vec<CheckReport>> {
    let mut rng = seed::rng_for(seed_, "gradcheck.cstvae");
    let arch = miniature_arch();
    let mut store = ParamStore::new();
    let model = Cstvae::build(&mut store, &arch, 2, false, seed_)?;
    perturb_pose_decoders(&mut store, &model.layers, &mut rng);
    let x = miniature_images(&mut rng, 2);
    let noise: Vec<LayerNoise> = (0..2).map(|_| LayerNoise::sample(&arch, 2, &mut rng)).collect();
    Ok(vec![check_params("cstvae2_neg_elbo", &store, DEFAULT_STEP, 1e-3, |p| {
        let (terms, _) = model.elbo_step(p, &x, &noise, LikelihoodModel::Bernoulli, KlEstimator::Analytic)?;
        Ok(terms.elbo.sum_all().neg())
    })?])
}

pub const MODULES: [&str; 5] = ["tensor", "spatial", "vae", "stvae", "cstvae"];

/// Runs the suite for one module name, or every suite for `all`.
pub fn suite(module: &str, seed_: u64) -> Result<Option<Vec<CheckReport>>> {
    let run = |m: &str| -> Result<Vec<CheckReport>> {
        match m {
            "tensor" => tensor_suite(seed_),
            "spatial" => spatial_suite(seed_),
            "vae" => vae_suite(seed_),
            "stvae" => stvae_suite(seed_),
            _ => cstvae_suite(seed_),
        }
    };
    if module == "all" {
        let mut out = Vec::new();
        for m in MODULES {
            out.extend(run(m)?);
        }
        return Ok(Some(out));
    }
    if MODULES.contains(&module) {
        Ok(Some(run(module)?))
    } else {
        Ok(None)
    }
}
