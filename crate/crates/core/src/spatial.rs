//! Differentiable affine warping of grayscale images.
//!
//! Coordinates are normalized to `[-1, 1]` with aligned corners: pixel 0 maps
//! to −1 and pixel `n − 1` to +1. A transform maps *output* coordinates to
//! *source* coordinates (gather semantics), so `stn(C, T)` reads `C` at
//! `T · (x_out, y_out, 1)` for every output pixel. Reads outside the source
//! image see zeros.

use serde::{Deserialize, Serialize};

use crate::tape::{Backward, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// `|det|` at or below this is treated as singular.
pub const SINGULARITY_THRESHOLD: f64 = 1e-6;

/// Row-major `[a b tx; c d ty]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [f64; 6],
}

impl AffineTransform {
    pub const IDENTITY: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

    pub fn new(m: [f64; 6]) -> Self {
        Self { m }
    }

    pub fn identity() -> Self {
        Self { m: Self::IDENTITY }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [1.0, 0.0, tx, 0.0, 1.0, ty],
        }
    }

    pub fn det(&self) -> f64 {
        self.m[0] * self.m[4] - self.m[1] * self.m[3]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }

    pub fn invert(&self) -> Result<Self> {
        let det = self.det();
        if det.abs() <= SINGULARITY_THRESHOLD || !det.is_finite() {
            return Err(TensorError::Singular { rows: vec![0], det });
        }
        Ok(Self { m: invert_raw(&self.m, det) })
    }

    pub fn then(&self, outer: &AffineTransform) -> AffineTransform {
        // outer ∘ self
        let (a, b) = (&outer.m, &self.m);
        AffineTransform {
            m: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }
}

fn invert_raw(m: &[f64; 6], det: f64) -> [f64; 6] {
    let [a, b, tx, c, d, ty] = *m;
    let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
    [ia, ib, -(ia * tx + ib * ty), ic, id, -(ic * tx + id * ty)]
}

/// Normalized output coordinate of pixel index `i` on an axis of extent `n`.
#[inline]
pub fn normalized(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (n - 1) as f64
}

fn check_extent(h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(TensorError::Dimension {
            op: "make_grid",
            msg: format!("grid extents must be at least 2, got {h}x{w}"),
        });
    }
    Ok(())
}

fn fill_grid(m: &[f64], out_h: usize, out_w: usize, dst: &mut [f64]) {
    let mut k = 0;
    for i in 0..out_h {
        let y = normalized(i, out_h);
        for j in 0..out_w {
            let x = normalized(j, out_w);
            dst[k] = m[0] * x + m[1] * y + m[2];
            dst[k + 1] = m[3] * x + m[4] * y + m[5];
            k += 2;
        }
    }
}

/// Source coordinates `(x, y)` for every output pixel: `[out_h, out_w, 2]`.
pub fn make_grid(t: &AffineTransform, out_h: usize, out_w: usize) -> Result<Tensor> {
    check_extent(out_h, out_w)?;
    let mut data = vec![0.0; out_h * out_w * 2];
    fill_grid(&t.m, out_h, out_w, &mut data);
    Tensor::new(vec![out_h, out_w, 2], data)
}

struct Corner {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

#[inline]
fn corner(gx: f64, gy: f64, h: usize, w: usize) -> Option<Corner> {
    let px = (gx + 1.0) * (w - 1) as f64 * 0.5;
    let py = (gy + 1.0) * (h - 1) as f64 * 0.5;
    // Entirely outside (or non-finite): every tap is zero padding.
    if !(px > -1.0 && py > -1.0 && px < w as f64 && py < h as f64) {
        return None;
    }
    // floor() without the libm call; valid because px, py > -1 here.
    let x0 = if px < 0.0 { -1 } else { px as isize };
    let y0 = if py < 0.0 { -1 } else { py as isize };
    Some(Corner {
        x0,
        y0,
        fx: px - x0 as f64,
        fy: py - y0 as f64,
    })
}

#[inline]
fn tap(src: &[f64], h: usize, w: usize, x: isize, y: isize) -> f64 {
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        src[y as usize * w + x as usize]
    } else {
        0.0
    }
}

/// The four taps `[v00, v01, v10, v11]` around a corner, zero outside.
#[inline]
fn taps(src: &[f64], h: usize, w: usize, c: &Corner) -> [f64; 4] {
    let (x, y) = (c.x0, c.y0);
    if x >= 0 && y >= 0 && (x as usize) + 1 < w && (y as usize) + 1 < h {
        let k = y as usize * w + x as usize;
        [src[k], src[k + 1], src[k + w], src[k + w + 1]]
    } else {
        [
            tap(src, h, w, x, y),
            tap(src, h, w, x + 1, y),
            tap(src, h, w, x, y + 1),
            tap(src, h, w, x + 1, y + 1),
        ]
    }
}

fn sample_one(src: &[f64], h: usize, w: usize, gx: f64, gy: f64) -> f64 {
    let Some(c) = corner(gx, gy, h, w) else { return 0.0 };
    let [v00, v01, v10, v11] = taps(src, h, w, &c);
    (1.0 - c.fy) * ((1.0 - c.fx) * v00 + c.fx * v01) + c.fy * ((1.0 - c.fx) * v10 + c.fx * v11)
}

fn sample_batch(src: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let (ss, gs) = (src.shape(), grid.shape());
    if ss.len() != 3 || gs.len() != 4 || gs[3] != 2 || ss[0] != gs[0] {
        return Err(TensorError::Shape {
            op: "bilinear_sample",
            lhs: ss.to_vec(),
            rhs: gs.to_vec(),
        });
    }
    let (b, h, w) = (ss[0], ss[1], ss[2]);
    let (oh, ow) = (gs[1], gs[2]);
    let mut out = vec![0.0; b * oh * ow];
    for n in 0..b {
        let img = &src.data()[n * h * w..(n + 1) * h * w];
        let g = &grid.data()[n * oh * ow * 2..(n + 1) * oh * ow * 2];
        for (p, o) in out[n * oh * ow..(n + 1) * oh * ow].iter_mut().enumerate() {
            *o = sample_one(img, h, w, g[2 * p], g[2 * p + 1]);
        }
    }
    Tensor::new(vec![b, oh, ow], out)
}

/// Bilinear read of `src: [h, w]` at `grid: [out_h, out_w, 2]` normalized coordinates.
pub fn bilinear_sample(src: &Tensor, grid: &Tensor) -> Result<Tensor> {
    if src.shape().len() != 2 || grid.shape().len() != 3 {
        return Err(TensorError::Shape {
            op: "bilinear_sample",
            lhs: src.shape().to_vec(),
            rhs: grid.shape().to_vec(),
        });
    }
    let mut ss = vec![1];
    ss.extend_from_slice(src.shape());
    let mut gs = vec![1];
    gs.extend_from_slice(grid.shape());
    let out = sample_batch(&src.reshape(ss)?, &grid.reshape(gs)?)?;
    out.reshape(vec![grid.shape()[0], grid.shape()[1]])
}

/// Warps `src: [h, w]` by `t` onto an `out_h × out_w` grid.
pub fn stn(src: &Tensor, t: &AffineTransform, out_h: usize, out_w: usize) -> Result<Tensor> {
    bilinear_sample(src, &make_grid(t, out_h, out_w)?)
}

struct GridRule {
    out_h: usize,
    out_w: usize,
}

impl Backward for GridRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64], _wanted: &[bool]) -> Vec<Option<Vec<f64>>> {
        let b = inputs[0].shape()[0];
        let per = self.out_h * self.out_w * 2;
        let mut d = vec![0.0; b * 6];
        for n in 0..b {
            let g = &grad[n * per..(n + 1) * per];
            let dt = &mut d[n * 6..n * 6 + 6];
            let mut k = 0;
            for i in 0..self.out_h {
                let y = normalized(i, self.out_h);
                for j in 0..self.out_w {
                    let x = normalized(j, self.out_w);
                    let (gx, gy) = (g[k], g[k + 1]);
                    dt[0] += gx * x;
                    dt[1] += gx * y;
                    dt[2] += gx;
                    dt[3] += gy * x;
                    dt[4] += gy * y;
                    dt[5] += gy;
                    k += 2;
                }
            }
        }
        vec![Some(d)]
    }
}

fn check_theta(op: &'static str, theta: &Tensor) -> Result<usize> {
    let s = theta.shape();
    if s.len() != 2 || s[1] != 6 {
        return Err(TensorError::Dimension {
            op,
            msg: format!("expected [batch, 6] transforms, got {s:?}"),
        });
    }
    Ok(s[0])
}

/// Batched grid generation: `theta: [B, 6]` → `[B, out_h, out_w, 2]`.
pub fn affine_grid<'t>(theta: &Var<'t>, out_h: usize, out_w: usize) -> Result<Var<'t>> {
    check_extent(out_h, out_w)?;
    let tv = theta.value();
    let b = check_theta("affine_grid", &tv)?;
    let per = out_h * out_w * 2;
    let mut data = vec![0.0; b * per];
    for n in 0..b {
        fill_grid(&tv.data()[n * 6..n * 6 + 6], out_h, out_w, &mut data[n * per..(n + 1) * per]);
    }
    let out = Tensor::new(vec![b, out_h, out_w, 2], data)?;
    Ok(theta.tape().custom(&[*theta], out, Box::new(GridRule { out_h, out_w })))
}

struct SampleRule;

impl Backward for SampleRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64], wanted: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (src, grid) = (inputs[0], inputs[1]);
        let (b, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
        let (oh, ow) = (grid.shape()[1], grid.shape()[2]);
        let mut dsrc = vec![0.0; src.numel()];
        let mut dgrid = vec![0.0; grid.numel()];
        let sx = (w - 1) as f64 * 0.5;
        let sy = (h - 1) as f64 * 0.5;
        for n in 0..b {
            let img = &src.data()[n * h * w..(n + 1) * h * w];
            let dimg = &mut dsrc[n * h * w..(n + 1) * h * w];
            let gbase = n * oh * ow * 2;
            for p in 0..oh * ow {
                let g = grad[n * oh * ow + p];
                if g == 0.0 {
                    continue;
                }
                let (gx, gy) = (grid.data()[gbase + 2 * p], grid.data()[gbase + 2 * p + 1]);
                let Some(c) = corner(gx, gy, h, w) else { continue };
                if wanted[0] {
                    let (x, y) = (c.x0, c.y0);
                    let wts = [
                        (1.0 - c.fx) * (1.0 - c.fy),
                        c.fx * (1.0 - c.fy),
                        (1.0 - c.fx) * c.fy,
                        c.fx * c.fy,
                    ];
                    if x >= 0 && y >= 0 && (x as usize) + 1 < w && (y as usize) + 1 < h {
                        let k = y as usize * w + x as usize;
                        dimg[k] += g * wts[0];
                        dimg[k + 1] += g * wts[1];
                        dimg[k + w] += g * wts[2];
                        dimg[k + w + 1] += g * wts[3];
                    } else {
                        let corners = [(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)];
                        for (&(tx, ty), wt) in corners.iter().zip(wts) {
                            if tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
                                dimg[ty as usize * w + tx as usize] += g * wt;
                            }
                        }
                    }
                }
                if !wanted[1] {
                    continue;
                }
                let [v00, v01, v10, v11] = taps(img, h, w, &c);
                let dpx = (1.0 - c.fy) * (v01 - v00) + c.fy * (v11 - v10);
                let dpy = (1.0 - c.fx) * (v10 - v00) + c.fx * (v11 - v01);
                dgrid[gbase + 2 * p] += g * dpx * sx;
                dgrid[gbase + 2 * p + 1] += g * dpy * sy;
            }
        }
        vec![wanted[0].then_some(dsrc), wanted[1].then_some(dgrid)]
    }
}

/// Batched bilinear sampling: `src: [B, h, w]`, `grid: [B, oh, ow, 2]` → `[B, oh, ow]`.
///
/// Differentiable in both the source pixels and the grid coordinates.
pub fn grid_sample<'t>(src: &Var<'t>, grid: &Var<'t>) -> Result<Var<'t>> {
    let out = sample_batch(&src.value(), &grid.value())?;
    Ok(src.tape().custom(&[*src, *grid], out, Box::new(SampleRule)))
}

/// Batched differentiable warp `stn(src, theta)`.
pub fn warp<'t>(src: &Var<'t>, theta: &Var<'t>, out_h: usize, out_w: usize) -> Result<Var<'t>> {
    let grid = affine_grid(theta, out_h, out_w)?;
    grid_sample(src, &grid)
}

struct InvertRule;

impl Backward for InvertRule {
    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &[f64], _wanted: &[bool]) -> Vec<Option<Vec<f64>>> {
        // d(H⁻¹) = −H⁻¹ dH H⁻¹  ⇒  dL/dH = −H⁻ᵀ G H⁻ᵀ, restricted to the top two rows.
        let b = output.shape()[0];
        let mut d = vec![0.0; b * 6];
        for n in 0..b {
            let y = &output.data()[n * 6..n * 6 + 6];
            let hi = [[y[0], y[1], y[2]], [y[3], y[4], y[5]], [0.0, 0.0, 1.0]];
            let g = &grad[n * 6..n * 6 + 6];
            let gm = [[g[0], g[1], g[2]], [g[3], g[4], g[5]], [0.0, 0.0, 0.0]];
            // tmp = H⁻ᵀ G
            let mut tmp = [[0.0; 3]; 3];
            for (i, row) in tmp.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell = (0..3).map(|k| hi[k][i] * gm[k][j]).sum();
                }
            }
            for i in 0..2 {
                for j in 0..3 {
                    let v: f64 = (0..3).map(|k| tmp[i][k] * hi[j][k]).sum();
                    d[n * 6 + i * 3 + j] = -v;
                }
            }
        }
        vec![Some(d)]
    }
}

/// Batched inverse of `[B, 6]` affine transforms.
///
/// Fails with [`TensorError::Singular`] listing every row whose
/// `|det| <= SINGULARITY_THRESHOLD`.
pub fn invert_affine<'t>(theta: &Var<'t>) -> Result<Var<'t>> {
    let tv = theta.value();
    let b = check_theta("invert_affine", &tv)?;
    let mut data = Vec::with_capacity(b * 6);
    let mut bad = Vec::new();
    let mut bad_det = 0.0;
    for n in 0..b {
        let m: [f64; 6] = tv.data()[n * 6..n * 6 + 6].try_into().unwrap();
        let det = m[0] * m[4] - m[1] * m[3];
        if det.abs() <= SINGULARITY_THRESHOLD || !det.is_finite() {
            if bad.is_empty() {
                bad_det = det;
            }
            bad.push(n);
            data.extend_from_slice(&AffineTransform::IDENTITY);
        } else {
            data.extend_from_slice(&invert_raw(&m, det));
        }
    }
    if !bad.is_empty() {
        return Err(TensorError::Singular {
            rows: bad,
            det: bad_det,
        });
    }
    let out = Tensor::new(vec![b, 6], data)?;
    Ok(theta.tape().custom(&[*theta], out, Box::new(InvertRule)))
}
