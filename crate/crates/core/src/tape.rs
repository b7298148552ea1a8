//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in the
//! order it was executed. Because a node can only reference nodes created
//! before it, insertion order is already a topological order, and
//! [`Tape::backward`] replays the recorded rules from the loss back to index 0.
//!
//! Broadcasting is limited to scalar-with-tensor and equal shapes. Everything
//! else goes through the explicit [`Var::tile`], [`Var::reshape`],
//! [`Var::narrow`] and [`concat`] ops.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::tensor::{strides, Result, Tensor, TensorError};

/// Backward rule for an operation defined outside this module.
pub trait Backward {
    /// Gradient of the loss with respect to each input, in input order.
    ///
    /// `grad` has the shape of `output`; `wanted[i]` says whether input `i`
    /// needs a gradient at all. Entries may be `None` for inputs that are
    /// not wanted or not differentiable through this op.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64], wanted: &[bool]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    Sum(usize, Vec<usize>),
    Mean(usize, Vec<usize>, f64),
    Reshape(usize),
    Tile(usize),
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    LogSoftmax(usize),
    Custom {
        inputs: Vec<usize>,
        rule: Box<dyn Backward>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _, _)
            | Op::Reshape(a)
            | Op::Tile(a)
            | Op::LogSoftmax(a) => vec![*a],
            Op::Narrow { input, .. } => vec![*input],
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation log for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Gradients are accumulated for it iff `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let grad = requires_grad.then(|| vec![0.0; value.numel()]);
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
            grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Records an op whose backward rule lives outside this module.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, rule: Box<dyn Backward>) -> Var<'t> {
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push(value, Op::Custom { inputs: ids, rule })
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.inputs().iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
            requires_grad: false,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Propagates d(loss)/d(node) to every `requires_grad` leaf.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let out = &node.value;
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let wants = |i: usize| nodes[i].needs_grad;
            let mut acc = |i: usize, contrib: Vec<f64>| accumulate(&mut grads, i, contrib);

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if wants(*a) {
                        // dA = G · Bᵀ
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, n as isize, 1, bv.data(), 1, n as isize, &mut da);
                        acc(*a, da);
                    }
                    if wants(*b) {
                        // dB = Aᵀ · G
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), 1, k as isize, &g, n as isize, 1, &mut db);
                        acc(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        acc(*a, unbroadcast(&g, val(*a).numel()));
                    }
                    if wants(*b) {
                        acc(*b, unbroadcast(&g, val(*b).numel()));
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        acc(*a, unbroadcast(&g, val(*a).numel()));
                    }
                    if wants(*b) {
                        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                        acc(*b, unbroadcast(&neg, val(*b).numel()));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    if wants(*a) {
                        let d: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * bcast(bv, i)).collect();
                        acc(*a, unbroadcast(&d, av.len()));
                    }
                    if wants(*b) {
                        let d: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * bcast(av, i)).collect();
                        acc(*b, unbroadcast(&d, bv.len()));
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    if wants(*a) {
                        let d: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi / bcast(bv, i)).collect();
                        acc(*a, unbroadcast(&d, av.len()));
                    }
                    if wants(*b) {
                        let d: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| {
                                let bi = bcast(bv, i);
                                -gi * bcast(av, i) / (bi * bi)
                            })
                            .collect();
                        acc(*b, unbroadcast(&d, bv.len()));
                    }
                }
                Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g),
                Op::MulScalar(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
                Op::Relu(a) => {
                    let x = val(*a).data();
                    acc(*a, zip_map(&g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
                }
                Op::Tanh(a) => acc(*a, zip_map(&g, out.data(), |gi, y| gi * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(*a, zip_map(&g, out.data(), |gi, y| gi * y * (1.0 - y))),
                Op::Log(a) => acc(*a, zip_map(&g, val(*a).data(), |gi, x| gi / x)),
                Op::Exp(a) => acc(*a, zip_map(&g, out.data(), |gi, y| gi * y)),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    acc(
                        *a,
                        zip_map(&g, val(*a).data(), |gi, x| if x >= lo && x <= hi { gi } else { 0.0 }),
                    );
                }
                Op::Sum(a, axes) => acc(*a, expand_reduced(&g, val(*a).shape(), axes, 1.0)),
                Op::Mean(a, axes, count) => {
                    acc(*a, expand_reduced(&g, val(*a).shape(), axes, 1.0 / count));
                }
                Op::Tile(a) => {
                    let n = val(*a).numel();
                    let mut d = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(x, c)| *x += c);
                    }
                    acc(*a, d);
                }
                Op::Narrow { input, axis, start } => {
                    let shape = val(*input).shape();
                    let (outer, inner) = split_axis(shape, *axis);
                    let len = out.shape()[*axis];
                    let full = shape[*axis];
                    let mut d = vec![0.0; val(*input).numel()];
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let dst = o * full * inner + start * inner;
                        d[dst..dst + len * inner].copy_from_slice(src);
                    }
                    acc(*input, d);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, inner) = split_axis(out.shape(), *axis);
                    let total = out.shape()[*axis];
                    let mut offset = 0;
                    for &i in inputs {
                        let len = val(i).shape()[*axis];
                        if wants(i) {
                            let mut d = Vec::with_capacity(val(i).numel());
                            for o in 0..outer {
                                let s = o * total * inner + offset * inner;
                                d.extend_from_slice(&g[s..s + len * inner]);
                            }
                            acc(i, d);
                        }
                        offset += len;
                    }
                }
                Op::LogSoftmax(a) => {
                    let cols = *out.shape().last().unwrap();
                    let mut d = vec![0.0; g.len()];
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.data().chunks(cols)) {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..cols {
                            dr[j] = gr[j] - yr[j].exp() * gs;
                        }
                    }
                    acc(*a, d);
                }
                Op::Custom { inputs, rule } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                    let wanted: Vec<bool> = inputs.iter().map(|&i| wants(i)).collect();
                    let ds = rule.backward(&ins, out, &g, &wanted);
                    for (&i, d) in inputs.iter().zip(ds) {
                        if let Some(d) = d {
                            if wants(i) {
                                acc(i, d);
                            }
                        }
                    }
                }
            }
        }

        for (node, g) in nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.requires_grad, g) {
                let slot = node.grad.as_mut().expect("leaf grad");
                slot.iter_mut().zip(g).for_each(|(s, v)| *s += v);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, contrib: Vec<f64>) {
    match &mut grads[i] {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

#[inline]
fn bcast(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn unbroadcast(g: &[f64], n: usize) -> Vec<f64> {
    if n == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}

fn zip_map(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&a, &b)| f(a, b)).collect()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

/// Maps each input flat index to the flat index of its reduction bucket.
fn reduce_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let n: usize = shape.iter().product();
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let (Some(&a), Some(&b)) = (sorted.first(), sorted.last()) {
        if b - a + 1 == sorted.len() {
            // Contiguous block of axes: flat = (outer·block + mid)·inner + rest.
            let inner: usize = shape[b + 1..].iter().product();
            let block: usize = shape[a..=b].iter().product();
            let map = (0..n).map(|f| (f / (inner * block)) * inner + f % inner).collect();
            return (out_shape, map);
        }
    }
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let mut map = Vec::with_capacity(n);
    for flat in 0..n {
        let mut o = 0;
        let mut k = 0;
        for (ax, &st) in in_strides.iter().enumerate() {
            let coord = (flat / st) % shape[ax];
            if !axes.contains(&ax) {
                o += coord * out_strides[k];
                k += 1;
            }
        }
        map.push(o);
    }
    (out_shape, map)
}

fn expand_reduced(g: &[f64], shape: &[usize], axes: &[usize], scale: f64) -> Vec<f64> {
    let (_, map) = reduce_index(shape, axes);
    map.iter().map(|&o| g[o] * scale).collect()
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n` given explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths cover every index reachable from the given
    // dimensions and strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn binary(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n).map(|i| f(bcast(ad, i), bcast(bd, i))).collect();
    Tensor::new(shape, data).expect("binary shape")
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Dimension {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, &mut c);
        let out = Tensor::new(vec![m, n], c)?;
        Ok(self.tape.push(out, Op::MatMul(self.id, rhs.id)))
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let shape = same_or_scalar("add", &a, &b)?;
        Ok(self.tape.push(binary(&a, &b, shape, |x, y| x + y), Op::Add(self.id, rhs.id)))
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let shape = same_or_scalar("sub", &a, &b)?;
        Ok(self.tape.push(binary(&a, &b, shape, |x, y| x - y), Op::Sub(self.id, rhs.id)))
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let shape = same_or_scalar("mul", &a, &b)?;
        Ok(self.tape.push(binary(&a, &b, shape, |x, y| x * y), Op::Mul(self.id, rhs.id)))
    }

    pub fn div(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let shape = same_or_scalar("div", &a, &b)?;
        if b.data().contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        Ok(self.tape.push(binary(&a, &b, shape, |x, y| x / y), Op::Div(self.id, rhs.id)))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.tape.push(out, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x * c);
        self.tape.push(out, Op::MulScalar(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn relu(&self) -> Var<'t> {
        let out = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.tape.push(out, Op::Relu(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        let out = self.value().map(f64::tanh);
        self.tape.push(out, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let out = self.value().map(sigmoid);
        self.tape.push(out, Op::Sigmoid(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|&&x| x.is_nan() || x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.tape.push(v.map(f64::ln), Op::Log(self.id)))
    }

    pub fn exp(&self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        self.tape.push(out, Op::Exp(self.id))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let out = self.value().map(|x| x.clamp(lo, hi));
        self.tape.push(out, Op::Clamp(self.id, lo, hi))
    }

    /// Sums over `axes`, dropping them from the shape.
    pub fn sum(&self, axes: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        for &ax in axes {
            check_axis("sum", v.shape(), ax)?;
        }
        let (shape, map) = reduce_index(v.shape(), axes);
        let mut data = vec![0.0; shape.iter().product()];
        for (x, &o) in v.data().iter().zip(&map) {
            data[o] += x;
        }
        Ok(self.tape.push(Tensor::new(shape, data)?, Op::Sum(self.id, axes.to_vec())))
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        for &ax in axes {
            check_axis("mean", v.shape(), ax)?;
        }
        let count: usize = axes.iter().map(|&a| v.shape()[a]).product();
        let (shape, map) = reduce_index(v.shape(), axes);
        let mut data = vec![0.0; shape.iter().product()];
        for (x, &o) in v.data().iter().zip(&map) {
            data[o] += x;
        }
        let inv = 1.0 / count as f64;
        data.iter_mut().for_each(|x| *x *= inv);
        Ok(self
            .tape
            .push(Tensor::new(shape, data)?, Op::Mean(self.id, axes.to_vec(), count as f64)))
    }

    pub fn sum_all(&self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.value().shape().len()).collect();
        self.sum(&axes).expect("valid axes")
    }

    pub fn mean_all(&self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.value().shape().len()).collect();
        self.mean(&axes).expect("valid axes")
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    /// Stacks `reps` copies along a new leading axis.
    pub fn tile(&self, reps: usize) -> Result<Var<'t>> {
        if reps == 0 {
            return Err(TensorError::Dimension {
                op: "tile",
                msg: "zero repetitions".into(),
            });
        }
        let v = self.value();
        let mut shape = vec![reps];
        shape.extend_from_slice(v.shape());
        let data = v.data().repeat(reps);
        Ok(self.tape.push(Tensor::new(shape, data)?, Op::Tile(self.id)))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        check_axis("narrow", v.shape(), axis)?;
        if len == 0 || start + len > v.shape()[axis] {
            return Err(TensorError::Dimension {
                op: "narrow",
                msg: format!("range {start}..{} exceeds extent {}", start + len, v.shape()[axis]),
            });
        }
        let (outer, inner) = split_axis(v.shape(), axis);
        let full = v.shape()[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = o * full * inner + start * inner;
            data.extend_from_slice(&v.data()[s..s + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let v = self.value();
        let Some(&cols) = v.shape().last() else {
            return Err(TensorError::Dimension {
                op: "log_softmax",
                msg: "scalar input".into(),
            });
        };
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self
            .tape
            .push(Tensor::new(v.shape().to_vec(), data)?, Op::LogSoftmax(self.id)))
    }
}

/// Concatenates along an existing axis.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    check_axis("concat", &base, axis)?;
    for v in &values[1..] {
        let s = v.shape();
        let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: base.clone(),
                rhs: s.to_vec(),
            });
        }
    }
    let (outer, _) = split_axis(&base, axis);
    let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let mut shape = base.clone();
    shape[axis] = total;
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for v in &values {
            let chunk = v.numel() / outer;
            data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(tape.push(
        Tensor::new(shape, data)?,
        Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        },
    ))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
