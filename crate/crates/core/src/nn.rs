//! Parameter registry and fully connected networks.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::seed;
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};
use crate::train::init::glorot_uniform;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named model parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return ParamId(i);
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps vars already on a tape, in registration order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients in registration order; zeros for frozen bindings.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let batch = x.shape()[0];
        x.matmul(&p.var(self.weight))?.add(&p.var(self.bias).tile(batch)?)
    }
}

/// Multi-layer perceptron: `dims[0] → dims[1] → … → dims[last]`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// Registers Glorot-initialized weights and zero biases under `prefix`.
    ///
    /// Initialization draws from a stream derived from `(init_seed, prefix)`,
    /// so a network's initial weights do not depend on what else is built.
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        init_seed: u64,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(TensorError::Dimension {
                op: "mlp",
                msg: format!("invalid layer widths {dims:?}"),
            });
        }
        let mut rng = seed::rng_for(init_seed, prefix);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weight = store.insert(format!("{prefix}.{k}.w"), glorot_uniform(fan_in, fan_out, &mut rng));
                let bias = store.insert(format!("{prefix}.{k}.b"), Tensor::zeros(vec![fan_out]));
                Linear {
                    weight,
                    bias,
                    fan_in,
                    fan_out,
                }
            })
            .collect();
        Ok(Self { layers, hidden, output })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().unwrap()
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(TensorError::Shape {
                op: "mlp",
                lhs: shape,
                rhs: vec![self.in_dim()],
            });
        }
        let mut h = *x;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, &h)?;
            h = if k == last { self.output } else { self.hidden }.apply(h);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_chains_dimensions() {
        let mut store = ParamStore::new();
        let mlp = Mlp::build(&mut store, "net", &[4, 3, 2], Activation::Relu, Activation::Sigmoid, 1).unwrap();
        assert_eq!(store.len(), 4);
        assert_eq!(store.by_name("net.0.w").unwrap().shape(), &[4, 3]);
        assert_eq!(store.by_name("net.1.b").unwrap().shape(), &[2]);

        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::full(vec![5, 4], 0.3));
        let y = mlp.forward(&p, &x).unwrap();
        assert_eq!(y.shape(), vec![5, 2]);
        assert!(y.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(mlp.forward(&p, &tape.constant(Tensor::zeros(vec![5, 3]))).is_err());
    }

    #[test]
    fn init_is_independent_of_build_order() {
        let mut a = ParamStore::new();
        Mlp::build(&mut a, "x", &[3, 2], Activation::Tanh, Activation::Identity, 9).unwrap();
        Mlp::build(&mut a, "y", &[3, 2], Activation::Tanh, Activation::Identity, 9).unwrap();
        let mut b = ParamStore::new();
        Mlp::build(&mut b, "y", &[3, 2], Activation::Tanh, Activation::Identity, 9).unwrap();
        assert_eq!(a.by_name("y.0.w"), b.by_name("y.0.w"));
        assert_ne!(a.by_name("x.0.w"), a.by_name("y.0.w"));
    }
}
