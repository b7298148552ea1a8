//! Diagonal Adagrad with an optional weight-decay term.

use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("non-finite gradient for parameter '{param}'")]
pub struct Divergence {
    pub param: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdagradState {
    pub learning_rate: f64,
    pub epsilon: f64,
    /// Accumulated squared gradients, one tensor per parameter.
    pub accum: Vec<Tensor>,
}

impl AdagradState {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            epsilon: DEFAULT_EPSILON,
            accum: store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    /// `g ← g + decay·θ; acc ← acc + g²; θ ← θ − lr·g / (√acc + ε)`.
    ///
    /// Every gradient is checked before anything is modified, so a
    /// divergence leaves parameters and accumulators untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], decay: f64) -> Result<(), Divergence> {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        for ((name, _), g) in store.iter().zip(grads) {
            if !g.all_finite() {
                return Err(Divergence { param: name.to_string() });
            }
        }
        let (lr, eps) = (self.learning_rate, self.epsilon);
        for ((theta, acc), g) in store.values_mut().zip(&mut self.accum).zip(grads) {
            assert_eq!(theta.shape(), g.shape(), "gradient shape");
            for ((t, a), &gi) in theta.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
                let gi = gi + decay * *t;
                *a += gi * gi;
                *t -= lr * gi / (a.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> (ParamStore, AdagradState) {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![v]));
        let st = AdagradState::new(&s, 0.01);
        (s, st)
    }

    #[test]
    fn scalar_recurrence() {
        let (mut s, mut st) = one(0.0);
        let g = [Tensor::from_vec(vec![1.0])];
        st.step(&mut s, &g, 0.0).unwrap();
        assert!((s.by_name("w").unwrap().item() + 0.01).abs() < 1e-9);
        st.step(&mut s, &g, 0.0).unwrap();
        let expected = -0.01 - 0.01 / 2f64.sqrt();
        assert!((s.by_name("w").unwrap().item() - expected).abs() < 1e-9);
        assert!((expected + 0.017071).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, mut st) = one(0.7);
        st.step(&mut s, &[Tensor::from_vec(vec![0.0])], 0.0).unwrap();
        assert_eq!(s.by_name("w").unwrap().item(), 0.7);
    }

    #[test]
    fn divergence_names_parameter_and_changes_nothing() {
        let (mut s, mut st) = one(0.7);
        let err = st.step(&mut s, &[Tensor::from_vec(vec![f64::NAN])], 0.0).unwrap_err();
        assert_eq!(err.param, "w");
        assert_eq!(s.by_name("w").unwrap().item(), 0.7);
        assert_eq!(st.accum[0].item(), 0.0);
    }
}
