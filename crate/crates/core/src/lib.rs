//! Layered generative image models built from spatially transformed VAEs.
//!
//! The crate carries its own small reverse-mode autodiff engine ([`tape`]),
//! a differentiable affine warper ([`spatial`]), the single-layer model
//! ([`stvae`]) and its front-to-back composited extension ([`cstvae`]),
//! plus dataset synthesis, training, evaluation and a CLI.

pub mod cli;
pub mod cstvae;
pub mod data;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod seed;
pub mod spatial;
pub mod stvae;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vae;

pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
