//! Dense `f64` tensors and the reverse-mode graph the models are built on.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{causal_mask, Graph, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

use rand::Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("rows of unequal length")]
    Ragged,
    #[error("{0}: non-finite input")]
    NonFinite(&'static str),
    #[error("attention row {row} has every position masked")]
    FullyMasked { row: usize },
    #[error("{0}")]
    Contract(String),
}

/// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.gen_range(-bound..=bound));
    t
}
