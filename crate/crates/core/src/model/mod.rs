//! The learnable aggregator over subgraph hop features and the classifier
//! it feeds, with hand-written gradients and Adam.

mod adam;
mod aggregate;
mod mlp;

pub use adam::Adam;
pub use aggregate::{accumulate_weighted, aggregate, aggregate_backward, weighted_grad, AggCoefficients};
pub use mlp::{Activation, ForwardCache, Gradients, ModelConfig, NarsModel, Targets};

use crate::scalar::Scalar;

/// Trainable scalars of the classifier plus `K` subgraph coefficients.
pub fn param_count<T: Scalar>(model: &NarsModel<T>, k: usize) -> usize {
    model.param_count() + k * model.config.levels * model.config.in_dim
}
