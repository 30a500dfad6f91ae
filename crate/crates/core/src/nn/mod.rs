//! Layers with explicit forward/backward passes.
//!
//! Every layer owns its parameters as [`Param`]s. `forward` is pure;
//! `backward` takes whatever the forward pass produced (inputs or a cache),
//! accumulates into the parameter gradients when the parameter is trainable,
//! and returns the gradient with respect to its input.

pub mod conv;
pub mod film;
pub mod linear;
pub mod norm;
pub mod param;
pub mod upsample;

pub use conv::{Conv3d, DownConv};
pub use film::{film, film_backward};
pub use linear::Linear;
pub use norm::GroupNorm;
pub use param::{Param, ParamVisitor, Parameterized};

use crate::real::Real;
use crate::tensor::FeatureMap;

pub fn relu<F: Real>(x: &FeatureMap<F>) -> FeatureMap<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

/// Gradient of ReLU given its *output*.
pub fn relu_backward<F: Real>(out: &FeatureMap<F>, dy: &mut FeatureMap<F>) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= F::zero() {
            *g = F::zero();
        }
    }
}
