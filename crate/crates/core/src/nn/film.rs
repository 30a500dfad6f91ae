use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::FeatureMap;

/// Feature-wise linear modulation: `out[c, ·] = γ[c] · f[c, ·] + β[c]`.
pub fn film<F: Real>(f: &FeatureMap<F>, gamma: &[F], beta: &[F]) -> Result<FeatureMap<F>> {
    if gamma.len() != f.channels || beta.len() != f.channels {
        return Err(Error::invalid(alloc::format!(
            "FiLM parameters of length {}/{} for a {}-channel map",
            gamma.len(),
            beta.len(),
            f.channels
        )));
    }
    let mut out = f.clone();
    for c in 0..f.channels {
        let (g, b) = (gamma[c], beta[c]);
        for v in out.channel_mut(c) {
            *v = g * *v + b;
        }
    }
    Ok(out)
}

/// Returns `(df, dγ, dβ)`.
pub fn film_backward<F: Real>(
    f: &FeatureMap<F>,
    gamma: &[F],
    dy: &FeatureMap<F>,
) -> (FeatureMap<F>, Vec<F>, Vec<F>) {
    let mut df = dy.clone();
    let mut dgamma = vec![F::zero(); f.channels];
    let mut dbeta = vec![F::zero(); f.channels];
    for c in 0..f.channels {
        let g = dy.channel(c);
        dgamma[c] = crate::real::dot(g, f.channel(c));
        dbeta[c] = crate::real::sum(g);
        for v in df.channel_mut(c) {
            *v *= gamma[c];
        }
    }
    (df, dgamma, dbeta)
}
