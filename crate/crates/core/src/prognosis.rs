//! Survival-risk head on pooled bottleneck features, and late fusion.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::softmax_rows;
use crate::nn::linear::{relu_vec, relu_vec_backward};
use crate::nn::param::join;
use crate::nn::{Linear, ParamVisitor, Parameterized};
use crate::real::Real;

/// `GAP(F_dense) → 64 → B` bin logits. Inputs are standardised with a
/// fixed per-channel shift and scale (identity until
/// [`PrognosisHead::standardize_inputs`] is called); these are statistics,
/// not parameters, and never train.
#[derive(Debug, Clone, PartialEq)]
pub struct PrognosisHead<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    pub input_shift: Vec<F>,
    pub input_scale: Vec<F>,
}

pub struct PrognosisCache<F> {
    x: Vec<F>,
    h: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskPrediction {
    pub probs: Vec<f64>,
    pub risk: f64,
}

/// Expected "earliness" `Σ_b (B − 1 − b) · p_b`: higher means an earlier
/// predicted event. Uniform bins give `(B − 1) / 2`.
pub fn risk_from_probs(probs: &[f64]) -> f64 {
    let last = probs.len().saturating_sub(1) as f64;
    probs.iter().enumerate().map(|(b, &p)| (last - b as f64) * p).sum()
}

impl<F: Real> PrognosisHead<F> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, hidden: usize, bins: usize, rng: &mut R) -> Self {
        PrognosisHead {
            fc1: Linear::new(in_dim, hidden, rng),
            fc2: Linear::new(hidden, bins, rng),
            input_shift: vec![F::zero(); in_dim],
            input_scale: vec![F::one(); in_dim],
        }
    }

    pub fn zeroed(in_dim: usize, hidden: usize, bins: usize) -> Self {
        PrognosisHead {
            fc1: Linear::zeroed(in_dim, hidden),
            fc2: Linear::zeroed(hidden, bins),
            input_shift: vec![F::zero(); in_dim],
            input_scale: vec![F::one(); in_dim],
        }
    }

    /// Set the input shift and scale to the mean and inverse standard
    /// deviation of `rows` (constant channels keep scale 1).
    pub fn standardize_inputs(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        let d = self.fc1.fan_in;
        if rows.len() < 2 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("standardisation needs at least two rows of the head's input width"));
        }
        let n = rows.len() as f64;
        for c in 0..d {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[c] - mean) * (r[c] - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            self.input_shift[c] = F::of(mean);
            self.input_scale[c] = F::of(if sd > 1e-12 { 1.0 / sd } else { 1.0 });
        }
        Ok(())
    }

    fn standardized(&self, pooled: &[F]) -> Vec<F> {
        pooled
            .iter()
            .zip(&self.input_shift)
            .zip(&self.input_scale)
            .map(|((&x, &m), &s)| (x - m) * s)
            .collect()
    }

    pub fn bins(&self) -> usize {
        self.fc2.fan_out
    }

    pub fn logits_cached(&self, pooled: &[F]) -> (Vec<F>, PrognosisCache<F>) {
        let x = self.standardized(pooled);
        let mut h = self.fc1.forward(&x);
        relu_vec(&mut h);
        let z = self.fc2.forward(&h);
        (z, PrognosisCache { x, h })
    }

    pub fn predict(&self, pooled: &[F]) -> RiskPrediction {
        let (z, _) = self.logits_cached(pooled);
        let probs: Vec<f64> = softmax_rows(&z, z.len()).iter().map(|v| v.as_f64()).collect();
        let risk = risk_from_probs(&probs);
        RiskPrediction { probs, risk }
    }

    /// Accumulates gradients from `dz` (w.r.t. the logits); returns the
    /// gradient w.r.t. the pooled input.
    pub fn backward(&mut self, cache: &PrognosisCache<F>, dz: &[F]) -> Vec<F> {
        let mut dh = self.fc2.backward(&cache.h, dz);
        relu_vec_backward(&cache.h, &mut dh);
        let dx = self.fc1.backward(&cache.x, &dh);
        dx.into_iter().zip(&self.input_scale).map(|(g, &s)| g * s).collect()
    }
}

impl<F: Real> Parameterized<F> for PrognosisHead<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.fc1.visit_params(&join(prefix, "fc1"), v);
        self.fc2.visit_params(&join(prefix, "fc2"), v);
    }
}

/// Voxelwise arithmetic mean of probability maps.
pub fn late_fusion_maps(maps: &[&[f32]]) -> Result<Vec<f32>> {
    let first = maps.first().ok_or_else(|| Error::invalid("late fusion needs at least one input"))?;
    if maps.iter().any(|m| m.len() != first.len()) {
        return Err(Error::invalid("late fusion inputs differ in shape"));
    }
    let n = maps.len() as f64;
    Ok((0..first.len())
        .map(|i| (maps.iter().map(|m| m[i] as f64).sum::<f64>() / n) as f32)
        .collect())
}

/// Arithmetic mean of scalar risks.
pub fn late_fusion_risks(risks: &[f64]) -> Result<f64> {
    if risks.is_empty() {
        return Err(Error::invalid("late fusion needs at least one input"));
    }
    Ok(risks.iter().sum::<f64>() / risks.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_head_is_uniform() {
        let h = PrognosisHead::<f64>::zeroed(32, 64, 8);
        let p = h.predict(&[0.7; 32]);
        assert!(p.probs.iter().all(|&q| (q - 0.125).abs() < 1e-15));
        assert!((p.risk - 3.5).abs() < 1e-12);
    }

    #[test]
    fn standardised_inputs_and_their_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut h = PrognosisHead::<f64>::new(2, 4, 3, &mut rng);
        let rows = vec![vec![10.0, 5.0], vec![12.0, 5.0], vec![14.0, 5.0]];
        h.standardize_inputs(&rows).unwrap();
        assert_eq!(h.input_shift, vec![12.0, 5.0]);
        assert!((h.input_scale[0] - 1.0 / (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(h.input_scale[1], 1.0);
        let (_, cache) = h.logits_cached(&[14.0, 6.0]);
        assert!((cache.x[0] - 2.0 * h.input_scale[0]).abs() < 1e-15 && cache.x[1] == 1.0);
        // Input gradient against central differences of a fixed linear probe.
        let probe = [0.3, -1.1, 0.7];
        let f = |x: &[f64]| h.logits_cached(x).0.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
        let x0 = [13.0, 4.5];
        let g = h.clone().backward(&h.logits_cached(&x0).1, &probe);
        let n = crate::gradcheck::numeric_gradient(&x0, 1e-6, f);
        for (a, b) in g.iter().zip(&n) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn fusion_rules() {
        let p = [0.2f32, 0.9, 0.5];
        let q: Vec<f32> = p.iter().map(|v| 1.0 - v).collect();
        assert_eq!(late_fusion_maps(&[&p]).unwrap(), p.to_vec());
        assert_eq!(late_fusion_maps(&[&p, &p]).unwrap(), p.to_vec());
        assert!(late_fusion_maps(&[&p, &q]).unwrap().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(late_fusion_maps(&[&p, &[0.1f32][..]]).is_err());
        assert!(late_fusion_maps(&[]).is_err());
        assert_eq!(late_fusion_risks(&[1.0, 3.0]).unwrap(), 2.0);
    }
}
