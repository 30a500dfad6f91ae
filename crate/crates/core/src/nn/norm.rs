use alloc::vec;
use alloc::vec::Vec;

use super::param::{join, Param, ParamVisitor, Parameterized};
use crate::real::Real;
use crate::tensor::FeatureMap;

/// Group normalisation with a per-channel affine.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm<F> {
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
    pub weight: Param<F>,
    pub bias: Param<F>,
}

/// Saved activations for the backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache<F> {
    pub xhat: FeatureMap<F>,
    pub rstd: Vec<F>,
}

impl<F: Real> GroupNorm<F> {
    pub fn new(groups: usize, channels: usize) -> Self {
        let groups = groups.min(channels).max(1);
        assert!(channels % groups == 0, "channels must divide into groups");
        GroupNorm {
            groups,
            channels,
            eps: 1e-5,
            weight: Param::filled(&[channels], F::one()),
            bias: Param::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, GroupNormCache<F>) {
        assert_eq!(x.channels, self.channels);
        let n = x.nvox();
        let cpg = self.channels / self.groups;
        let count = F::of_usize(cpg * n);
        let mut xhat = FeatureMap::zeros(x.channels, x.dims);
        let mut y = FeatureMap::zeros(x.channels, x.dims);
        let mut rstd = vec![F::zero(); self.groups];
        for g in 0..self.groups {
            let span = &x.data[g * cpg * n..(g + 1) * cpg * n];
            let mean = crate::real::sum(span) / count;
            let mut var = F::zero();
            for &v in span {
                var += (v - mean) * (v - mean);
            }
            var /= count;
            let r = F::one() / (var + F::of(self.eps)).sqrt();
            rstd[g] = r;
            for c in g * cpg..(g + 1) * cpg {
                let (w, b) = (self.weight.value[c], self.bias.value[c]);
                let src = x.channel(c);
                let xh = xhat.channel_mut(c);
                for (h, &v) in xh.iter_mut().zip(src) {
                    *h = (v - mean) * r;
                }
                let dst = y.channel_mut(c);
                for (o, &h) in dst.iter_mut().zip(xhat.channel(c)) {
                    *o = h * w + b;
                }
            }
        }
        (y, GroupNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &GroupNormCache<F>, dy: &FeatureMap<F>) -> FeatureMap<F> {
        let n = dy.nvox();
        let cpg = self.channels / self.groups;
        let count = F::of_usize(cpg * n);
        let mut dx = FeatureMap::zeros(dy.channels, dy.dims);
        for g in 0..self.groups {
            let mut s1 = F::zero();
            let mut s2 = F::zero();
            for c in g * cpg..(g + 1) * cpg {
                let gy = dy.channel(c);
                let xh = cache.xhat.channel(c);
                let sum_g = crate::real::sum(gy);
                let sum_gx = crate::real::dot(gy, xh);
                if self.weight.trainable {
                    self.weight.grad[c] += sum_gx;
                }
                if self.bias.trainable {
                    self.bias.grad[c] += sum_g;
                }
                let w = self.weight.value[c];
                s1 += w * sum_g;
                s2 += w * sum_gx;
            }
            let r = cache.rstd[g];
            let m1 = s1 / count;
            let m2 = s2 / count;
            for c in g * cpg..(g + 1) * cpg {
                let w = self.weight.value[c];
                let gy = dy.channel(c);
                let xh = cache.xhat.channel(c);
                let dst = dx.channel_mut(c);
                for i in 0..n {
                    dst[i] = r * (w * gy[i] - m1 - xh[i] * m2);
                }
            }
        }
        dx
    }
}

impl<F: Real> Parameterized<F> for GroupNorm<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        v.visit(&join(prefix, "weight"), &mut self.weight);
        v.visit(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn normalises_each_group() {
        let gn = GroupNorm::<f64>::new(2, 4);
        let x = FeatureMap::from_vec(4, Dims::new(2, 1, 1), (0..8).map(|v| (v * v) as f64).collect())
            .unwrap();
        let (y, _) = gn.forward(&x);
        for g in 0..2 {
            let s = &y.data[g * 4..(g + 1) * 4];
            let mean: f64 = s.iter().sum::<f64>() / 4.0;
            let var: f64 = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut gn = GroupNorm::<f64>::new(2, 4);
        gn.weight.value = vec![1.5, 0.5, -1.0, 2.0];
        gn.bias.value = vec![0.1, 0.2, 0.3, 0.4];
        let d = Dims::new(3, 1, 1);
        let x = FeatureMap::from_vec(4, d, (0..12).map(|v| ((v * 7) % 5) as f64 * 0.3 + v as f64 * 0.01).collect())
            .unwrap();
        let g = FeatureMap::from_vec(4, d, (0..12).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let loss = |gn: &GroupNorm<f64>, x: &FeatureMap<f64>| -> f64 {
            let (y, _) = gn.forward(x);
            y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = gn.forward(&x);
        let dx = gn.backward(&cache, &g);
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&gn, &xp) - loss(&gn, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6, "{i}: {fd} vs {}", dx.data[i]);
        }
    }
}
