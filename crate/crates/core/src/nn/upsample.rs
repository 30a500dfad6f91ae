//! Trilinear ×2 upsampling (half-pixel centres, edge-clamped), applied as
//! three separable 1D passes.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;
use crate::tensor::{Dims, FeatureMap};

fn strides(d: Dims) -> [usize; 3] {
    [1, d.nx(), d.nx() * d.ny()]
}

fn up_axis<F: Real>(src: &[F], channels: usize, d: Dims, axis: usize) -> (Vec<F>, Dims) {
    let mut nd = d;
    nd.0[axis] *= 2;
    let n = d.0[axis];
    let (s_in, s_out) = (strides(d)[axis], strides(nd)[axis]);
    let (big, small) = (F::of(0.75), F::of(0.25));
    let mut out = vec![F::zero(); channels * nd.len()];
    let (a1, a2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for c in 0..channels {
        let si = &src[c * d.len()..(c + 1) * d.len()];
        let so = &mut out[c * nd.len()..(c + 1) * nd.len()];
        for j in 0..d.0[a2] {
            for i in 0..d.0[a1] {
                let mut pos_in = [0usize; 3];
                pos_in[a1] = i;
                pos_in[a2] = j;
                let base_in = d.index(pos_in[0], pos_in[1], pos_in[2]);
                let base_out = nd.index(pos_in[0], pos_in[1], pos_in[2]);
                for t in 0..n {
                    let here = si[base_in + t * s_in];
                    let prev = si[base_in + t.saturating_sub(1) * s_in];
                    let next = si[base_in + (t + 1).min(n - 1) * s_in];
                    so[base_out + 2 * t * s_out] = big * here + small * prev;
                    so[base_out + (2 * t + 1) * s_out] = big * here + small * next;
                }
            }
        }
    }
    (out, nd)
}

fn up_axis_backward<F: Real>(dout: &[F], channels: usize, d: Dims, axis: usize) -> Vec<F> {
    let mut nd = d;
    nd.0[axis] *= 2;
    let n = d.0[axis];
    let (s_in, s_out) = (strides(d)[axis], strides(nd)[axis]);
    let (big, small) = (F::of(0.75), F::of(0.25));
    let mut din = vec![F::zero(); channels * d.len()];
    let (a1, a2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for c in 0..channels {
        let go = &dout[c * nd.len()..(c + 1) * nd.len()];
        let gi = &mut din[c * d.len()..(c + 1) * d.len()];
        for j in 0..d.0[a2] {
            for i in 0..d.0[a1] {
                let mut pos = [0usize; 3];
                pos[a1] = i;
                pos[a2] = j;
                let base_in = d.index(pos[0], pos[1], pos[2]);
                let base_out = nd.index(pos[0], pos[1], pos[2]);
                for t in 0..n {
                    let ge = go[base_out + 2 * t * s_out];
                    let gd = go[base_out + (2 * t + 1) * s_out];
                    gi[base_in + t * s_in] += big * (ge + gd);
                    gi[base_in + t.saturating_sub(1) * s_in] += small * ge;
                    gi[base_in + (t + 1).min(n - 1) * s_in] += small * gd;
                }
            }
        }
    }
    din
}

pub fn upsample2<F: Real>(x: &FeatureMap<F>) -> FeatureMap<F> {
    let (a, d1) = up_axis(&x.data, x.channels, x.dims, 0);
    let (b, d2) = up_axis(&a, x.channels, d1, 1);
    let (c, d3) = up_axis(&b, x.channels, d2, 2);
    FeatureMap {
        channels: x.channels,
        dims: d3,
        data: c,
    }
}

/// Gradient with respect to the low-resolution input of [`upsample2`].
pub fn upsample2_backward<F: Real>(dy: &FeatureMap<F>) -> FeatureMap<F> {
    let d = dy.dims.halved();
    let d1 = Dims([d.nx() * 2, d.ny(), d.nz()]);
    let d2 = Dims([d.nx() * 2, d.ny() * 2, d.nz()]);
    let g2 = up_axis_backward(&dy.data, dy.channels, d2, 2);
    let g1 = up_axis_backward(&g2, dy.channels, d1, 1);
    let g0 = up_axis_backward(&g1, dy.channels, d, 0);
    FeatureMap {
        channels: dy.channels,
        dims: d,
        data: g0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let x = FeatureMap::from_vec(1, Dims::new(2, 3, 1), vec![2.5f64; 6]).unwrap();
        let y = upsample2(&x);
        assert_eq!(y.dims, Dims::new(4, 6, 2));
        assert!(y.data.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn linear_ramp_interpolates() {
        let x = FeatureMap::from_vec(1, Dims::new(3, 1, 1), vec![0.0f64, 4.0, 8.0]).unwrap();
        let y = upsample2(&x);
        // half-pixel centres: x_out = (i + 0.5) / 2 - 0.5
        assert_eq!(&y.data[..6], &[0.0, 1.0, 3.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn backward_is_adjoint() {
        let d = Dims::new(3, 2, 2);
        let x = FeatureMap::from_vec(2, d, (0..24).map(|v| (v as f64 * 0.7).cos()).collect())
            .unwrap();
        let y = upsample2(&x);
        let g = FeatureMap::from_vec(2, y.dims, (0..y.data.len()).map(|v| (v as f64 * 0.3).sin()).collect())
            .unwrap();
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let dx = upsample2_backward(&g);
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
