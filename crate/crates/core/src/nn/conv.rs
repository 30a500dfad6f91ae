//! 3×3×3 "same" convolution and 2×2×2 stride-2 downsampling convolution.
//!
//! The 3×3×3 kernel works on a zero-padded copy of the input flattened to a
//! single index space: every tap is a constant offset into that space, so
//! the whole volume is processed as long contiguous runs. Positions that fall
//! on the padding halo are computed and discarded.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::param::{join, Param, ParamVisitor, Parameterized};
use crate::real::{dot, Real};
use crate::tensor::{Dims, FeatureMap};

const TAPS: usize = 27;
const BLOCK_Q: usize = 32;
const BLOCK_OC: usize = 8;
const GRAD_OC: usize = 4;

struct Padded {
    px: usize,
    py: usize,
    np: usize,
    first: usize,
    len: usize,
    offsets: [isize; TAPS],
}

impl Padded {
    fn new(d: Dims) -> Self {
        let (px, py, pz) = (d.nx() + 2, d.ny() + 2, d.nz() + 2);
        let np = px * py * pz;
        let first = 1 + px + px * py;
        let last = d.nx() + px * d.ny() + px * py * d.nz();
        let mut offsets = [0isize; TAPS];
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    offsets[dx + 3 * (dy + 3 * dz)] = (dx as isize - 1)
                        + (dy as isize - 1) * px as isize
                        + (dz as isize - 1) * (px * py) as isize;
                }
            }
        }
        Padded {
            px,
            py,
            np,
            first,
            len: last - first + 1,
            offsets,
        }
    }

    fn pad<F: Real>(&self, x: &FeatureMap<F>) -> Vec<F> {
        let d = x.dims;
        let mut out = vec![F::zero(); x.channels * self.np];
        for c in 0..x.channels {
            let src = x.channel(c);
            let dst = &mut out[c * self.np..(c + 1) * self.np];
            for z in 0..d.nz() {
                for y in 0..d.ny() {
                    let s = d.index(0, y, z);
                    let t = (z + 1) * self.px * self.py + (y + 1) * self.px + 1;
                    dst[t..t + d.nx()].copy_from_slice(&src[s..s + d.nx()]);
                }
            }
        }
        out
    }

    /// Copy the interior of a `channels × len` run buffer into a feature map.
    fn unpad<F: Real>(&self, runs: &[F], channels: usize, d: Dims) -> FeatureMap<F> {
        let mut out = FeatureMap::zeros(channels, d);
        for c in 0..channels {
            let src = &runs[c * self.len..(c + 1) * self.len];
            let dst = out.channel_mut(c);
            for z in 0..d.nz() {
                for y in 0..d.ny() {
                    let q = (z + 1) * self.px * self.py + (y + 1) * self.px + 1 - self.first;
                    let t = d.index(0, y, z);
                    dst[t..t + d.nx()].copy_from_slice(&src[q..q + d.nx()]);
                }
            }
        }
        out
    }

    /// `dw[o][i][k] += Σ_q dyp[o][first + q] · xp[i][first + q + off_k]`
    ///
    /// Lane-wise partial sums over a block of output channels and one row of
    /// three x-taps stay resident while the position index streams.
    fn weight_grad<F: Real>(&self, xp: &[F], dyp: &[F], cin: usize, cout: usize, dw: &mut [F]) {
        const LANES: usize = 16;
        let full = self.len / LANES * LANES;
        let mut o0 = 0;
        while o0 < cout {
            let ob = GRAD_OC.min(cout - o0);
            for i in 0..cin {
                let xrow = &xp[i * self.np..(i + 1) * self.np];
                for kzy in 0..9 {
                    let k0 = kzy * 3;
                    let mut acc = [[[F::zero(); LANES]; 3]; GRAD_OC];
                    let mut q = 0;
                    while q < full {
                        let s = ((self.first + q) as isize + self.offsets[k0]) as usize;
                        let x0: &[F; LANES] = xrow[s..s + LANES].try_into().unwrap();
                        let x1: &[F; LANES] = xrow[s + 1..s + 1 + LANES].try_into().unwrap();
                        let x2: &[F; LANES] = xrow[s + 2..s + 2 + LANES].try_into().unwrap();
                        for (o, a) in acc.iter_mut().enumerate().take(ob) {
                            let g0 = (o0 + o) * self.np + self.first + q;
                            let g: &[F; LANES] = dyp[g0..g0 + LANES].try_into().unwrap();
                            for t in 0..LANES {
                                a[0][t] += g[t] * x0[t];
                                a[1][t] += g[t] * x1[t];
                                a[2][t] += g[t] * x2[t];
                            }
                        }
                        q += LANES;
                    }
                    for (o, a) in acc.iter().enumerate().take(ob) {
                        for (kx, lanes) in a.iter().enumerate() {
                            let k = k0 + kx;
                            let mut total = F::zero();
                            for &v in lanes {
                                total += v;
                            }
                            for qq in full..self.len {
                                let s = ((self.first + qq) as isize + self.offsets[k]) as usize;
                                total += dyp[(o0 + o) * self.np + self.first + qq] * xrow[s];
                            }
                            dw[((o0 + o) * cin + i) * TAPS + k] += total;
                        }
                    }
                }
            }
            o0 += ob;
        }
    }

    /// `out[o][q] = Σ_i Σ_k w[o][i][k] · xp[i][first + q + off_k]`
    fn correlate<F: Real>(&self, xp: &[F], w: &[F], cin: usize, cout: usize) -> Vec<F> {
        let mut out = vec![F::zero(); cout * self.len];
        // weights regrouped as [o-block][i][k][o within block] so the inner
        // kernel reads BLOCK_OC consecutive values per tap
        let nblk = cout.div_ceil(BLOCK_OC);
        let mut wt = vec![F::zero(); nblk * cin * TAPS * BLOCK_OC];
        for o in 0..cout {
            let (b, ol) = (o / BLOCK_OC, o % BLOCK_OC);
            for i in 0..cin {
                for k in 0..TAPS {
                    wt[((b * cin + i) * TAPS + k) * BLOCK_OC + ol] = w[(o * cin + i) * TAPS + k];
                }
            }
        }
        let full = self.len / BLOCK_Q * BLOCK_Q;
        for b in 0..nblk {
            let o0 = b * BLOCK_OC;
            let ob = BLOCK_OC.min(cout - o0);
            let wb = &wt[b * cin * TAPS * BLOCK_OC..(b + 1) * cin * TAPS * BLOCK_OC];
            let mut q0 = 0;
            while q0 < full {
                let mut acc = [[F::zero(); BLOCK_Q]; BLOCK_OC];
                for i in 0..cin {
                    let xrow = &xp[i * self.np..(i + 1) * self.np];
                    for k in 0..TAPS {
                        let s = ((self.first + q0) as isize + self.offsets[k]) as usize;
                        let xs: &[F; BLOCK_Q] = xrow[s..s + BLOCK_Q].try_into().unwrap();
                        let ws: &[F; BLOCK_OC] =
                            wb[(i * TAPS + k) * BLOCK_OC..][..BLOCK_OC].try_into().unwrap();
                        for o in 0..BLOCK_OC {
                            let wv = ws[o];
                            for t in 0..BLOCK_Q {
                                acc[o][t] += wv * xs[t];
                            }
                        }
                    }
                }
                for (o, row) in acc.iter().enumerate().take(ob) {
                    let base = (o0 + o) * self.len + q0;
                    out[base..base + BLOCK_Q].copy_from_slice(row);
                }
                q0 += BLOCK_Q;
            }
            // ragged tail
            for q in full..self.len {
                for o in 0..ob {
                    let mut a = F::zero();
                    for i in 0..cin {
                        let xrow = &xp[i * self.np..(i + 1) * self.np];
                        for k in 0..TAPS {
                            let s = ((self.first + q) as isize + self.offsets[k]) as usize;
                            a += wb[(i * TAPS + k) * BLOCK_OC + o] * xrow[s];
                        }
                    }
                    out[(o0 + o) * self.len + q] = a;
                }
            }
        }
        out
    }
}

/// 3×3×3 convolution, stride 1, zero padding 1, no bias.
///
/// Weight layout `[cout][cin][kz][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<F> {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param<F>,
}

impl<F: Real> Conv3d<F> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Conv3d {
            cin,
            cout,
            weight: Param::he(&[cout, cin, 3, 3, 3], cin * TAPS, rng),
        }
    }

    pub fn forward(&self, x: &FeatureMap<F>) -> FeatureMap<F> {
        assert_eq!(x.channels, self.cin, "conv input channel mismatch");
        let geo = Padded::new(x.dims);
        let xp = geo.pad(x);
        let runs = geo.correlate(&xp, &self.weight.value, self.cin, self.cout);
        geo.unpad(&runs, self.cout, x.dims)
    }

    /// Accumulates the weight gradient (if trainable) and returns the input
    /// gradient when `want_dx`.
    pub fn backward(
        &mut self,
        x: &FeatureMap<F>,
        dy: &FeatureMap<F>,
        want_dx: bool,
    ) -> Option<FeatureMap<F>> {
        let geo = Padded::new(x.dims);
        let dyp = geo.pad(dy);
        if self.weight.trainable {
            let xp = geo.pad(x);
            geo.weight_grad(&xp, &dyp, self.cin, self.cout, &mut self.weight.grad);
        }
        if !want_dx {
            return None;
        }
        let mut wt = vec![F::zero(); self.weight.len()];
        for o in 0..self.cout {
            for i in 0..self.cin {
                for k in 0..TAPS {
                    wt[(i * self.cout + o) * TAPS + (TAPS - 1 - k)] =
                        self.weight.value[(o * self.cin + i) * TAPS + k];
                }
            }
        }
        let runs = geo.correlate(&dyp, &wt, self.cout, self.cin);
        Some(geo.unpad(&runs, self.cin, x.dims))
    }
}

impl<F: Real> Parameterized<F> for Conv3d<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        v.visit(&join(prefix, "weight"), &mut self.weight);
    }
}

/// 2×2×2 convolution with stride 2 and bias; halves every spatial axis.
///
/// Weight layout `[cout][cin][kz][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DownConv<F> {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Real> DownConv<F> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        DownConv {
            cin,
            cout,
            weight: Param::he(&[cout, cin, 2, 2, 2], cin * 8, rng),
            bias: Param::zeros(&[cout]),
        }
    }

    /// Gather the 8 stride-2 phases of channel `c` as contiguous planes.
    fn phases(x: &FeatureMap<F>) -> Vec<F> {
        let d = x.dims;
        let h = d.halved();
        let n = h.len();
        let mut out = vec![F::zero(); x.channels * 8 * n];
        for c in 0..x.channels {
            let src = x.channel(c);
            for z in 0..h.nz() {
                for y in 0..h.ny() {
                    for xx in 0..h.nx() {
                        let o = h.index(xx, y, z);
                        for k in 0..8 {
                            let (kx, ky, kz) = (k & 1, (k >> 1) & 1, k >> 2);
                            out[(c * 8 + k) * n + o] =
                                src[d.index(2 * xx + kx, 2 * y + ky, 2 * z + kz)];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &FeatureMap<F>) -> FeatureMap<F> {
        assert_eq!(x.channels, self.cin);
        let h = x.dims.halved();
        let n = h.len();
        let ph = Self::phases(x);
        let mut out = FeatureMap::zeros(self.cout, h);
        for o in 0..self.cout {
            let dst = out.channel_mut(o);
            dst.iter_mut().for_each(|v| *v = self.bias.value[o]);
            for i in 0..self.cin {
                for k in 0..8 {
                    let w = self.weight.value[(o * self.cin + i) * 8 + k];
                    crate::real::axpy(w, &ph[(i * 8 + k) * n..(i * 8 + k + 1) * n], dst);
                }
            }
        }
        out
    }

    pub fn backward(
        &mut self,
        x: &FeatureMap<F>,
        dy: &FeatureMap<F>,
        want_dx: bool,
    ) -> Option<FeatureMap<F>> {
        let d = x.dims;
        let h = dy.dims;
        let n = h.len();
        if self.weight.trainable || self.bias.trainable {
            let ph = Self::phases(x);
            for o in 0..self.cout {
                let g = dy.channel(o);
                if self.bias.trainable {
                    self.bias.grad[o] += crate::real::sum(g);
                }
                if self.weight.trainable {
                    for i in 0..self.cin {
                        for k in 0..8 {
                            self.weight.grad[(o * self.cin + i) * 8 + k] +=
                                dot(g, &ph[(i * 8 + k) * n..(i * 8 + k + 1) * n]);
                        }
                    }
                }
            }
        }
        if !want_dx {
            return None;
        }
        let mut dph = vec![F::zero(); self.cin * 8 * n];
        for i in 0..self.cin {
            for k in 0..8 {
                let dst = &mut dph[(i * 8 + k) * n..(i * 8 + k + 1) * n];
                for o in 0..self.cout {
                    let w = self.weight.value[(o * self.cin + i) * 8 + k];
                    crate::real::axpy(w, dy.channel(o), dst);
                }
            }
        }
        let mut dx = FeatureMap::zeros(self.cin, d);
        for c in 0..self.cin {
            let dst = dx.channel_mut(c);
            for z in 0..h.nz() {
                for y in 0..h.ny() {
                    for xx in 0..h.nx() {
                        let o = h.index(xx, y, z);
                        for k in 0..8 {
                            let (kx, ky, kz) = (k & 1, (k >> 1) & 1, k >> 2);
                            dst[d.index(2 * xx + kx, 2 * y + ky, 2 * z + kz)] =
                                dph[(c * 8 + k) * n + o];
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

impl<F: Real> Parameterized<F> for DownConv<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        v.visit(&join(prefix, "weight"), &mut self.weight);
        v.visit(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop reference.
    fn naive(conv: &Conv3d<f64>, x: &FeatureMap<f64>) -> FeatureMap<f64> {
        let d = x.dims;
        let mut out = FeatureMap::zeros(conv.cout, d);
        for o in 0..conv.cout {
            for z in 0..d.nz() as isize {
                for y in 0..d.ny() as isize {
                    for xx in 0..d.nx() as isize {
                        let mut s = 0.0;
                        for i in 0..conv.cin {
                            for kz in 0..3isize {
                                for ky in 0..3isize {
                                    for kx in 0..3isize {
                                        let (sx, sy, sz) = (xx + kx - 1, y + ky - 1, z + kz - 1);
                                        if sx < 0
                                            || sy < 0
                                            || sz < 0
                                            || sx >= d.nx() as isize
                                            || sy >= d.ny() as isize
                                            || sz >= d.nz() as isize
                                        {
                                            continue;
                                        }
                                        let k = (kx + 3 * (ky + 3 * kz)) as usize;
                                        s += conv.weight.value[(o * conv.cin + i) * 27 + k]
                                            * x.channel(i)
                                                [d.index(sx as usize, sy as usize, sz as usize)];
                                    }
                                }
                            }
                        }
                        out.channel_mut(o)[d.index(xx as usize, y as usize, z as usize)] = s;
                    }
                }
            }
        }
        out
    }

    fn random_map(c: usize, d: Dims, rng: &mut ChaCha8Rng) -> FeatureMap<f64> {
        let mut fm = FeatureMap::zeros(c, d);
        for v in fm.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        fm
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv3d::<f64>::new(3, 10, &mut rng);
        let x = random_map(3, Dims::new(5, 4, 3), &mut rng);
        let fast = conv.forward(&x);
        let slow = naive(&conv, &x);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> = <x, conv^T(g)> and = <w, dW> for a linear map.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv3d::<f64>::new(2, 3, &mut rng);
        let d = Dims::new(4, 3, 5);
        let x = random_map(2, d, &mut rng);
        let g = random_map(3, d, &mut rng);
        let y = conv.forward(&x);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let dx = conv.backward(&x, &g, true).unwrap();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = conv
            .weight
            .value
            .iter()
            .zip(&conv.weight.grad)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn down_conv_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut conv = DownConv::<f64>::new(2, 3, &mut rng);
        let d = Dims::new(4, 6, 2);
        let x = random_map(2, d, &mut rng);
        let y = conv.forward(&x);
        assert_eq!(y.dims, Dims::new(2, 3, 1));
        let g = random_map(3, y.dims, &mut rng);
        let lhs: f64 = y
            .data
            .iter()
            .zip(&g.data)
            .map(|(a, b)| a * b)
            .sum::<f64>();
        let dx = conv.backward(&x, &g, true).unwrap();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        // bias enters affinely: subtract its contribution.
        let bias_part: f64 = (0..3).map(|o| conv.bias.value[o] * g.channel(o).iter().sum::<f64>()).sum();
        assert!((lhs - bias_part - rhs).abs() < 1e-10);
    }
}
