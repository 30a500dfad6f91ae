//! Dense channel-major 3D feature maps.
//!
//! Spatial layout is x-fastest: voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`; channel `c` occupies the contiguous slab
//! `c * nvox .. (c + 1) * nvox`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Spatial extent `[nx, ny, nz]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims([nx, ny, nz])
    }

    pub const fn cube(n: usize) -> Self {
        Dims([n, n, n])
    }

    #[inline]
    pub fn nx(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn ny(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn nz(&self) -> usize {
        self.0[2]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    pub fn halved(&self) -> Dims {
        Dims([self.0[0] / 2, self.0[1] / 2, self.0[2] / 2])
    }

    pub fn doubled(&self) -> Dims {
        Dims([self.0[0] * 2, self.0[1] * 2, self.0[2] * 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F> {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<F>,
}

impl<F: Real> FeatureMap<F> {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        FeatureMap {
            channels,
            dims,
            data: vec![F::zero(); channels * dims.len()],
        }
    }

    pub fn from_vec(channels: usize, dims: Dims, data: Vec<F>) -> Result<Self> {
        if data.len() != channels * dims.len() {
            return Err(Error::invalid("feature map buffer does not match its shape"));
        }
        Ok(FeatureMap {
            channels,
            dims,
            data,
        })
    }

    #[inline]
    pub fn nvox(&self) -> usize {
        self.dims.len()
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[F] {
        let n = self.nvox();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [F] {
        let n = self.nvox();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-channel spatial mean.
    pub fn global_avg_pool(&self) -> Vec<F> {
        let inv = F::one() / F::of_usize(self.nvox());
        (0..self.channels)
            .map(|c| crate::real::sum(self.channel(c)) * inv)
            .collect()
    }

    /// Concatenate along channels; spatial dims must agree.
    pub fn concat(a: &Self, b: &Self) -> Self {
        debug_assert_eq!(a.dims, b.dims);
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        FeatureMap {
            channels: a.channels + b.channels,
            dims: a.dims,
            data,
        }
    }

    /// Split into the first `c0` channels and the rest.
    pub fn split_channels(&self, c0: usize) -> (Self, Self) {
        let n = self.nvox();
        let (a, b) = self.data.split_at(c0 * n);
        (
            FeatureMap {
                channels: c0,
                dims: self.dims,
                data: a.to_vec(),
            },
            FeatureMap {
                channels: self.channels - c0,
                dims: self.dims,
                data: b.to_vec(),
            },
        )
    }

    /// Extract the sub-block starting at `origin` with extent `dims`.
    pub fn crop(&self, origin: [usize; 3], dims: Dims) -> Self {
        let mut out = FeatureMap::zeros(self.channels, dims);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for z in 0..dims.nz() {
                for y in 0..dims.ny() {
                    let s = self.dims.index(origin[0], origin[1] + y, origin[2] + z);
                    let d = dims.index(0, y, z);
                    dst[d..d + dims.nx()].copy_from_slice(&src[s..s + dims.nx()]);
                }
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        FeatureMap {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> FeatureMap<G> {
        FeatureMap {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }
}
