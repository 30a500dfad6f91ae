use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst};

/// Scalar type the network is generic over.
///
/// Training runs in `f32`; gradient checks instantiate the same code with
/// `f64`.
pub trait Real:
    Float
    + FloatConst
    + Default
    + Debug
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_usize(v: usize) -> Self {
        Self::of(v as f64)
    }
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dot product with independent lane accumulators so the reduction
/// vectorises; the summation order is fixed, so results are reproducible.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    const LANES: usize = 16;
    let n = a.len().min(b.len());
    let mut acc = [F::zero(); LANES];
    let chunks = n / LANES;
    for c in 0..chunks {
        let xa = &a[c * LANES..c * LANES + LANES];
        let xb = &b[c * LANES..c * LANES + LANES];
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * LANES..n {
        tail += a[i] * b[i];
    }
    let mut s = F::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sum<F: Real>(x: &[F]) -> F {
    dot_one(x)
}

#[inline]
fn dot_one<F: Real>(a: &[F]) -> F {
    const LANES: usize = 16;
    let mut acc = [F::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let xa = &a[c * LANES..c * LANES + LANES];
        for l in 0..LANES {
            acc[l] += xa[l];
        }
    }
    let mut tail = F::zero();
    for &v in &a[chunks * LANES..] {
        tail += v;
    }
    let mut s = F::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

#[inline]
pub fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}
