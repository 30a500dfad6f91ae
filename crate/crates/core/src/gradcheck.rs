//! Central finite-difference checks for the analytic backward passes.

use alloc::string::String;
use alloc::vec::Vec;

use crate::nn::{Param, Parameterized};

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

fn with_param<M: Parameterized<f64> + ?Sized>(
    model: &mut M,
    name: &str,
    f: &mut dyn FnMut(&mut Param<f64>),
) -> bool {
    let mut found = false;
    model.visit_params("", &mut |n: &str, p: &mut Param<f64>| {
        if n == name {
            f(p);
            found = true;
        }
    });
    found
}

/// Compare analytic gradients with central differences.
///
/// `backward` must zero nothing itself: it is called after `zero_grad` and
/// should accumulate the gradient of the scalar loss into the parameters.
/// `loss` evaluates the same scalar without touching gradients. Every
/// `(name, index)` in `picks` is checked; unknown names panic.
pub fn check<M, B, L>(
    model: &mut M,
    mut backward: B,
    mut loss: L,
    picks: &[(&str, usize)],
    step: f64,
) -> Vec<GradSample>
where
    M: Parameterized<f64> + ?Sized,
    B: FnMut(&mut M),
    L: FnMut(&M) -> f64,
{
    model.zero_grad();
    backward(model);
    let mut out = Vec::with_capacity(picks.len());
    for &(name, index) in picks {
        let mut analytic = 0.0;
        let mut orig = 0.0;
        let ok = with_param(model, name, &mut |p| {
            analytic = p.grad[index];
            orig = p.value[index];
        });
        assert!(ok, "no parameter named {name}");
        with_param(model, name, &mut |p| p.value[index] = orig + step);
        let up = loss(model);
        with_param(model, name, &mut |p| p.value[index] = orig - step);
        let down = loss(model);
        with_param(model, name, &mut |p| p.value[index] = orig);
        out.push(GradSample {
            param: String::from(name),
            index,
            analytic,
            numeric: (up - down) / (2.0 * step),
        });
    }
    out
}

/// Central differences of a scalar function of a plain vector.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let o = v[i];
            v[i] = o + step;
            let up = f(&v);
            v[i] = o - step;
            let down = f(&v);
            v[i] = o;
            (up - down) / (2.0 * step)
        })
        .collect()
}
