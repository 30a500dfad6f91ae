use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::Real;

/// A named tensor of weights with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl<F: Real> Param<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            value: vec![F::zero(); n],
            grad: vec![F::zero(); n],
            shape: shape.to_vec(),
            trainable: true,
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        let mut p = Self::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    /// He-normal init with the given fan-in.
    pub fn he<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = num_traits::Float::sqrt(2.0 / fan_in as f64);
        Self::normal(shape, std, rng)
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let dist = Normal::new(0.0, std).expect("finite std");
        for v in p.value.iter_mut() {
            *v = F::of(dist.sample(rng));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Callback used to walk every parameter of a model with its dotted name.
pub trait ParamVisitor<F> {
    fn visit(&mut self, name: &str, param: &mut Param<F>);
}

impl<F, T: FnMut(&str, &mut Param<F>)> ParamVisitor<F> for T {
    fn visit(&mut self, name: &str, param: &mut Param<F>) {
        self(name, param)
    }
}

pub trait Parameterized<F: Real> {
    /// Visit all parameters in a fixed order, prefixing names with `prefix`.
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>);

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_: &str, p: &mut Param<F>| p.zero_grad());
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_params("", &mut |_: &str, p: &mut Param<F>| p.trainable = trainable);
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_: &str, p: &mut Param<F>| n += p.len());
        n
    }

    fn trainable_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_: &str, p: &mut Param<F>| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }

    fn param_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |n: &str, _: &mut Param<F>| names.push(String::from(n)));
        names
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        let mut s = String::with_capacity(prefix.len() + name.len() + 1);
        s.push_str(prefix);
        s.push('.');
        s.push_str(name);
        s
    }
}
