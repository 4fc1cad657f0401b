//! He-normal weight initialisation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Real, Tensor};

fn he_normal<T: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

/// `[F,C,kh,kw]` kernel.
pub fn he_conv<T: Real, R: Rng>(rng: &mut R, f: usize, c: usize, kh: usize, kw: usize) -> Tensor<T> {
    he_normal(rng, vec![f, c, kh, kw], c * kh * kw)
}

/// `[in,out]` weight matrix.
pub fn he_linear<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    he_normal(rng, vec![fan_in, fan_out], fan_in)
}
