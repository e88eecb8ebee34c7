//! Parameter initialization. All draws go through the caller's seeded RNG in
//! a fixed order, and sample in f64 so `f32` and `f64` builds of the same
//! spec consume identical random streams.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Dims, Element, Tensor};

/// He-normal: `N(0, sqrt(2 / fan_in))`, the standard choice for layers
/// feeding ReLUs.
pub fn he_normal<E: Element>(dims: Dims, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let data: Vec<E> = (0..dims.count())
        .map(|_| E::from_f64(normal.sample(rng)))
        .collect();
    Tensor::from_vec(dims, data)
        .expect("finite init")
        .requires_grad()
}

/// Uniform in `[lo, hi)`; used by tests and the synthetic data generator.
pub fn uniform<E: Element>(dims: Dims, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let data: Vec<E> = (0..dims.count())
        .map(|_| E::from_f64(rng.gen_range(lo..hi)))
        .collect();
    Tensor::from_vec(dims, data).expect("finite init")
}

pub fn constant<E: Element>(dims: Dims, value: f64) -> Tensor<E> {
    Tensor::full(dims, E::from_f64(value)).expect("finite init")
}

pub fn constant_grad<E: Element>(dims: Dims, value: f64) -> Tensor<E> {
    constant::<E>(dims, value).requires_grad()
}
