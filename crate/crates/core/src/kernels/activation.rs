//! Softmax, GELU, ReLU and dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Softmax along the last axis.
pub fn softmax<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let c = input.last_dim();
    let mut out = input.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

/// Backward through softmax given its output `y`.
pub fn softmax_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let c = output.last_dim();
    let mut dx = grad_out.clone();
    for (d, y) in dx.data_mut().chunks_exact_mut(c).zip(output.data().chunks_exact(c)) {
        let dot: T = d.iter().zip(y).map(|(&a, &b)| a * b).sum();
        for (dv, &yv) in d.iter_mut().zip(y) {
            *dv = yv * (*dv - dot);
        }
    }
    dx
}

/// Exact (erf-based) GELU.
pub fn gelu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    input.map(|x| half * x * (T::one() + (x * inv_sqrt2).erf()))
}

pub fn gelu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
    let mut dx = grad_out.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        let cdf = half * (T::one() + (x * inv_sqrt2).erf());
        let pdf = inv_sqrt_2pi * (-half * x * x).exp();
        *d = *d * (cdf + x * pdf);
    }
    dx
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = grad_out.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask<T: Real>(shape: &[usize], rate: f64, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    Ok(Tensor::from_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    }))
}

/// Dropout with an explicit seed. Identity when not training or `rate == 0`.
pub fn dropout<T: Real>(input: &Tensor<T>, rate: f64, training: bool, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask::<T>(input.shape(), rate, seed)?;
    let mut out = input.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        *o = *o * m;
    }
    Ok(out)
}
