use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn check<T: Real>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let c = input.last_dim();
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "channel axis {c} vs gamma {} / beta {}",
                gamma.numel(),
                beta.numel()
            ),
        ));
    }
    Ok(c)
}

/// Layer normalization over the channel (last) axis with population variance.
pub fn layer_norm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let c = check(input, gamma, beta)?;
    let cn = T::from_usize(c).unwrap();
    let mut out = vec![T::zero(); input.numel()];
    for (x, y) in input.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mean = x.iter().copied().sum::<T>() / cn;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let rstd = (var + eps).sqrt().recip();
        for i in 0..c {
            y[i] = (x[i] - mean) * rstd * gamma.data()[i] + beta.data()[i];
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub struct LayerNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn layer_norm_backward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    grad_out: &Tensor<T>,
) -> Result<LayerNormGrads<T>> {
    let c = check(input, gamma, beta)?;
    let cn = T::from_usize(c).unwrap();
    let mut dx = vec![T::zero(); input.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for ((x, dy), out) in input
        .data()
        .chunks_exact(c)
        .zip(grad_out.data().chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
    {
        let mean = x.iter().copied().sum::<T>() / cn;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let rstd = (var + eps).sqrt().recip();
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for i in 0..c {
            xhat[i] = (x[i] - mean) * rstd;
            dxhat[i] = dy[i] * gamma.data()[i];
            dgamma[i] = dgamma[i] + dy[i] * xhat[i];
            dbeta[i] = dbeta[i] + dy[i];
            mean_d = mean_d + dxhat[i];
            mean_dx = mean_dx + dxhat[i] * xhat[i];
        }
        mean_d = mean_d / cn;
        mean_dx = mean_dx / cn;
        for i in 0..c {
            out[i] = rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx);
        }
    }
    Ok(LayerNormGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        gamma: Tensor::new(gamma.shape().to_vec(), dgamma)?,
        beta: Tensor::new(beta.shape().to_vec(), dbeta)?,
    })
}
