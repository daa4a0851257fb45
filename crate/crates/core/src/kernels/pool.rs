//! SoftPool: each activation in a pooling region is weighted by its softmax
//! share within that region, per channel.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn geometry<T: Real>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<[usize; 4]> {
    let [n, h, w, c] = match *input.shape() {
        [n, h, w, c] => [n, h, w, c],
        _ => {
            return Err(Error::dim(
                "softpool2d",
                format!("input must be NHWC, got {:?}", input.shape()),
            ))
        }
    };
    if kernel == 0 || kernel != stride {
        return Err(Error::dim(
            "softpool2d",
            format!("kernel {kernel} must equal stride {stride} (non-overlapping)"),
        ));
    }
    if h % kernel != 0 || w % kernel != 0 {
        return Err(Error::dim(
            "softpool2d",
            format!("spatial axes {h}x{w} not divisible by kernel {kernel}"),
        ));
    }
    Ok([n, h, w, c])
}

/// Visit every pooling region; `f(region_index, channel, element_offsets)`.
fn for_each_region(dims: [usize; 4], kernel: usize, mut f: impl FnMut(usize, &[usize])) {
    let [n, h, w, c] = dims;
    let (oh, ow) = (h / kernel, w / kernel);
    let mut offsets = Vec::with_capacity(kernel * kernel);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    offsets.clear();
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let (y, x) = (oy * kernel + ky, ox * kernel + kx);
                            offsets.push(((b * h + y) * w + x) * c + ch);
                        }
                    }
                    let out_idx = ((b * oh + oy) * ow + ox) * c + ch;
                    f(out_idx, &offsets);
                }
            }
        }
    }
}

/// Softmax weights of a region; returns the weighted sum.
#[inline]
fn region_weights<T: Real>(data: &[T], offsets: &[usize], weights: &mut Vec<T>) -> T {
    let max = offsets
        .iter()
        .map(|&i| data[i])
        .fold(T::neg_infinity(), T::max);
    weights.clear();
    let mut total = T::zero();
    for &i in offsets {
        let e = (data[i] - max).exp();
        weights.push(e);
        total = total + e;
    }
    let mut acc = T::zero();
    for (wt, &i) in weights.iter_mut().zip(offsets) {
        *wt = *wt / total;
        acc = acc + *wt * data[i];
    }
    acc
}

pub fn softpool2d<T: Real>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    let dims = geometry(input, kernel, stride)?;
    let [n, h, w, c] = dims;
    let mut out = vec![T::zero(); n * (h / kernel) * (w / kernel) * c];
    let mut weights = Vec::with_capacity(kernel * kernel);
    let data = input.data();
    for_each_region(dims, kernel, |o, offsets| {
        out[o] = region_weights(data, offsets, &mut weights);
    });
    Tensor::new(vec![n, h / kernel, w / kernel, c], out)
}

/// d out / d a_k = w_k · (1 + a_k − out).
pub fn softpool2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dims = geometry(input, kernel, kernel)?;
    let mut dx = vec![T::zero(); input.numel()];
    let mut weights = Vec::with_capacity(kernel * kernel);
    let data = input.data();
    let dy = grad_out.data();
    for_each_region(dims, kernel, |o, offsets| {
        let pooled = region_weights(data, offsets, &mut weights);
        for (&wt, &i) in weights.iter().zip(offsets) {
            dx[i] = dx[i] + dy[o] * wt * (T::one() + data[i] - pooled);
        }
    });
    Tensor::new(input.shape().to_vec(), dx)
}
