//! 2-D convolution over NHWC tensors, lowered to im2col + GEMM.
//!
//! Weights are laid out `[K, K, C_in, C_out]` so the im2col row for an output
//! pixel multiplies the flattened weight matrix directly.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new<T: Real>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, height, width, in_channels] = match *input.shape() {
            [n, h, w, c] => [n, h, w, c],
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!("input must be NHWC, got {:?}", input.shape()),
                ))
            }
        };
        let [kernel, kernel_w, w_in, out_channels] = match *weight.shape() {
            [a, b, c, d] => [a, b, c, d],
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!("weight must be [K,K,Cin,Cout], got {:?}", weight.shape()),
                ))
            }
        };
        if kernel != kernel_w {
            return Err(Error::dim("conv2d", "only square kernels are supported"));
        }
        if w_in != in_channels {
            return Err(Error::dim(
                "conv2d",
                format!("channel axis: input has {in_channels}, weight expects {w_in}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if height + 2 * padding < kernel || width + 2 * padding < kernel {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "spatial axes {height}x{width} (padding {padding}) smaller than kernel {kernel}"
                ),
            ));
        }
        Ok(Self {
            batch,
            height,
            width,
            in_channels,
            kernel,
            out_channels,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    /// A 1x1 stride-1 unpadded conv reads the input buffer as its own im2col matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * plen];
    let c = g.in_channels;
    for n in 0..g.batch {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let row = (n * g.out_height + oy) * g.out_width + ox;
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kernel {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(ix) = g.source(ox, kx, g.width) else {
                            continue;
                        };
                        let src = ((n * g.height + iy) * g.width + ix) * c;
                        let off = (ky * g.kernel + kx) * c;
                        dst[off..off + c].copy_from_slice(&input[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let plen = g.patch_len();
    let c = g.in_channels;
    let mut out = vec![T::zero(); g.batch * g.height * g.width * c];
    for n in 0..g.batch {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let row = (n * g.out_height + oy) * g.out_width + ox;
                let src_row = &cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kernel {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(ix) = g.source(ox, kx, g.width) else {
                            continue;
                        };
                        let dst = ((n * g.height + iy) * g.width + ix) * c;
                        let off = (ky * g.kernel + kx) * c;
                        for (d, &s) in out[dst..dst + c].iter_mut().zip(&src_row[off..off + c]) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_bias<T: Real>(bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.numel() != channels => Err(Error::dim(
            "conv2d",
            format!("bias has {} entries for {channels} output channels", b.numel()),
        )),
        _ => Ok(()),
    }
}

/// Output spatial size is `floor((H + 2p - K) / s) + 1`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, weight, stride, padding)?;
    check_bias(bias, g.out_channels)?;
    let rows = g.rows();
    let cout = g.out_channels;
    let mut out = vec![T::zero(); rows * cout];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(b.data());
        }
    }
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        input.data()
    } else {
        owned = im2col(input.data(), &g);
        &owned
    };
    gemm(
        rows,
        g.patch_len(),
        cout,
        cols,
        false,
        weight.data(),
        false,
        &mut out,
        bias.is_some(),
    );
    Tensor::new(vec![g.batch, g.out_height, g.out_width, cout], out)
}

pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of `conv2d`. The input gradient is skipped when `need_input` is false.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<Conv2dGrads<T>> {
    let g = ConvGeometry::new(input, weight, stride, padding)?;
    let rows = g.rows();
    let cout = g.out_channels;
    let plen = g.patch_len();
    if grad_out.numel() != rows * cout {
        return Err(Error::dim("conv2d", "output gradient shape mismatch"));
    }
    let dout = grad_out.data();

    let owned;
    let cols: &[T] = if g.is_pointwise() {
        input.data()
    } else {
        owned = im2col(input.data(), &g);
        &owned
    };
    let mut dw = vec![T::zero(); plen * cout];
    gemm(plen, rows, cout, cols, true, dout, false, &mut dw, false);

    let mut db = vec![T::zero(); cout];
    for row in dout.chunks_exact(cout) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }

    let dinput = if need_input {
        let mut dcols = vec![T::zero(); rows * plen];
        gemm(rows, cout, plen, dout, false, weight.data(), true, &mut dcols, false);
        let data = if g.is_pointwise() {
            dcols
        } else {
            col2im(&dcols, &g)
        };
        Some(Tensor::new(input.shape().to_vec(), data)?)
    } else {
        None
    };

    Ok(Conv2dGrads {
        input: dinput,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![cout], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct summation over the receptive field, independent of im2col.
    fn conv_oracle(
        input: &Tensor<f64>,
        weight: &Tensor<f64>,
        stride: usize,
        padding: usize,
    ) -> Tensor<f64> {
        let g = ConvGeometry::new(input, weight, stride, padding).unwrap();
        Tensor::from_fn(&[g.batch, g.out_height, g.out_width, g.out_channels], |flat| {
            let co = flat % g.out_channels;
            let ox = (flat / g.out_channels) % g.out_width;
            let oy = (flat / (g.out_channels * g.out_width)) % g.out_height;
            let n = flat / (g.out_channels * g.out_width * g.out_height);
            let mut acc = 0.0;
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if iy < 0 || ix < 0 || iy as usize >= g.height || ix as usize >= g.width {
                        continue;
                    }
                    for ci in 0..g.in_channels {
                        acc += input.at(&[n, iy as usize, ix as usize, ci])
                            * weight.at(&[ky, kx, ci, co]);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn all_ones_2x2_stride2_sums_to_four() {
        let input = Tensor::<f64>::full(&[1, 4, 4, 1], 1.0);
        let weight = Tensor::<f64>::full(&[2, 2, 1, 1], 1.0);
        let bias = Tensor::<f64>::zeros(&[1]);
        let out = conv2d(&input, &weight, Some(&bias), 2, 0).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 1]);
        let oracle = conv_oracle(&input, &weight, 2, 0);
        assert_eq!(out.data(), oracle.data());
        assert!(out.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn identity_pointwise_kernel_is_identity() {
        let c = 3;
        let input = Tensor::<f64>::from_fn(&[2, 3, 5, c], |i| (i as f64 * 0.37).sin());
        let weight = Tensor::from_fn(&[1, 1, c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let out = conv2d(&input, &weight, Some(&Tensor::zeros(&[c])), 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn patch_embed_shape_at_384() {
        let input = Tensor::<f32>::zeros(&[1, 384, 384, 3]);
        let weight = Tensor::<f32>::zeros(&[4, 4, 3, 64]);
        let out = conv2d(&input, &weight, None, 4, 0).unwrap();
        assert_eq!(out.shape(), &[1, 96, 96, 64]);
    }

    #[test]
    fn strided_padded_conv_matches_direct_sum() {
        let input = Tensor::<f64>::from_fn(&[2, 7, 6, 3], |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0);
        let weight = Tensor::<f64>::from_fn(&[4, 4, 3, 5], |i| ((i * 104729) % 17) as f64 / 8.0 - 1.0);
        for (stride, padding) in [(1, 0), (2, 1), (1, 1), (3, 2)] {
            let out = conv2d(&input, &weight, None, stride, padding).unwrap();
            let oracle = conv_oracle(&input, &weight, stride, padding);
            assert_eq!(out.shape(), oracle.shape());
            for (a, b) in out.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {padding}");
            }
        }
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let input = Tensor::<f32>::zeros(&[1, 4, 4, 2]);
        let weight = Tensor::<f32>::zeros(&[3, 3, 3, 1]);
        let err = conv2d(&input, &weight, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channel axis"), "{err}");
    }

    #[test]
    fn linear_in_input_without_bias() {
        let input = Tensor::<f64>::from_fn(&[1, 5, 5, 2], |i| (i as f64).cos());
        let weight = Tensor::<f64>::from_fn(&[3, 3, 2, 4], |i| (i as f64 * 0.3).sin());
        let base = conv2d(&input, &weight, None, 1, 1).unwrap();
        let scaled = conv2d(&input.map(|x| -2.5 * x), &weight, None, 1, 1).unwrap();
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert!((-2.5 * a - b).abs() < 1e-9);
        }
    }
}
