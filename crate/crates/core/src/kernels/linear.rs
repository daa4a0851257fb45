use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

fn rows_of<T: Real>(input: &Tensor<T>, din: usize) -> Result<usize> {
    if input.last_dim() != din || input.numel() % din.max(1) != 0 {
        return Err(Error::dim(
            "linear",
            format!(
                "last axis of input {:?} must equal weight input size {din}",
                input.shape()
            ),
        ));
    }
    Ok(input.numel() / din)
}

/// `input · weight + bias`, broadcast over every leading axis of `input`.
pub fn linear<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [din, dout] = match *weight.shape() {
        [a, b] => [a, b],
        _ => {
            return Err(Error::dim(
                "linear",
                format!("weight must be [Din, Dout], got {:?}", weight.shape()),
            ))
        }
    };
    let rows = rows_of(input, din)?;
    let mut out = vec![T::zero(); rows * dout];
    if let Some(b) = bias {
        if b.numel() != dout {
            return Err(Error::dim(
                "linear",
                format!("bias has {} entries for Dout {dout}", b.numel()),
            ));
        }
        for row in out.chunks_exact_mut(dout) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(rows, din, dout, input.data(), false, weight.data(), false, &mut out, bias.is_some());
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank checked") = dout;
    Tensor::new(shape, out)
}

pub struct LinearGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<LinearGrads<T>> {
    let (din, dout) = (weight.shape()[0], weight.shape()[1]);
    let rows = rows_of(input, din)?;
    let dy = grad_out.data();
    let input_grad = if need[0] {
        let mut dx = vec![T::zero(); rows * din];
        gemm(rows, dout, din, dy, false, weight.data(), true, &mut dx, false);
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };
    let weight_grad = if need[1] {
        let mut dw = vec![T::zero(); din * dout];
        gemm(din, rows, dout, input.data(), true, dy, false, &mut dw, false);
        Some(Tensor::new(vec![din, dout], dw)?)
    } else {
        None
    };
    let bias_grad = if need[2] {
        let mut db = vec![T::zero(); dout];
        for row in dy.chunks_exact(dout) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        Some(Tensor::new(vec![dout], db)?)
    } else {
        None
    };
    Ok(LinearGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    })
}

/// Shape bookkeeping for a batched product `op(a) · op(b)`.
#[derive(Clone, Copy, Debug)]
pub struct BmmDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub trans_a: bool,
    pub trans_b: bool,
}

impl BmmDims {
    pub fn new<T: Real>(a: &Tensor<T>, trans_a: bool, b: &Tensor<T>, trans_b: bool) -> Result<Self> {
        let (ba, a0, a1) = match *a.shape() {
            [b, r, c] => (b, r, c),
            _ => return Err(Error::dim("bmm", format!("lhs must be rank 3, got {:?}", a.shape()))),
        };
        let (bb, b0, b1) = match *b.shape() {
            [b, r, c] => (b, r, c),
            _ => return Err(Error::dim("bmm", format!("rhs must be rank 3, got {:?}", b.shape()))),
        };
        if ba != bb {
            return Err(Error::dim("bmm", format!("batch axis {ba} vs {bb}")));
        }
        let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
        let (k2, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if k != k2 {
            return Err(Error::dim("bmm", format!("contraction axis {k} vs {k2}")));
        }
        Ok(Self {
            batch: ba,
            m,
            k,
            n,
            trans_a,
            trans_b,
        })
    }
}

/// Batched matrix product over the leading axis.
pub fn bmm<T: Real>(a: &Tensor<T>, trans_a: bool, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let d = BmmDims::new(a, trans_a, b, trans_b)?;
    let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
    let mut out = vec![T::zero(); d.batch * sc];
    for (i, c) in out.chunks_exact_mut(sc.max(1)).enumerate().take(d.batch) {
        gemm(
            d.m,
            d.k,
            d.n,
            &a.data()[i * sa..(i + 1) * sa],
            trans_a,
            &b.data()[i * sb..(i + 1) * sb],
            trans_b,
            c,
            false,
        );
    }
    Tensor::new(vec![d.batch, d.m, d.n], out)
}

/// Gradients of [`bmm`] with respect to both operands, in their stored layouts.
pub fn bmm_backward<T: Real>(
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
    grad_out: &Tensor<T>,
    need: [bool; 2],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let d = BmmDims::new(a, trans_a, b, trans_b)?;
    let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
    let dy = grad_out.data();
    let ga = need[0].then(|| {
        let mut da = vec![T::zero(); d.batch * sa];
        for i in 0..d.batch {
            let bi = &b.data()[i * sb..(i + 1) * sb];
            let gi = &dy[i * sc..(i + 1) * sc];
            let out = &mut da[i * sa..(i + 1) * sa];
            if trans_a {
                // stored [k, m] = op(b) · dyᵀ
                gemm(d.k, d.n, d.m, bi, trans_b, gi, true, out, false);
            } else {
                // [m, k] = dy · op(b)ᵀ
                gemm(d.m, d.n, d.k, gi, false, bi, !trans_b, out, false);
            }
        }
        da
    });
    let gb = need[1].then(|| {
        let mut db = vec![T::zero(); d.batch * sb];
        for i in 0..d.batch {
            let ai = &a.data()[i * sa..(i + 1) * sa];
            let gi = &dy[i * sc..(i + 1) * sc];
            let out = &mut db[i * sb..(i + 1) * sb];
            if trans_b {
                // stored [n, k] = dyᵀ · op(a)
                gemm(d.n, d.m, d.k, gi, true, ai, trans_a, out, false);
            } else {
                // [k, n] = op(a)ᵀ · dy
                gemm(d.k, d.m, d.n, ai, !trans_a, gi, false, out, false);
            }
        }
        db
    });
    Ok((
        ga.map(|v| Tensor::new(a.shape().to_vec(), v)).transpose()?,
        gb.map(|v| Tensor::new(b.shape().to_vec(), v)).transpose()?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let x = Tensor::<f64>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0]);
    }

    #[test]
    fn identity_weight_is_identity_over_leading_axes() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32 - 7.0);
        let w = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let y = linear(&x, &w, Some(&Tensor::zeros(&[4]))).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn flatten_512_to_144() {
        let x = Tensor::<f32>::zeros(&[512]);
        let w = Tensor::<f32>::zeros(&[512, 144]);
        assert_eq!(linear(&x, &w, None).unwrap().shape(), &[144]);
    }

    #[test]
    fn din_mismatch_is_dimension_error() {
        let x = Tensor::<f32>::zeros(&[3, 5]);
        let w = Tensor::<f32>::zeros(&[4, 2]);
        assert!(matches!(linear(&x, &w, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn bmm_transposes_agree_with_explicit_transpose() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i as f64 * 0.7).sin());
        let b = Tensor::<f64>::from_fn(&[2, 5, 4], |i| (i as f64 * 0.3).cos());
        let c = bmm(&a, false, &b, true).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for p in 0..4 {
                        acc += a.at(&[bi, i, p]) * b.at(&[bi, j, p]);
                    }
                    assert!((c.at(&[bi, i, j]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}
