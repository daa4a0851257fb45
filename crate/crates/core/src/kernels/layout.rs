//! Data-movement kernels expressed as gather permutations.
//!
//! Every layout change the backbone needs (window partition/merge, cyclic
//! shift, head split/merge) is a permutation of element positions. Building
//! the index once lets the autodiff tape reuse a single gather op whose
//! backward is a scatter-add, and lets shift + partition fuse into one pass.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Additive logit penalty between tokens that came from different regions
/// of a cyclically shifted map.
pub const SHIFT_MASK_PENALTY: f64 = -100.0;

/// `out[i] = input[index[i]]`.
pub fn gather<T: Real>(input: &Tensor<T>, index: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if n != index.len() {
        return Err(Error::dim(
            "gather",
            format!("index length {} vs shape {shape:?}", index.len()),
        ));
    }
    let src = input.data();
    if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
        return Err(Error::dim(
            "gather",
            format!("index {bad} out of range for {} elements", src.len()),
        ));
    }
    Tensor::new(shape.to_vec(), index.iter().map(|&i| src[i]).collect())
}

/// Adjoint of [`gather`]: scatter-add `grad_out` back to the source layout.
pub fn gather_backward<T: Real>(input_shape: &[usize], index: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in index.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    dx
}

/// Apply `first`, then `second`: the fused gather index.
pub fn compose(first: &[usize], second: &[usize]) -> Vec<usize> {
    second.iter().map(|&i| first[i]).collect()
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (dst, &src) in perm.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

fn check_windows(h: usize, w: usize, window: usize) -> Result<()> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::dim(
            "window_partition",
            format!("spatial axes {h}x{w} not divisible by window {window}"),
        ));
    }
    Ok(())
}

/// Index taking an `[H, W, C]` map to `[num_windows, window², C]`, windows in
/// row-major order and tokens row-major within each window.
pub fn window_partition_index(h: usize, w: usize, c: usize, window: usize) -> Result<Vec<usize>> {
    check_windows(h, w, window)?;
    let (nh, nw) = (h / window, w / window);
    let mut index = Vec::with_capacity(h * w * c);
    for wy in 0..nh {
        for wx in 0..nw {
            for ty in 0..window {
                for tx in 0..window {
                    let base = ((wy * window + ty) * w + wx * window + tx) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    Ok(index)
}

/// Index rolling an `[H, W, C]` map toroidally: `out[y, x] = in[y − o, x − o]`.
pub fn cyclic_shift_index(h: usize, w: usize, c: usize, offset: isize) -> Vec<usize> {
    let mut index = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let sy = (y as isize - offset).rem_euclid(h as isize) as usize;
        for x in 0..w {
            let sx = (x as isize - offset).rem_euclid(w as isize) as usize;
            let base = (sy * w + sx) * c;
            index.extend(base..base + c);
        }
    }
    index
}

/// Index taking `[B, T, H·D]` to head-major `[H, B, T, D]`.
pub fn head_split_index(batch: usize, tokens: usize, heads: usize, head_dim: usize) -> Vec<usize> {
    let c = heads * head_dim;
    let mut index = Vec::with_capacity(batch * tokens * c);
    for h in 0..heads {
        for b in 0..batch {
            for t in 0..tokens {
                let base = (b * tokens + t) * c + h * head_dim;
                index.extend(base..base + head_dim);
            }
        }
    }
    index
}

fn spatial_dims<T: Real>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] | [1, h, w, c] => Ok((h, w, c)),
        _ => Err(Error::dim(op, format!("expected [H, W, C], got {:?}", x.shape()))),
    }
}

pub fn window_partition<T: Real>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (h, w, c) = spatial_dims(x, "window_partition")?;
    let index = window_partition_index(h, w, c, window)?;
    gather(x, &index, &[(h / window) * (w / window), window * window, c])
}

/// Inverse of [`window_partition`] for an `h × w` map.
pub fn window_merge<T: Real>(windows: &Tensor<T>, h: usize, w: usize, window: usize) -> Result<Tensor<T>> {
    let c = windows.last_dim();
    if windows.numel() != h * w * c {
        return Err(Error::dim(
            "window_merge",
            format!("{:?} does not hold a {h}x{w}x{c} map", windows.shape()),
        ));
    }
    let index = invert(&window_partition_index(h, w, c, window)?);
    gather(windows, &index, &[h, w, c])
}

pub fn cyclic_shift<T: Real>(x: &Tensor<T>, offset: isize) -> Result<Tensor<T>> {
    let (h, w, c) = spatial_dims(x, "cyclic_shift")?;
    if offset.unsigned_abs() >= h.min(w) && offset != 0 {
        return Err(Error::dim(
            "cyclic_shift",
            format!("offset {offset} must be smaller than {h}x{w}"),
        ));
    }
    gather(x, &cyclic_shift_index(h, w, c, offset), x.shape())
}

/// Additive attention mask `[num_windows, window², window²]` for windows
/// taken after rolling the map by `-shift`. Tokens that were not spatial
/// neighbours before the roll get [`SHIFT_MASK_PENALTY`].
pub fn shifted_window_mask<T: Real>(h: usize, w: usize, window: usize, shift: usize) -> Result<Tensor<T>> {
    check_windows(h, w, window)?;
    let region = |pos: usize, size: usize| -> usize {
        if pos < size - window {
            0
        } else if pos < size - shift {
            1
        } else {
            2
        }
    };
    let labels: Vec<usize> = (0..h * w)
        .map(|i| region(i / w, h) * 3 + region(i % w, w))
        .collect();
    let labels = Tensor::<T>::new(
        vec![h, w, 1],
        labels.iter().map(|&l| T::from_usize(l).unwrap()).collect(),
    )?;
    let windows = window_partition(&labels, window)?;
    let t = window * window;
    let nw = windows.numel() / t;
    let penalty = T::from_f64_lossy(SHIFT_MASK_PENALTY);
    let lab = windows.data();
    Tensor::new(
        vec![nw, t, t],
        (0..nw * t * t)
            .map(|i| {
                let (win, a, b) = (i / (t * t), (i / t) % t, i % t);
                if lab[win * t + a] == lab[win * t + b] {
                    T::zero()
                } else {
                    penalty
                }
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_96_by_12_gives_64_windows() {
        let x = Tensor::<f32>::zeros(&[96, 96, 2]);
        assert_eq!(window_partition(&x, 12).unwrap().shape(), &[64, 144, 2]);
        let y = Tensor::<f32>::zeros(&[12, 12, 2]);
        assert_eq!(window_partition(&y, 12).unwrap().shape(), &[1, 144, 2]);
    }

    #[test]
    fn partition_rejects_indivisible() {
        let x = Tensor::<f32>::zeros(&[10, 12, 1]);
        assert!(window_partition(&x, 12).is_err());
    }

    #[test]
    fn two_by_two_roll() {
        let x = Tensor::<f64>::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(cyclic_shift(&x, 1).unwrap().data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(cyclic_shift(&x, 0).unwrap(), x);
    }

    #[test]
    fn roll_moves_elements_forward() {
        let x = Tensor::<f64>::from_fn(&[3, 4, 1], |i| i as f64);
        let y = cyclic_shift(&x, 1).unwrap();
        assert_eq!(y.at(&[1, 1, 0]), x.at(&[0, 0, 0]));
        assert_eq!(y.at(&[0, 0, 0]), x.at(&[2, 3, 0]));
    }

    #[test]
    fn head_split_is_a_permutation() {
        let idx = head_split_index(3, 4, 2, 5);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..120).collect::<Vec<_>>());
        assert_eq!(invert(&invert(&idx)), idx);
    }

    #[test]
    fn mask_unshifted_layout_is_all_zero_for_interior_window() {
        // 4x4 map, window 2, shift 1 (cf. the reference Swin mask test):
        // window 0 lies fully in region 0 so it is unmasked.
        let m = shifted_window_mask::<f32>(4, 4, 2, 1).unwrap();
        assert_eq!(m.shape(), &[4, 4, 4]);
        assert!(m.data()[..16].iter().all(|&v| v == 0.0));
        // window 1 pairs columns across the wrap seam: tokens 0 and 1 differ
        assert_eq!(m.at(&[1, 0, 1]), SHIFT_MASK_PENALTY as f32);
        assert_eq!(m.at(&[1, 0, 2]), 0.0);
        // window 3 is four distinct regions: only the diagonal is open
        for a in 0..4 {
            for b in 0..4 {
                let expect = if a == b { 0.0 } else { SHIFT_MASK_PENALTY as f32 };
                assert_eq!(m.at(&[3, a, b]), expect);
            }
        }
    }
}
