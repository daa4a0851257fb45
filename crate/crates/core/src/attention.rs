//! Window-based multi-head self-attention on the tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::layout::{head_split_index, invert};
use crate::tensor::Real;

/// Projections of one attention layer. Weights are `[C, C]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q_weight: Var,
    pub q_bias: Option<Var>,
    pub k_weight: Var,
    pub k_bias: Option<Var>,
    pub v_weight: Var,
    pub v_bias: Option<Var>,
    pub o_weight: Var,
    pub o_bias: Option<Var>,
}

/// Precomputed head split/merge permutations for a fixed window geometry.
#[derive(Clone, Debug)]
pub struct HeadLayout {
    pub windows: usize,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
    split: Arc<[usize]>,
    merge: Arc<[usize]>,
}

impl HeadLayout {
    pub fn new(windows: usize, tokens: usize, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split over {heads} heads"
            )));
        }
        let head_dim = channels / heads;
        let split = head_split_index(windows, tokens, heads, head_dim);
        let merge = invert(&split);
        Ok(Self {
            windows,
            tokens,
            heads,
            head_dim,
            split: split.into(),
            merge: merge.into(),
        })
    }

    fn channels(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Scaled dot-product attention computed independently in every window.
///
/// `x` is `[num_windows, tokens, C]`. Heads attend with scale `1/√(C/heads)`,
/// are concatenated, then projected by the output weight. `mask`, when given,
/// is an additive `[num_windows, tokens, tokens]` logit bias shared by heads.
pub fn window_attention<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    p: &AttentionVars,
    layout: &HeadLayout,
    mask: Option<Var>,
) -> Result<Var> {
    let expected = [layout.windows, layout.tokens, layout.channels()];
    if g.shape(x) != expected {
        return Err(Error::dim(
            "window_attention",
            format!("input {:?} vs layout {expected:?}", g.shape(x)),
        ));
    }
    let per_head = [layout.heads * layout.windows, layout.tokens, layout.head_dim];

    let q = g.linear(x, p.q_weight, p.q_bias)?;
    let k = g.linear(x, p.k_weight, p.k_bias)?;
    let v = g.linear(x, p.v_weight, p.v_bias)?;
    let q = g.gather(q, layout.split.clone(), &per_head)?;
    let k = g.gather(k, layout.split.clone(), &per_head)?;
    let v = g.gather(v, layout.split.clone(), &per_head)?;

    let scores = g.bmm(q, false, k, true)?;
    let scale = T::from_f64_lossy(1.0 / (layout.head_dim as f64).sqrt());
    let mut scores = g.scale(scores, scale)?;
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let attn = g.softmax(scores)?;
    let heads = g.bmm(attn, false, v, false)?;
    let merged = g.gather(heads, layout.merge.clone(), &expected)?;
    g.linear(merged, p.o_weight, p.o_bias)
}
