//! Window geometry and the Basic Transformer Block.

use std::sync::Arc;

use crate::attention::{window_attention, AttentionVars, HeadLayout};
use crate::error::Result;
use crate::graph::{Graph, ParamId, Var};
use crate::kernels::layout::{compose, cyclic_shift_index, invert, shifted_window_mask, window_partition_index};
use crate::tensor::{Real, Tensor};

use super::config::FthnetConfig;
use super::params::ParamStore;

/// Gather indices taking a stage map to windows and back, for one shift.
#[derive(Clone, Debug)]
pub(crate) struct WindowPlan {
    pub shift: usize,
    pub to_windows: Arc<[usize]>,
    pub from_windows: Arc<[usize]>,
}

impl WindowPlan {
    fn new(res: usize, channels: usize, window: usize, shift: usize) -> Result<Self> {
        let partition = window_partition_index(res, res, channels, window)?;
        let to_windows = if shift == 0 {
            partition
        } else {
            compose(&cyclic_shift_index(res, res, channels, -(shift as isize)), &partition)
        };
        let from_windows = invert(&to_windows);
        Ok(Self {
            shift,
            to_windows: to_windows.into(),
            from_windows: from_windows.into(),
        })
    }
}

/// Everything about one stage that depends only on the config.
#[derive(Clone, Debug)]
pub(crate) struct StageGeometry<T> {
    pub resolution: usize,
    pub channels: usize,
    pub layout: HeadLayout,
    pub plain: WindowPlan,
    pub shifted: Option<WindowPlan>,
    pub mask: Option<Tensor<T>>,
}

impl<T: Real> StageGeometry<T> {
    pub fn new(config: &FthnetConfig, stage: usize) -> Result<Self> {
        let res = config.stage_resolution(stage);
        let ch = config.stage_channels(stage);
        let w = config.window_size;
        let windows = (res / w) * (res / w);
        let layout = HeadLayout::new(windows, w * w, ch, config.heads[stage])?;
        let shift = config.block_shift(stage, 1);
        let (shifted, mask) = if shift > 0 {
            let mask = if config.shift_mask {
                Some(shifted_window_mask(res, res, w, shift)?)
            } else {
                None
            };
            (Some(WindowPlan::new(res, ch, w, shift)?), mask)
        } else {
            (None, None)
        };
        Ok(Self {
            resolution: res,
            channels: ch,
            layout,
            plain: WindowPlan::new(res, ch, w, 0)?,
            shifted,
            mask,
        })
    }

    pub fn plan(&self, shift: usize) -> &WindowPlan {
        match &self.shifted {
            Some(p) if shift == p.shift => p,
            _ => &self.plain,
        }
    }

    /// Window that attends each spatial position, row-major over the map.
    pub fn window_membership(&self, shift: usize) -> Vec<usize> {
        let plan = self.plan(shift);
        let c = self.channels;
        let tokens = self.layout.tokens;
        let mut ids = vec![0; self.resolution * self.resolution];
        for (slot, &src) in plan.to_windows.iter().enumerate().step_by(c) {
            ids[src / c] = slot / c / tokens;
        }
        ids
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    pub norm1: (ParamId, ParamId),
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub o: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
    pub shift: usize,
}

/// `F' = W-MSA(LN(F)) + F`, then `F_out = MLP(LN(F')) + F'`.
///
/// `x` is the `[1, H, W, C]` residual stream.
pub(crate) fn btb_forward<'a, T: Real>(
    g: &mut Graph<'a, T>,
    params: &'a ParamStore<T>,
    geo: &'a StageGeometry<T>,
    ids: &BlockIds,
    dropout: f64,
    x: Var,
) -> Result<Var> {
    let mut p = |id: ParamId| g.param(id, params.get(id));
    let (n1g, n1b) = (p(ids.norm1.0), p(ids.norm1.1));
    let attn = AttentionVars {
        q_weight: p(ids.q.0),
        q_bias: Some(p(ids.q.1)),
        k_weight: p(ids.k.0),
        k_bias: Some(p(ids.k.1)),
        v_weight: p(ids.v.0),
        v_bias: Some(p(ids.v.1)),
        o_weight: p(ids.o.0),
        o_bias: Some(p(ids.o.1)),
    };
    let (n2g, n2b) = (p(ids.norm2.0), p(ids.norm2.1));
    let (f1w, f1b, f2w, f2b) = (p(ids.fc1.0), p(ids.fc1.1), p(ids.fc2.0), p(ids.fc2.1));

    let plan = geo.plan(ids.shift);
    let lay = &geo.layout;
    let mask = match (&geo.mask, plan.shift) {
        (Some(m), s) if s > 0 => Some(g.constant_ref(m)),
        _ => None,
    };
    let map_shape = g.shape(x).to_vec();

    let h = g.layer_norm(x, n1g, n1b)?;
    let h = g.gather(h, plan.to_windows.clone(), &[lay.windows, lay.tokens, geo.channels])?;
    let h = window_attention(g, h, &attn, lay, mask)?;
    let h = g.gather(h, plan.from_windows.clone(), &map_shape)?;
    let x = g.add(x, h)?;

    let h = g.layer_norm(x, n2g, n2b)?;
    let h = g.linear(h, f1w, Some(f1b))?;
    let h = g.gelu(h)?;
    let h = g.dropout(h, dropout)?;
    let h = g.linear(h, f2w, Some(f2b))?;
    let h = g.dropout(h, dropout)?;
    g.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_counts_at_96() {
        let geo = StageGeometry::<f32>::new(&FthnetConfig::fthnet_l(), 0).unwrap();
        assert_eq!(geo.layout.windows, 64);
        assert_eq!(geo.layout.tokens, 144);
        let last = StageGeometry::<f32>::new(&FthnetConfig::fthnet_l(), 3).unwrap();
        assert_eq!(last.layout.windows, 1);
        assert!(last.shifted.is_none());
    }

    #[test]
    fn shifted_membership_straddles_plain_windows() {
        let geo = StageGeometry::<f32>::new(&FthnetConfig::tiny(), 0).unwrap();
        let plain = geo.window_membership(0);
        let shifted = geo.window_membership(1);
        let res = geo.resolution;
        // plain windows are aligned 3x3 tiles
        assert_eq!(plain[0], plain[2 * res + 2]);
        assert_ne!(plain[2], plain[3]);
        // rolled by one, positions 1 and 3 (same row) now share a window
        assert_ne!(plain[1], plain[3]);
        assert_eq!(shifted[res + 1], shifted[res + 3]);
        let mut counts = vec![0; geo.layout.windows];
        for &w in &shifted {
            counts[w] += 1;
        }
        assert!(counts.iter().all(|&c| c == geo.layout.tokens));
    }
}
