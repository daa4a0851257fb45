use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the target network gets its parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypernetMode {
    /// Chain of channel-halving 1x1 convs, each feeding the next.
    #[default]
    Stepwise,
    /// Independent 1x1 convs, all reading the last backbone stage.
    Direct,
    /// Target-network parameters learned directly (no hypernetwork).
    Off,
}

/// Architecture hyperparameters.
///
/// Every shape the network produces is derived from these fields, and
/// [`FthnetConfig::validate`] rejects any combination that would fail at
/// forward time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FthnetConfig {
    /// BTB count per stage (N1..N4).
    pub depths: [usize; 4],
    /// Patch embedding channels C.
    pub embed_channels: usize,
    pub window_size: usize,
    /// Alternate cyclic window shift on odd blocks.
    pub shift: bool,
    /// Mask attention between tokens that only meet because of the roll.
    pub shift_mask: bool,
    pub heads: [usize; 4],
    pub mlp_ratio: f64,
    /// Target network input width L (= 4 * dpb_out_len).
    pub target_width: usize,
    /// Per-stage distortion vector length l.
    pub dpb_out_len: usize,
    pub hypernet_mode: HypernetMode,
    pub input_size: usize,
    /// Patch embedding kernel and stride.
    pub patch_size: usize,
    /// SoftPool kernel (and stride) inside each distortion perception block.
    pub dpb_pool: usize,
    pub dropout: f64,
    /// Multiplier on the raw target-network output.
    pub output_scale: f64,
}

impl Default for FthnetConfig {
    fn default() -> Self {
        Self::fthnet_l()
    }
}

impl FthnetConfig {
    /// FTHNet-L: depths (2, 2, 6, 2), C = 64, 384 input.
    pub fn fthnet_l() -> Self {
        Self {
            depths: [2, 2, 6, 2],
            embed_channels: 64,
            window_size: 12,
            shift: true,
            shift_mask: true,
            heads: [2, 4, 8, 16],
            mlp_ratio: 4.0,
            target_width: 576,
            dpb_out_len: 144,
            hypernet_mode: HypernetMode::Stepwise,
            input_size: 384,
            patch_size: 4,
            dpb_pool: 12,
            dropout: 0.0,
            output_scale: 1.0,
        }
    }

    /// The (2, 4, 6, 2), C = 64 variant.
    pub fn fthnet_l_deep() -> Self {
        Self {
            depths: [2, 4, 6, 2],
            ..Self::fthnet_l()
        }
    }

    /// FTHNet-S: depths (2, 4, 6, 2), C = 32, 384 input.
    pub fn fthnet_s() -> Self {
        Self {
            depths: [2, 4, 6, 2],
            embed_channels: 32,
            heads: [1, 2, 4, 8],
            ..Self::fthnet_l()
        }
    }

    /// FTHNet-S blocks and channels at a 48x48 input, for CPU-scale runs.
    ///
    /// Stages run at 24/12/6/3 with window 3; pooling by 3 gives the same
    /// 8/4/2/1 distortion grids as the 384 model, and L = 96 keeps every
    /// generated weight matrix integral against the 3x3 final map.
    pub fn desk_s() -> Self {
        Self {
            input_size: 48,
            patch_size: 2,
            window_size: 3,
            dpb_pool: 3,
            target_width: 96,
            dpb_out_len: 24,
            output_scale: 100.0,
            ..Self::fthnet_s()
        }
    }

    /// Smallest useful network; used for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            depths: [1, 1, 1, 1],
            embed_channels: 8,
            heads: [1, 2, 2, 4],
            ..Self::desk_s()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "l" | "fthnet-l" => Ok(Self::fthnet_l()),
            "l-deep" | "fthnet-l-deep" => Ok(Self::fthnet_l_deep()),
            "s" | "fthnet-s" => Ok(Self::fthnet_s()),
            "desk-s" => Ok(Self::desk_s()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    /// Spatial side of stage `i` (0..4).
    pub fn stage_resolution(&self, i: usize) -> usize {
        self.input_size / self.patch_size / (1 << i)
    }

    pub fn stage_channels(&self, i: usize) -> usize {
        self.embed_channels << i
    }

    /// Side of the final feature map feeding the hypernetwork.
    pub fn map_size(&self) -> usize {
        self.stage_resolution(3)
    }

    pub fn mlp_hidden(&self, channels: usize) -> usize {
        (channels as f64 * self.mlp_ratio).round() as usize
    }

    /// Target network widths: L, L/2, L/4, L/8, L/16, 1.
    pub fn target_dims(&self) -> [usize; 6] {
        let l = self.target_width;
        [l, l / 2, l / 4, l / 8, l / 16, 1]
    }

    /// Channels of the hypernetwork feature P_k for k in 1..=5: 8C / 2^k.
    pub fn merge_channels(&self, k: usize) -> usize {
        (8 * self.embed_channels) >> k
    }

    /// Output channels of the weight branch of PGL k (1..=4): the count that
    /// makes `map² · channels` equal the weight matrix element count.
    pub fn pgl_channels(&self, k: usize) -> usize {
        let d = self.target_dims();
        d[k - 1] * d[k] / (self.map_size() * self.map_size())
    }

    /// Length of the flattened pooled map in DPB `i`.
    pub fn dpb_flat_len(&self, i: usize) -> usize {
        let side = self.stage_resolution(i) / self.dpb_pool;
        side * side * self.stage_channels(i) / 8
    }

    /// Cyclic shift used by block `block` of stage `stage` (0 = unshifted).
    pub fn block_shift(&self, stage: usize, block: usize) -> usize {
        let shiftable = self.shift && self.stage_resolution(stage) > self.window_size;
        if shiftable && block % 2 == 1 {
            self.window_size / 2
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return fail(format!(
                "input size {} not divisible by patch size {}",
                self.input_size, self.patch_size
            ));
        }
        let base = self.input_size / self.patch_size;
        if base % 8 != 0 {
            return fail(format!(
                "embedded resolution {base} must halve cleanly three times"
            ));
        }
        if self.window_size == 0 || self.dpb_pool == 0 {
            return fail("window size and pooling kernel must be positive".into());
        }
        let c = self.embed_channels;
        if c == 0 || c % 8 != 0 {
            return fail(format!("embed channels {c} must be a positive multiple of 8"));
        }
        if self.merge_channels(5) == 0 {
            return fail(format!("embed channels {c} too small for five halvings"));
        }
        for i in 0..4 {
            let r = self.stage_resolution(i);
            if r % self.window_size != 0 {
                return fail(format!(
                    "stage {i} resolution {r} not divisible by window {}",
                    self.window_size
                ));
            }
            if r % self.dpb_pool != 0 {
                return fail(format!(
                    "stage {i} resolution {r} not divisible by pooling kernel {}",
                    self.dpb_pool
                ));
            }
            let ch = self.stage_channels(i);
            if self.heads[i] == 0 || ch % self.heads[i] != 0 {
                return fail(format!(
                    "stage {i}: {ch} channels not divisible by {} heads",
                    self.heads[i]
                ));
            }
            if self.depths[i] == 0 {
                return fail(format!("stage {i} has no blocks"));
            }
        }
        if self.mlp_hidden(c) == 0 {
            return fail("mlp ratio yields an empty hidden layer".into());
        }
        if self.target_width != 4 * self.dpb_out_len {
            return fail(format!(
                "target width {} must be 4 x distortion length {}",
                self.target_width, self.dpb_out_len
            ));
        }
        if self.target_width % 32 != 0 {
            return fail(format!("target width {} must be divisible by 32", self.target_width));
        }
        let map2 = self.map_size() * self.map_size();
        let d = self.target_dims();
        for k in 1..=4 {
            if (d[k - 1] * d[k]) % map2 != 0 {
                return fail(format!(
                    "generated layer {k}: {}x{} weights do not fill a {}x{} map with whole channels",
                    d[k - 1],
                    d[k],
                    self.map_size(),
                    self.map_size()
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !self.output_scale.is_finite() || self.output_scale == 0.0 {
            return fail("output scale must be finite and non-zero".into());
        }
        Ok(())
    }
}
