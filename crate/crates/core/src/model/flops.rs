//! Closed-form operation counts.
//!
//! FLOPs are multiply-accumulates × 2 over every conv, linear and batched
//! matmul in one forward pass; normalization, activations, pooling and
//! layout moves are not counted.

use super::config::{FthnetConfig, HypernetMode};

/// FLOPs of one forward pass at `config.input_size`.
pub fn count_flops(config: &FthnetConfig) -> u64 {
    let c = config;
    let mac = |outputs: usize, contraction: usize| 2 * (outputs as u64) * (contraction as u64);
    let mut total = 0;

    let r0 = c.stage_resolution(0);
    total += mac(r0 * r0 * c.embed_channels, c.patch_size * c.patch_size * 3);
    for i in 0..4 {
        let r = c.stage_resolution(i);
        let ch = c.stage_channels(i);
        let tokens = c.window_size * c.window_size;
        let positions = r * r;
        let hidden = c.mlp_hidden(ch);
        let per_block = 4 * mac(positions * ch, ch)
            // scores and attention-weighted values: each position pairs with
            // every token of its window across all head dims
            + 2 * mac(positions * tokens, ch)
            + mac(positions * hidden, ch)
            + mac(positions * ch, hidden);
        total += per_block * c.depths[i] as u64;
        if i < 3 {
            let half = r / 2;
            total += mac(half * half * 2 * ch, 16 * ch);
        }
        // distortion perception block
        total += mac(positions * ch / 8, ch);
        total += mac(c.dpb_out_len, c.dpb_flat_len(i));
    }

    let d = c.target_dims();
    if c.hypernet_mode != HypernetMode::Off {
        let m2 = c.map_size() * c.map_size();
        for k in 1..=5 {
            let cin = match c.hypernet_mode {
                HypernetMode::Stepwise => c.merge_channels(k - 1),
                _ => c.merge_channels(0),
            };
            total += mac(m2 * c.merge_channels(k), cin);
        }
        for k in 1..=4 {
            total += mac(m2 * c.pgl_channels(k), 9 * c.merge_channels(k));
            total += mac(d[k], c.merge_channels(k));
        }
        total += mac(d[4] + 1, c.merge_channels(5));
    }
    for k in 1..=5 {
        total += mac(d[k], d[k - 1]);
    }
    total
}
