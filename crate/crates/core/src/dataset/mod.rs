//! Manifests, rater-score aggregation, image IO and the synthetic generator.

pub mod images;
pub mod manifest;
pub mod ratings;
pub mod synth;

pub use images::{decode_rgb, load_rgb, prepare, rgb_to_tensor};
pub use manifest::{load_manifest, resolve_image_path, save_manifest, SampleRecord};
pub use ratings::{
    aggregate_mos, level_from_score, rating_sd_stats, AggregationWeights, Level, LevelThresholds, RaterTier,
    RatingRecord, SdStats,
};
pub use synth::{synth_generate, DegradationSpec, SynthConfig};
