//! Augmentation and cross-validation splits.

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::images::resize_square;
use crate::error::{Error, Result};

/// Ratio of the pre-crop shorter side to the crop side.
pub const CROP_SOURCE_RATIO: f64 = 400.0 / 384.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentFlags {
    pub hflip: bool,
    pub vflip: bool,
    pub crop: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            crop: true,
        }
    }
}

impl AugmentFlags {
    pub fn none() -> Self {
        Self {
            hflip: false,
            vflip: false,
            crop: false,
        }
    }
}

/// Training view of `img` at `size × size`: independent 50% flips, then
/// either a random crop from a slightly larger resize or a plain resize.
pub fn augment(img: &RgbImage, size: u32, seed: u64, flags: AugmentFlags) -> Result<RgbImage> {
    if img.width() < size || img.height() < size {
        return Err(Error::Validation(format!(
            "image {}x{} smaller than crop {size}",
            img.width(),
            img.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, v) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let mut out = if flags.crop {
        let short = (f64::from(size) * CROP_SOURCE_RATIO).round() as u32;
        let (w0, h0) = img.dimensions();
        let scale = f64::from(short) / f64::from(w0.min(h0));
        let (w1, h1) = (
            ((f64::from(w0) * scale).round() as u32).max(size),
            ((f64::from(h0) * scale).round() as u32).max(size),
        );
        let resized = imageops::resize(img, w1, h1, FilterType::Triangle);
        let x = rng.random_range(0..=w1 - size);
        let y = rng.random_range(0..=h1 - size);
        imageops::crop_imm(&resized, x, y, size, size).to_image()
    } else {
        resize_square(img, size)
    };
    if flags.hflip && h {
        imageops::flip_horizontal_in_place(&mut out);
    }
    if flags.vflip && v {
        imageops::flip_vertical_in_place(&mut out);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub rounds: Vec<Split>,
}

pub const SPLIT_FRACTIONS: [f64; 3] = [0.80, 0.15, 0.05];
pub const MIN_SPLIT_SAMPLES: usize = 20;

/// `rounds` independent random 80/15/5 partitions of `0..n`.
pub fn make_splits(n: usize, rounds: usize, seed: u64) -> Result<SplitPlan> {
    if n < MIN_SPLIT_SAMPLES {
        return Err(Error::Validation(format!(
            "{n} samples; cross-validation needs at least {MIN_SPLIT_SAMPLES}"
        )));
    }
    if rounds == 0 {
        return Err(Error::Validation("at least one round required".into()));
    }
    let n_train = (n as f64 * SPLIT_FRACTIONS[0]).round() as usize;
    let n_test = (n as f64 * SPLIT_FRACTIONS[1]).round() as usize;
    let rounds = (0..rounds)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(&mut rng);
            let val = ids.split_off(n_train + n_test);
            let test = ids.split_off(n_train);
            Split { train: ids, test, val }
        })
        .collect();
    Ok(SplitPlan { rounds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 3) as u8, (y * 5) as u8, 7]))
    }

    #[test]
    fn split_sizes_for_100() {
        let plan = make_splits(100, 10, 1).unwrap();
        assert_eq!(plan.rounds.len(), 10);
        for s in &plan.rounds {
            assert_eq!((s.train.len(), s.test.len(), s.val.len()), (80, 15, 5));
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).chain(&s.val).copied().collect();
            all.sort();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
        }
        assert_ne!(plan.rounds[0], plan.rounds[1]);
        assert_eq!(plan, make_splits(100, 10, 1).unwrap());
        assert!(make_splits(19, 10, 1).is_err());
    }

    #[test]
    fn no_flags_is_plain_resize() {
        let img = gradient_image(60, 50);
        let a = augment(&img, 48, 1, AugmentFlags::none()).unwrap();
        let b = augment(&img, 48, 2, AugmentFlags::none()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, resize_square(&img, 48));
    }

    #[test]
    fn seeded_and_sized() {
        let img = gradient_image(64, 64);
        let a = augment(&img, 48, 9, AugmentFlags::default()).unwrap();
        assert_eq!(a.dimensions(), (48, 48));
        assert_eq!(a, augment(&img, 48, 9, AugmentFlags::default()).unwrap());
        assert!(augment(&gradient_image(40, 40), 48, 0, AugmentFlags::default()).is_err());
    }

    #[test]
    fn double_flip_is_identity() {
        let img = gradient_image(8, 8);
        let mut f = img.clone();
        imageops::flip_horizontal_in_place(&mut f);
        imageops::flip_horizontal_in_place(&mut f);
        assert_eq!(f, img);
    }
}
