//! Synthetic degraded pseudo-fundus images with a known quality score.
//!
//! Each image is a reddish disc on black with a bright optic disc, a darker
//! macula and dark curved vessels. Four degradations are applied with
//! independent severities in [0, 1]; the pseudo-MOS is a strictly decreasing
//! function of every severity.

use std::f64::consts::PI;
use std::path::Path;

use image::{ImageBuffer, Rgb, Rgb32FImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Executor;

use super::manifest::{save_manifest, SampleRecord};
use super::ratings::{level_from_score, LevelThresholds};

/// Severity mix: blur dominates.
pub const SEVERITY_WEIGHTS: [f64; 4] = [0.4, 0.25, 0.2, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub blur: f64,
    pub haze: f64,
    pub illumination: f64,
    pub darkness: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.severities_named() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} severity {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn severities_named(&self) -> [(&'static str, f64); 4] {
        [
            ("blur", self.blur),
            ("haze", self.haze),
            ("illumination", self.illumination),
            ("darkness", self.darkness),
        ]
    }

    /// Weighted severity in [0, 1].
    pub fn severity(&self) -> f64 {
        self.severities_named()
            .iter()
            .zip(SEVERITY_WEIGHTS)
            .map(|((_, v), w)| v * w)
            .sum()
    }

    /// `clamp(100 − 70·s, 0, 100)`.
    pub fn pseudo_mos(&self) -> f64 {
        (100.0 - 70.0 * self.severity()).clamp(0.0, 100.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Side of the square output images.
    pub size: u32,
    /// Blur sigma at full severity, as a fraction of the image side.
    pub max_blur: f64,
    pub vessels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 96,
            max_blur: 0.04,
            vessels: 9,
        }
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draw the clean image for `seed`, then degrade it per `spec`.
pub fn render(config: &SynthConfig, spec: &DegradationSpec) -> Result<RgbImage> {
    spec.validate()?;
    let s = config.size as usize;
    if s < 16 {
        return Err(Error::Validation(format!("synthetic image size {s} below 16")));
    }
    let mut rng = seeded(spec.seed, 0);
    let sf = s as f64;
    let (cx, cy, radius) = (sf / 2.0, sf / 2.0, 0.46 * sf);

    // smooth background: a few random low-frequency waves
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let angle = rng.random_range(0.0..2.0 * PI);
            let freq = rng.random_range(0.5..2.0) * 2.0 * PI / sf;
            (angle.cos() * freq, angle.sin() * freq, rng.random_range(0.0..2.0 * PI), rng.random_range(0.02..0.06))
        })
        .collect();
    let base = [rng.random_range(0.70..0.85), rng.random_range(0.32..0.45), rng.random_range(0.12..0.22)];
    let od_angle = rng.random_range(-0.4..0.4) + if rng.random_bool(0.5) { 0.0 } else { PI };
    let (odx, ody) = (cx + 0.55 * radius * od_angle.cos(), cy + 0.55 * radius * od_angle.sin());
    let od_r = rng.random_range(0.09..0.12) * sf;
    let (mx, my) = (2.0 * cx - odx * 0.9 - cx * 0.1, 2.0 * cy - ody * 0.9 - cy * 0.1);

    let mut img: Rgb32FImage = ImageBuffer::new(s as u32, s as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut shade: f64 = 1.0;
        for &(kx, ky, phase, amp) in &waves {
            shade += amp * (kx * xf + ky * yf + phase).sin();
        }
        let dm = ((xf - mx).powi(2) + (yf - my).powi(2)).sqrt() / (0.15 * sf);
        shade *= 1.0 - 0.25 * (-dm * dm).exp();
        let dd = ((xf - odx).powi(2) + (yf - ody).powi(2)).sqrt() / od_r;
        let glow = (-dd * dd).exp();
        let mut c = [0.0f32; 3];
        for ch in 0..3 {
            let v = base[ch] * shade + glow * (0.95 - base[ch] * shade) * 0.9;
            c[ch] = v as f32;
        }
        *px = Rgb(c);
    }

    // vessels: bent arcs leaving the optic disc
    for _ in 0..config.vessels {
        let mut angle: f64 = rng.random_range(0.0..2.0 * PI);
        let bend = rng.random_range(-0.03..0.03);
        let width = rng.random_range(0.6..1.6) * sf / 96.0;
        let (mut px, mut py) = (odx, ody);
        let steps = (sf * 0.9) as usize;
        for _ in 0..steps {
            px += angle.cos() * 0.5;
            py += angle.sin() * 0.5;
            angle += bend + rng.random_range(-0.05..0.05);
            let r = width.ceil() as i64 + 1;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (qx, qy) = (px.round() as i64 + dx, py.round() as i64 + dy);
                    if qx < 0 || qy < 0 || qx >= s as i64 || qy >= s as i64 {
                        continue;
                    }
                    let d = ((qx as f64 + 0.5 - px).powi(2) + (qy as f64 + 0.5 - py).powi(2)).sqrt();
                    if d < width {
                        let p = img.get_pixel_mut(qx as u32, qy as u32);
                        let k = (0.55 + 0.15 * (d / width)) as f32;
                        p.0[0] *= k + 0.1;
                        p.0[1] *= k;
                        p.0[2] *= k;
                    }
                }
            }
        }
    }

    // degradations, in acquisition order
    let sigma = (spec.blur * config.max_blur * sf) as f32;
    if sigma > 0.0 {
        img = image::imageops::blur(&img, sigma);
    }
    let illum_angle = rng.random_range(0.0..2.0 * PI);
    let (ux, uy) = (illum_angle.cos(), illum_angle.sin());
    let haze = 0.7 * spec.haze;
    let dark = 1.0 - 0.75 * spec.darkness;
    let mut out = RgbImage::new(s as u32, s as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        let r = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
        if r > radius {
            continue;
        }
        // 0 on one side of the disc, 1 on the other
        let ramp = (((xf - cx) * ux + (yf - cy) * uy) / radius + 1.0) / 2.0;
        let gain = (1.0 - 0.8 * spec.illumination * ramp) * dark;
        let src = img.get_pixel(x, y).0;
        let mut c = [0u8; 3];
        for ch in 0..3 {
            let v = ((1.0 - haze) * f64::from(src[ch]) + haze * 0.85) * gain;
            c[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        *p = Rgb(c);
    }
    Ok(out)
}

/// Severities for sample `index` of a dataset drawn with `seed`.
pub fn sample_spec(seed: u64, index: usize) -> DegradationSpec {
    let mut rng = seeded(seed, 1 + index as u64);
    DegradationSpec {
        blur: rng.random_range(0.0..=1.0),
        haze: rng.random_range(0.0..=1.0),
        illumination: rng.random_range(0.0..=1.0),
        darkness: rng.random_range(0.0..=1.0),
        seed: rng.random(),
    }
}

/// Write `n` images to `out/images/` and their manifest to
/// `out/manifest.csv`. The same seed always reproduces the same bytes.
pub fn synth_generate(n: usize, config: &SynthConfig, seed: u64, out: &Path, exec: Executor) -> Result<Vec<SampleRecord>> {
    if n == 0 {
        return Err(Error::Validation("synthetic dataset needs at least one image".into()));
    }
    let images = out.join("images");
    std::fs::create_dir_all(&images)?;
    let indices: Vec<usize> = (0..n).collect();
    let records = exec.try_map(&indices, |_, &i| -> Result<SampleRecord> {
        let spec = sample_spec(seed, i);
        let img = render(config, &spec)?;
        let rel = format!("images/{i:05}.png");
        img.save(out.join(&rel))?;
        let mos = spec.pseudo_mos();
        Ok(SampleRecord::new(rel, mos, level_from_score(mos, LevelThresholds::default())?))
    })?;
    save_manifest(&records, out.join("manifest.csv"))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(b: f64, h: f64, i: f64, d: f64) -> DegradationSpec {
        DegradationSpec {
            blur: b,
            haze: h,
            illumination: i,
            darkness: d,
            seed: 3,
        }
    }

    #[test]
    fn mos_boundaries() {
        assert_eq!(spec(0.0, 0.0, 0.0, 0.0).pseudo_mos(), 100.0);
        assert!((spec(1.0, 1.0, 1.0, 1.0).pseudo_mos() - 30.0).abs() < 1e-12);
    }

    #[test]
    fn render_is_deterministic_and_masked() {
        let cfg = SynthConfig::default();
        let a = render(&cfg, &spec(0.3, 0.2, 0.5, 0.1)).unwrap();
        let b = render(&cfg, &spec(0.3, 0.2, 0.5, 0.1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get_pixel(0, 0).0, [0, 0, 0]);
        assert_ne!(a.get_pixel(48, 48).0, [0, 0, 0]);
    }

    #[test]
    fn darkness_darkens() {
        let cfg = SynthConfig::default();
        let mean = |img: &RgbImage| img.as_raw().iter().map(|&v| f64::from(v)).sum::<f64>();
        let clean = render(&cfg, &spec(0.0, 0.0, 0.0, 0.0)).unwrap();
        let dark = render(&cfg, &spec(0.0, 0.0, 0.0, 1.0)).unwrap();
        assert!(mean(&dark) < 0.5 * mean(&clean));
    }

    #[test]
    fn rejects_out_of_range_severity() {
        assert!(render(&SynthConfig::default(), &spec(1.5, 0.0, 0.0, 0.0)).is_err());
    }
}
