//! Quality levels, rater opinions and their aggregation into a MOS.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Good,
    Usable,
    Reject,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Good => "Good",
            Level::Usable => "Usable",
            Level::Reject => "Reject",
        })
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "good" => Ok(Level::Good),
            "usable" => Ok(Level::Usable),
            "reject" => Ok(Level::Reject),
            other => Err(Error::Validation(format!("unknown quality level `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelThresholds {
    pub good_min: f64,
    pub reject_max: f64,
}

impl Default for LevelThresholds {
    fn default() -> Self {
        Self {
            good_min: 75.0,
            reject_max: 55.0,
        }
    }
}

/// `score ≥ good_min` is Good, `score < reject_max` is Reject, else Usable.
pub fn level_from_score(score: f64, t: LevelThresholds) -> Result<Level> {
    if t.good_min <= t.reject_max {
        return Err(Error::Config(format!(
            "good threshold {} must exceed reject threshold {}",
            t.good_min, t.reject_max
        )));
    }
    Ok(if score >= t.good_min {
        Level::Good
    } else if score < t.reject_max {
        Level::Reject
    } else {
        Level::Usable
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaterTier {
    Experienced,
    Junior,
}

impl FromStr for RaterTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "experienced" => Ok(RaterTier::Experienced),
            "junior" => Ok(RaterTier::Junior),
            other => Err(Error::Validation(format!("unknown rater tier `{other}`"))),
        }
    }
}

/// One rater's opinion of one image. Scores are integers in 0..=100.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub rater_id: String,
    pub tier: RaterTier,
    pub score: u8,
    pub level: Level,
}

impl RatingRecord {
    pub fn validate(&self) -> Result<()> {
        if self.score > 100 {
            return Err(Error::Validation(format!("score {} outside 0..=100", self.score)));
        }
        Ok(())
    }
}

/// Per-tier weights on the summed scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationWeights {
    pub lambda_experienced: f64,
    pub lambda_junior: f64,
    /// Divide by the total applied weight so the MOS is a true weighted mean.
    pub normalize: bool,
}

impl Default for AggregationWeights {
    fn default() -> Self {
        Self {
            lambda_experienced: 0.22,
            lambda_junior: 0.11,
            normalize: false,
        }
    }
}

/// `λ_exp · Σ experienced + λ_jr · Σ junior` (optionally normalized).
pub fn aggregate_mos(ratings: &[RatingRecord], w: &AggregationWeights) -> Result<f64> {
    if ratings.is_empty() {
        return Err(Error::Aggregation("no ratings".into()));
    }
    if w.lambda_experienced < 0.0 || w.lambda_junior < 0.0 {
        return Err(Error::Config("aggregation weights must be non-negative".into()));
    }
    let (mut sum_e, mut n_e, mut sum_j, mut n_j) = (0.0, 0usize, 0.0, 0usize);
    for r in ratings {
        r.validate()?;
        match r.tier {
            RaterTier::Experienced => {
                sum_e += f64::from(r.score);
                n_e += 1;
            }
            RaterTier::Junior => {
                sum_j += f64::from(r.score);
                n_j += 1;
            }
        }
    }
    for (lambda, n, tier) in [(w.lambda_experienced, n_e, "experienced"), (w.lambda_junior, n_j, "junior")] {
        if lambda > 0.0 && n == 0 {
            return Err(Error::Aggregation(format!("no {tier} ratings")));
        }
    }
    let mos = w.lambda_experienced * sum_e + w.lambda_junior * sum_j;
    if w.normalize {
        let total = w.lambda_experienced * n_e as f64 + w.lambda_junior * n_j as f64;
        if total == 0.0 {
            return Err(Error::Aggregation("weights sum to zero".into()));
        }
        return Ok(mos / total);
    }
    Ok(mos)
}

/// Population standard deviation.
pub fn population_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

/// Linear-interpolated quantile of sorted data (`q` in [0, 1]).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdQuartiles {
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdStats {
    /// Population SD per image; `None` where fewer than two ratings exist.
    pub per_image: Vec<Option<f64>>,
    /// Images left out for having fewer than two ratings.
    pub skipped: usize,
    /// Quartiles of the per-image SDs; `None` when no image qualified.
    pub quartiles: Option<SdQuartiles>,
}

pub fn rating_sd_stats(per_image: &[Vec<f64>]) -> SdStats {
    let sds: Vec<Option<f64>> = per_image
        .iter()
        .map(|r| (r.len() >= 2).then(|| population_sd(r)))
        .collect();
    let mut valid: Vec<f64> = sds.iter().flatten().copied().collect();
    valid.sort_by(f64::total_cmp);
    let skipped = sds.len() - valid.len();
    if skipped > 0 {
        log::warn!("{skipped} image(s) with fewer than two ratings left out of SD statistics");
    }
    let quartiles = (!valid.is_empty()).then(|| SdQuartiles {
        q25: quantile(&valid, 0.25),
        q50: quantile(&valid, 0.5),
        q75: quantile(&valid, 0.75),
    });
    SdStats {
        per_image: sds,
        skipped,
        quartiles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rating(tier: RaterTier, score: u8) -> RatingRecord {
        RatingRecord {
            rater_id: format!("{tier:?}{score}"),
            tier,
            score,
            level: Level::Usable,
        }
    }

    fn panel(e: [u8; 3], j: [u8; 3]) -> Vec<RatingRecord> {
        e.iter()
            .map(|&s| rating(RaterTier::Experienced, s))
            .chain(j.iter().map(|&s| rating(RaterTier::Junior, s)))
            .collect()
    }

    #[test]
    fn six_rater_hand_case() {
        let mos = aggregate_mos(&panel([80; 3], [70; 3]), &AggregationWeights::default()).unwrap();
        assert!((mos - 75.9).abs() < 1e-12);
    }

    #[test]
    fn normalized_weights_give_plain_mean_for_equal_scores() {
        let w = AggregationWeights {
            normalize: true,
            ..Default::default()
        };
        let mos = aggregate_mos(&panel([60; 3], [60; 3]), &w).unwrap();
        assert!((mos - 60.0).abs() < 1e-12);
    }

    #[test]
    fn missing_tier_or_empty_is_an_error() {
        let w = AggregationWeights::default();
        assert!(aggregate_mos(&[], &w).is_err());
        assert!(aggregate_mos(&[rating(RaterTier::Junior, 50)], &w).is_err());
    }

    #[test]
    fn levels_at_boundaries() {
        let t = LevelThresholds::default();
        assert_eq!(level_from_score(75.0, t).unwrap(), Level::Good);
        assert_eq!(level_from_score(54.9, t).unwrap(), Level::Reject);
        assert_eq!(level_from_score(55.0, t).unwrap(), Level::Usable);
        assert_eq!(level_from_score(60.0, t).unwrap(), Level::Usable);
        let inverted = LevelThresholds {
            good_min: 50.0,
            reject_max: 60.0,
        };
        assert!(level_from_score(60.0, inverted).is_err());
    }

    #[test]
    fn sd_stats() {
        let s = rating_sd_stats(&[vec![70.0, 80.0], vec![5.0; 4], vec![1.0]]);
        assert_eq!(s.per_image, vec![Some(5.0), Some(0.0), None]);
        assert_eq!(s.skipped, 1);
        let q = s.quartiles.unwrap();
        assert_eq!((q.q25, q.q50, q.q75), (1.25, 2.5, 3.75));
    }
}
