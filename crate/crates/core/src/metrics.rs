//! RMSE, PLCC and SRCC, and the cross-validation report built from them.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pairs(pred: &[f64], target: &[f64], min: usize, op: &'static str) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::dim(
            op,
            format!("{} predictions vs {} targets", pred.len(), target.len()),
        ));
    }
    if pred.len() < min {
        return Err(Error::Empty(op));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pairs(pred, target, 1, "rmse")?;
    let sq: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson linear correlation.
pub fn plcc(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pairs(pred, target, 2, "plcc")?;
    let (mp, mt) = (mean(pred), mean(target));
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let (dp, dt) = (p - mp, t - mt);
        cov += dp * dt;
        vp += dp * dp;
        vt += dt * dt;
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(Error::UndefinedCorrelation("a vector is constant"));
    }
    Ok((cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn has_ties(ranks: &[f64]) -> bool {
    ranks.iter().any(|r| r.fract() != 0.0) || {
        let mut sorted = ranks.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.windows(2).any(|w| w[0] == w[1])
    }
}

/// Spearman rank correlation. Uses `1 − 6Σd²/(n(n²−1))` on tie-free data
/// and the Pearson correlation of average ranks otherwise.
pub fn srcc(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pairs(pred, target, 2, "srcc")?;
    let (rp, rt) = (average_ranks(pred), average_ranks(target));
    if has_ties(&rp) || has_ties(&rt) {
        return plcc(&rp, &rt);
    }
    let n = pred.len() as f64;
    let d2: f64 = rp.iter().zip(&rt).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub plcc: f64,
    pub srcc: f64,
}

impl Metrics {
    pub fn compute(pred: &[f64], target: &[f64]) -> Result<Self> {
        Ok(Self {
            rmse: rmse(pred, target)?,
            plcc: plcc(pred, target)?,
            srcc: srcc(pred, target)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Per-round test metrics with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rounds: Vec<RoundMetrics>,
    pub mean: Metrics,
    pub std: Metrics,
}

impl EvalReport {
    pub fn from_rounds(rounds: Vec<RoundMetrics>) -> Result<Self> {
        if rounds.is_empty() {
            return Err(Error::Empty("evaluation report"));
        }
        let pick = |f: fn(&Metrics) -> f64| -> (f64, f64) {
            let xs: Vec<f64> = rounds.iter().map(|r| f(&r.metrics)).collect();
            let m = mean(&xs);
            let sd = if xs.len() > 1 {
                (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            (m, sd)
        };
        let (rm, rs) = pick(|m| m.rmse);
        let (pm, ps) = pick(|m| m.plcc);
        let (sm, ss) = pick(|m| m.srcc);
        Ok(Self {
            rounds,
            mean: Metrics {
                rmse: rm,
                plcc: pm,
                srcc: sm,
            },
            std: Metrics {
                rmse: rs,
                plcc: ps,
                srcc: ss,
            },
        })
    }

    /// `round,rmse,plcc,srcc`, one row per round.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "rmse", "plcc", "srcc"])?;
        for r in &self.rounds {
            w.write_record([
                r.round.to_string(),
                r.metrics.rmse.to_string(),
                r.metrics.plcc.to_string(),
                r.metrics.srcc.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write `report.json` and `report.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        self.write_csv(std::fs::File::create(dir.join("report.csv"))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_hand_case() {
        assert_eq!(rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 12.5f64.sqrt());
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn srcc_hand_case() {
        assert_eq!(srcc(&[1.0, 3.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.5);
    }

    #[test]
    fn correlation_signs() {
        let y = [1.0, 2.0, 5.0, 3.0];
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((plcc(&y, &y).unwrap() - 1.0).abs() < 1e-15);
        assert!((plcc(&neg, &y).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(srcc(&neg, &y).unwrap(), -1.0);
    }

    #[test]
    fn constant_vector_is_undefined() {
        assert!(matches!(
            plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(srcc(&[2.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn report_aggregates_and_csv() {
        let r = |round, rmse| RoundMetrics {
            round,
            metrics: Metrics {
                rmse,
                plcc: 0.9,
                srcc: 0.8,
            },
        };
        let rep = EvalReport::from_rounds(vec![r(0, 1.0), r(1, 3.0)]).unwrap();
        assert_eq!(rep.mean.rmse, 2.0);
        assert!((rep.std.rmse - 2f64.sqrt()).abs() < 1e-12);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("round,rmse,plcc,srcc\n0,1,0.9,0.8\n"));
    }
}
