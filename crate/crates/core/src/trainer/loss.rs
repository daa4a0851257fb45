use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "l1+l2")]
    L1L2,
    #[default]
    #[serde(rename = "smooth_l1")]
    SmoothL1,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
            LossKind::L1L2 => "l1+l2",
            LossKind::SmoothL1 => "smooth_l1",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            "l1+l2" => Ok(LossKind::L1L2),
            "smooth_l1" => Ok(LossKind::SmoothL1),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// Per-element loss of a residual `d = pred − target`, and its derivative.
fn element(kind: LossKind, d: f64) -> (f64, f64) {
    match kind {
        LossKind::L1 => (d.abs(), d.signum() * f64::from(d != 0.0)),
        LossKind::L2 => (d * d, 2.0 * d),
        LossKind::L1L2 => (d.abs() + d * d, d.signum() * f64::from(d != 0.0) + 2.0 * d),
        LossKind::SmoothL1 => {
            if d.abs() < 1.0 {
                (0.5 * d * d, d)
            } else {
                (d.abs() - 0.5, d.signum())
            }
        }
    }
}

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::dim(
            "loss",
            format!("{} predictions vs {} targets", pred.len(), target.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::Empty("loss"));
    }
    Ok(())
}

/// Mean loss over the batch.
pub fn loss(pred: &[f64], target: &[f64], kind: LossKind) -> Result<f64> {
    check(pred, target)?;
    let total: f64 = pred.iter().zip(target).map(|(p, t)| element(kind, p - t).0).sum();
    Ok(total / pred.len() as f64)
}

/// Mean loss and its gradient with respect to each prediction.
pub fn loss_and_grad(pred: &[f64], target: &[f64], kind: LossKind) -> Result<(f64, Vec<f64>)> {
    check(pred, target)?;
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grads = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let (l, g) = element(kind, p - t);
            total += l;
            g / n
        })
        .collect();
    Ok((total / n, grads))
}

pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    loss(pred, target, LossKind::SmoothL1)
}
