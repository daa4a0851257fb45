//! Single-image latency measurement.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_flops, Fthnet};
use crate::tensor::Tensor;

/// Published GPU single-image latencies, reported next to local numbers.
pub const REFERENCE_GPU_MS: [(&str, f64); 2] = [("s", 44.45), ("l", 56.31)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub input_size: usize,
    pub params: usize,
    pub flops: u64,
    pub warmup: usize,
    pub trials: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub p95_ms: f64,
    /// Score of the benchmark image (identical across trials).
    pub score: f64,
    pub reference_gpu_ms: Option<f64>,
}

/// Time `trials` forward passes of `image` after `warmup` untimed ones.
pub fn bench(model: &str, net: &Fthnet<f32>, image: &Tensor<f32>, warmup: usize, trials: usize) -> Result<BenchReport> {
    if trials == 0 {
        return Err(Error::Validation("bench needs at least one trial".into()));
    }
    for _ in 0..warmup {
        net.predict(image)?;
    }
    let mut times = Vec::with_capacity(trials);
    let mut score = None;
    for _ in 0..trials {
        let t = Instant::now();
        let s = net.predict(image)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        match score {
            None => score = Some(s),
            Some(prev) if prev.to_bits() != s.to_bits() => {
                return Err(Error::Validation("score changed between identical trials".into()))
            }
            _ => {}
        }
    }
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let p95_index = ((0.95 * trials as f64).ceil() as usize).clamp(1, trials) - 1;
    Ok(BenchReport {
        model: model.to_string(),
        input_size: net.config().input_size,
        params: net.count_params(),
        flops: count_flops(net.config()),
        warmup,
        trials,
        mean_ms: times.iter().sum::<f64>() / trials as f64,
        min_ms: sorted[0],
        p95_ms: sorted[p95_index],
        score: score.expect("at least one trial"),
        reference_gpu_ms: REFERENCE_GPU_MS.iter().find(|(m, _)| *m == model).map(|&(_, ms)| ms),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FthnetConfig;

    #[test]
    fn zero_trials_is_an_error() {
        let net = Fthnet::<f32>::new(FthnetConfig::tiny(), 0).unwrap();
        let img = Tensor::zeros(&[1, 48, 48, 3]);
        assert!(bench("tiny", &net, &img, 0, 0).is_err());
        let r = bench("s", &net, &img, 1, 3).unwrap();
        assert!(r.min_ms <= r.mean_ms && r.mean_ms > 0.0);
        assert_eq!(r.params, net.count_params());
        assert_eq!(r.reference_gpu_ms, Some(44.45));
    }
}
