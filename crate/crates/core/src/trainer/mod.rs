//! Optimization loop and the cross-validation harness.

pub mod data;
pub mod loss;
pub mod optim;

use std::io::Write;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::images::{load_rgb, prepare};
use crate::dataset::manifest::{resolve_image_path, SampleRecord};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphMode};
use crate::metrics::{srcc, EvalReport, Metrics, RoundMetrics};
use crate::model::checkpoint;
use crate::model::{Fthnet, FthnetConfig};
use crate::par::Executor;
use crate::tensor::Tensor;

pub use data::{augment, make_splits, AugmentFlags, Split, SplitPlan};
pub use loss::{loss, loss_and_grad, smooth_l1, LossKind};
pub use optim::{lr_at, Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_iters: usize,
    pub max_iters: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augment: AugmentFlags,
    pub seed: u64,
    pub loss: LossKind,
    /// Cross-validation rounds.
    pub rounds: usize,
    /// Validation interval for checkpoint selection (0 = final weights only).
    pub eval_every: usize,
    pub log_every: usize,
    pub executor: Executor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-length recipe: 120k iterations, 1k warmup, batch 16.
    pub fn full() -> Self {
        Self {
            lr_peak: 0.5e-4,
            warmup_iters: 1000,
            max_iters: 120_000,
            batch_size: 16,
            adam: AdamConfig::default(),
            augment: AugmentFlags::default(),
            seed: 0,
            loss: LossKind::SmoothL1,
            rounds: 10,
            eval_every: 1000,
            log_every: 100,
            executor: Executor::default(),
        }
    }

    /// CPU-scale run on synthetic data.
    pub fn desk() -> Self {
        Self {
            lr_peak: 3e-4,
            warmup_iters: 100,
            max_iters: 3000,
            batch_size: 8,
            eval_every: 250,
            ..Self::full()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown training profile `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters >= self.max_iters {
            return Err(Error::Config(format!(
                "warmup {} must be shorter than max_iters {}",
                self.warmup_iters, self.max_iters
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr_peak)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log interval must be positive".into()));
        }
        Ok(())
    }
}

/// A decoded image and its target score.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: RgbImage,
    pub mos: f64,
}

pub fn load_samples(manifest: &Path, records: &[SampleRecord], exec: Executor) -> Result<Vec<Sample>> {
    exec.try_map(records, |_, r| {
        Ok(Sample {
            image: load_rgb(resolve_image_path(manifest, r))?,
            mos: r.mos,
        })
    })
}

/// One `iter,loss,lr` log entry; `loss` is the mean batch loss since the
/// previous entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

impl std::fmt::Display for LogLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{:.6},{:.6e}", self.iter, self.loss, self.lr)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogLine>,
    /// Iteration whose weights were kept, if validation selected one.
    pub selected_iter: Option<usize>,
    pub selected_val_srcc: Option<f64>,
}

/// Per-sample RNG seed for augmentation and dropout.
fn mix(seed: u64, iter: usize, slot: usize) -> u64 {
    let mut x = seed ^ 0xA076_1D64_78BD_642F;
    for v in [iter as u64, slot as u64] {
        x = (x ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        x ^= x >> 29;
    }
    x
}

/// Predictions with evaluation preprocessing (plain resize).
pub fn predict_samples(net: &Fthnet<f32>, samples: &[Sample], exec: Executor) -> Result<Vec<f64>> {
    let size = net.config().input_size;
    exec.try_map(samples, |_, s| net.predict(&prepare(&s.image, size)))
}

pub fn evaluate(net: &Fthnet<f32>, samples: &[Sample], exec: Executor) -> Result<Metrics> {
    let pred = predict_samples(net, samples, exec)?;
    let target: Vec<f64> = samples.iter().map(|s| s.mos).collect();
    Metrics::compute(&pred, &target)
}

/// Train `net` in place. When `val` is non-empty and `eval_every > 0`, the
/// weights with the best validation SRCC are kept; otherwise the final ones.
pub fn train(
    net: &mut Fthnet<f32>,
    train_set: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogLine),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let size = net.config().input_size as u32;
    let mut adam = Adam::new(cfg.adam, net.params_mut().tensors_mut());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    let (mut window_loss, mut window_n) = (0.0, 0);
    let mut best: Option<(f64, usize, Vec<Tensor<f32>>)> = None;

    for iter in 0..cfg.max_iters {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| {
                if order.is_empty() {
                    order = (0..train_set.len()).collect();
                    order.shuffle(&mut rng);
                }
                order.pop().expect("refilled")
            })
            .collect();

        let this = &*net;
        let per_sample = cfg.executor.try_map(&batch, |slot, &i| -> Result<_> {
            let s = &train_set[i];
            let seed = mix(cfg.seed, iter, slot);
            let img = augment(&s.image, size, seed, cfg.augment)?;
            let x = prepare::<f32>(&img, size as usize);
            let mut g = Graph::new(GraphMode::training(seed));
            let xv = g.constant(x);
            let out = this.forward(&mut g, xv)?;
            let pred = g.value(out.score).data()[0] as f64;
            let (l, dl) = loss_and_grad(&[pred], &[s.mos], cfg.loss)?;
            let seed_grad = Tensor::full(&[1], (dl[0] / cfg.batch_size as f64) as f32);
            let mut grads = g.backward(out.score, seed_grad)?;
            Ok((l, g.param_grads(&mut grads)))
        })?;

        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; net.params().len()];
        let mut batch_loss = 0.0;
        for (l, sample_grads) in per_sample {
            batch_loss += l;
            for (id, gr) in sample_grads {
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&gr),
                    slot @ None => *slot = Some(gr),
                }
            }
        }
        batch_loss /= cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let lr = lr_at(iter, cfg.lr_peak, cfg.warmup_iters, cfg.max_iters);
        adam.step(net.params_mut().tensors_mut(), &grads, lr);

        window_loss += batch_loss;
        window_n += 1;
        let done = iter + 1;
        if done % cfg.log_every == 0 || done == cfg.max_iters {
            let line = LogLine {
                iter: done,
                loss: window_loss / window_n as f64,
                lr,
            };
            on_log(&line);
            log.push(line);
            window_loss = 0.0;
            window_n = 0;
        }
        let validate_now = cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.max_iters);
        if validate_now && val.len() >= 2 {
            let pred = predict_samples(net, val, cfg.executor)?;
            let target: Vec<f64> = val.iter().map(|s| s.mos).collect();
            // constant predictions leave SRCC undefined; such weights are never selected
            if let Ok(v) = srcc(&pred, &target) {
                if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                    best = Some((v, done, net.params().iter().map(|(_, _, t)| t.clone()).collect()));
                }
            }
        }
    }

    let (selected_val_srcc, selected_iter) = match best {
        Some((v, it, tensors)) => {
            for (slot, t) in net.params_mut().tensors_mut().iter_mut().zip(tensors) {
                *slot = t;
            }
            (Some(v), Some(it))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        log,
        selected_iter,
        selected_val_srcc,
    })
}

/// Model seed for round `r`.
pub fn round_seed(seed: u64, round: usize) -> u64 {
    mix(seed, usize::MAX, round)
}

/// Train one round of `plan` and report its test metrics. Test labels are
/// read only after training (and checkpoint selection) has finished.
pub fn train_round(
    samples: &[Sample],
    split: &Split,
    round: usize,
    model: &FthnetConfig,
    cfg: &TrainConfig,
    on_log: impl FnMut(&LogLine),
) -> Result<(Fthnet<f32>, TrainOutcome, RoundMetrics)> {
    let pick = |ids: &[usize]| ids.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let mut net = Fthnet::new(model.clone(), round_seed(cfg.seed, round))?;
    let round_cfg = TrainConfig {
        seed: round_seed(cfg.seed, round),
        ..cfg.clone()
    };
    let outcome = train(&mut net, &pick(&split.train), &pick(&split.val), &round_cfg, on_log)?;
    let metrics = evaluate(&net, &pick(&split.test), cfg.executor)?;
    Ok((net, outcome, RoundMetrics { round, metrics }))
}

/// Full cross-validation. With `out_dir`, writes `round{r}.ckpt`,
/// `round{r}.log` and `report.json` / `report.csv` there.
pub fn cross_validate(
    samples: &[Sample],
    model: &FthnetConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(usize, &LogLine),
) -> Result<EvalReport> {
    let plan = make_splits(samples.len(), cfg.rounds, cfg.seed)?;
    let mut rounds = Vec::new();
    for (r, split) in plan.rounds.iter().enumerate() {
        let mut lines = Vec::new();
        let (net, _, metrics) = train_round(samples, split, r, model, cfg, |l| {
            progress(r, l);
            lines.push(*l);
        })?;
        if let Some(dir) = out_dir {
            checkpoint::save(&net, dir.join(format!("round{r}.ckpt")))?;
            let mut f = std::fs::File::create(dir.join(format!("round{r}.log")))?;
            for l in &lines {
                writeln!(f, "{l}")?;
            }
        }
        rounds.push(metrics);
    }
    let report = EvalReport::from_rounds(rounds)?;
    if let Some(dir) = out_dir {
        report.save(dir)?;
    }
    Ok(report)
}
