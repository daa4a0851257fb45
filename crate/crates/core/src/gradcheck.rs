//! Finite-difference verification of analytic gradients.
//!
//! The scalar under test is `Σ out ⊙ R` for a fixed random projection `R`,
//! so every output element contributes. Analytic input gradients come from
//! the tape; numeric ones from central differences with step [`FD_STEP`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{window_attention, AttentionVars, HeadLayout};
use crate::error::Result;
use crate::graph::{Graph, GraphMode, Var};
use crate::model::{Fthnet, FthnetConfig};
use crate::tensor::Tensor;
use crate::trainer::{loss, loss_and_grad, LossKind};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative error, so exact zeros compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;
/// Attempts before a kinked sample is reported as-is.
pub const MAX_RESAMPLES: usize = 8;

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub kernel: String,
    pub max_rel_error: f64,
    pub elements: usize,
    pub resamples: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn projection(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_AB);
    Tensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0))
}

pub struct FnCheck {
    pub max_rel_error: f64,
    pub elements: usize,
    pub relu_margin: f64,
}

/// Compare tape gradients of `f` against central differences for every
/// element of every input.
pub fn check_fn<F>(inputs: &[Tensor<f64>], mode: GraphMode, f: F) -> Result<FnCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>], record: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>, f64)> {
        let mut g = Graph::new(GraphMode { record, ..mode });
        let vars: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let r = projection(g.value(out).numel(), 17);
        let value: f64 = g.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let grads = if record {
            let grads = g.backward(out, r)?;
            Some(
                vars.iter()
                    .zip(xs)
                    .map(|(&v, x)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
                    .collect(),
            )
        } else {
            None
        };
        Ok((value, grads, g.relu_margin()))
    };

    let (_, analytic, relu_margin) = eval(inputs, true)?;
    let analytic = analytic.expect("recorded");
    let mut worst: f64 = 0.0;
    let mut elements = 0;
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..probe[which].numel() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + FD_STEP;
            let (plus, _, _) = eval(&probe, false)?;
            probe[which].data_mut()[i] = orig - FD_STEP;
            let (minus, _, _) = eval(&probe, false)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad.data()[i], numeric));
            elements += 1;
        }
    }
    Ok(FnCheck {
        max_rel_error: worst,
        elements,
        relu_margin,
    })
}

/// Kernels with a gradient contract.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    Conv2d { kernel: usize, stride: usize, padding: usize },
    Linear,
    LayerNorm,
    SoftPool2d { kernel: usize },
    Softmax,
    Gelu,
    Relu,
    Dropout { rate: f64 },
    Bmm,
    WindowAttention { heads: usize },
    Gather,
}

impl Kernel {
    pub const ALL: [Kernel; 11] = [
        Kernel::Conv2d { kernel: 3, stride: 1, padding: 1 },
        Kernel::Linear,
        Kernel::LayerNorm,
        Kernel::SoftPool2d { kernel: 2 },
        Kernel::Softmax,
        Kernel::Gelu,
        Kernel::Relu,
        Kernel::Dropout { rate: 0.3 },
        Kernel::Bmm,
        Kernel::WindowAttention { heads: 2 },
        Kernel::Gather,
    ];

    pub fn name(&self) -> String {
        match self {
            Kernel::Conv2d { kernel, stride, padding } => format!("conv2d k{kernel} s{stride} p{padding}"),
            Kernel::Linear => "linear".into(),
            Kernel::LayerNorm => "layer_norm".into(),
            Kernel::SoftPool2d { kernel } => format!("softpool2d k{kernel}"),
            Kernel::Softmax => "softmax".into(),
            Kernel::Gelu => "gelu".into(),
            Kernel::Relu => "relu".into(),
            Kernel::Dropout { rate } => format!("dropout p{rate}"),
            Kernel::Bmm => "bmm".into(),
            Kernel::WindowAttention { heads } => format!("window_attention h{heads}"),
            Kernel::Gather => "gather".into(),
        }
    }

    /// Random O(1) inputs of a small random shape.
    fn sample_inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
        let shape: Vec<Vec<usize>> = match *self {
            Kernel::Conv2d { kernel, .. } => {
                let (h, w, cin, cout) = (dim(kernel, 8), dim(kernel, 8), dim(1, 3), dim(1, 3));
                vec![vec![1, h, w, cin], vec![kernel, kernel, cin, cout], vec![cout]]
            }
            Kernel::Linear => {
                let (r, din, dout) = (dim(1, 5), dim(1, 5), dim(1, 5));
                vec![vec![r, din], vec![din, dout], vec![dout]]
            }
            Kernel::LayerNorm => {
                let (r, c) = (dim(1, 4), dim(2, 8));
                vec![vec![r, c], vec![c], vec![c]]
            }
            Kernel::SoftPool2d { kernel } => {
                vec![vec![1, kernel * dim(1, 3), kernel * dim(1, 3), dim(1, 3)]]
            }
            Kernel::Softmax | Kernel::Gelu | Kernel::Relu | Kernel::Dropout { .. } => {
                vec![vec![dim(1, 4), dim(1, 6)]]
            }
            Kernel::Bmm => {
                let (b, m, k, n) = (dim(1, 3), dim(1, 4), dim(1, 4), dim(1, 4));
                vec![vec![b, m, k], vec![b, n, k]]
            }
            Kernel::WindowAttention { heads } => {
                let c = heads * dim(1, 3);
                let mut v = vec![vec![2, 3, c]];
                v.extend((0..4).map(|_| vec![c, c]));
                v.extend((0..4).map(|_| vec![c]));
                v
            }
            Kernel::Gather => vec![vec![4, 4, dim(1, 3)]],
        };
        shape
            .iter()
            .map(|s| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn apply(&self, g: &mut Graph<'_, f64>, v: &[Var]) -> Result<Var> {
        match *self {
            Kernel::Conv2d { stride, padding, .. } => g.conv2d(v[0], v[1], Some(v[2]), stride, padding),
            Kernel::Linear => g.linear(v[0], v[1], Some(v[2])),
            Kernel::LayerNorm => g.layer_norm(v[0], v[1], v[2]),
            Kernel::SoftPool2d { kernel } => g.softpool2d(v[0], kernel),
            Kernel::Softmax => g.softmax(v[0]),
            Kernel::Gelu => g.gelu(v[0]),
            Kernel::Relu => g.relu(v[0]),
            Kernel::Dropout { rate } => g.dropout(v[0], rate),
            Kernel::Bmm => g.bmm(v[0], false, v[1], true),
            Kernel::WindowAttention { heads } => {
                let c = g.shape(v[0])[2];
                let layout = HeadLayout::new(2, 3, c, heads)?;
                let p = AttentionVars {
                    q_weight: v[1],
                    k_weight: v[2],
                    v_weight: v[3],
                    o_weight: v[4],
                    q_bias: Some(v[5]),
                    k_bias: Some(v[6]),
                    v_bias: Some(v[7]),
                    o_bias: Some(v[8]),
                };
                window_attention(g, v[0], &p, &layout, None)
            }
            Kernel::Gather => {
                // shift + partition fused, the backbone's heaviest layout path
                use crate::kernels::layout::{compose, cyclic_shift_index, window_partition_index};
                let c = g.shape(v[0])[2];
                let idx = compose(&cyclic_shift_index(4, 4, c, -1), &window_partition_index(4, 4, c, 2)?);
                g.gather(v[0], idx.into(), &[4, 4, c])
            }
        }
    }
}

/// Check one kernel on inputs drawn from `seed`, resampling when a ReLU
/// input falls within a few steps of its kink.
pub fn check_gradient(kernel: Kernel, seed: u64, tolerance: f64) -> Result<GradReport> {
    let mode = match kernel {
        Kernel::Dropout { .. } => GraphMode::training(seed),
        _ => GraphMode::eval_with_grad(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resamples = 0;
    loop {
        let inputs = kernel.sample_inputs(&mut rng);
        let check = check_fn(&inputs, mode, |g, v| kernel.apply(g, v))?;
        if check.relu_margin < 10.0 * FD_STEP && resamples < MAX_RESAMPLES {
            resamples += 1;
            continue;
        }
        return Ok(GradReport {
            kernel: kernel.name(),
            max_rel_error: check.max_rel_error,
            elements: check.elements,
            resamples,
            passed: check.max_rel_error <= tolerance,
        });
    }
}

/// Parameters probed by [`check_model_gradient`]: backbone weights in an
/// unshifted and a shifted block, a downsampling conv, the distortion
/// network, and every hypernetwork stage that feeds the target network.
pub const MODEL_PROBES: [&str; 10] = [
    "patch_embed.weight",
    "stage0.block0.attn.q.weight",
    "stage0.block1.attn.k.weight",
    "stage1.block0.mlp.fc1.weight",
    "stage2.downsample.weight",
    "dpn.stage1.linear.weight",
    "hyper.merge1.weight",
    "hyper.pgl1.weight_conv.weight",
    "hyper.pgl3.bias_linear.weight",
    "hyper.pgl5.weight_linear.weight",
];

/// End-to-end check of the smooth-L1 training loss against central
/// differences, for `per_param` random elements of each probed parameter
/// present in the model.
pub fn check_model_gradient(config: &FthnetConfig, seed: u64, per_param: usize) -> Result<Vec<GradReport>> {
    let mut net = Fthnet::<f64>::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
    let s = config.input_size;
    let image = Tensor::from_fn(&[1, s, s, 3], |_| rng.random_range(-1.0..1.0));
    let target = [50.0];
    let loss_at = |net: &Fthnet<f64>| -> Result<f64> { loss(&[net.predict(&image)?], &target, LossKind::SmoothL1) };

    let analytic = {
        let mut g = Graph::new(GraphMode::eval_with_grad());
        let x = g.constant_ref(&image);
        let out = net.forward(&mut g, x)?;
        let pred = g.value(out.score).data()[0];
        let (_, dl) = loss_and_grad(&[pred], &target, LossKind::SmoothL1)?;
        let mut grads = g.backward(out.score, Tensor::full(&[1], dl[0]))?;
        g.param_grads(&mut grads)
    };

    let mut reports = Vec::new();
    for name in MODEL_PROBES {
        let Some(id) = net.params().find(name) else { continue };
        let grad = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(net.params().get(id).shape()));
        let mut worst: f64 = 0.0;
        for _ in 0..per_param {
            let i = rng.random_range(0..grad.numel());
            let orig = net.params().get(id).data()[i];
            net.params_mut().get_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = loss_at(&net)?;
            net.params_mut().get_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = loss_at(&net)?;
            net.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        reports.push(GradReport {
            kernel: format!("model:{name}"),
            max_rel_error: worst,
            elements: per_param,
            resamples: 0,
            passed: worst <= MODEL_TOLERANCE,
        });
    }
    Ok(reports)
}

/// Relative-error bound for end-to-end model gradients.
pub const MODEL_TOLERANCE: f64 = 1e-2;
