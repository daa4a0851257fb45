//! Network-level invariants: residual structure, hypernetwork variants and training.

use fthnet_core::dataset::synth::{render, sample_spec};
use fthnet_core::dataset::SynthConfig;
use fthnet_core::model::checkpoint::write_checkpoint;
use fthnet_core::model::{Fthnet, FthnetConfig, HypernetMode};
use fthnet_core::par::Executor;
use fthnet_core::trainer::{train, AugmentFlags, Sample, TrainConfig};
use fthnet_core::Tensor;

fn image(size: usize, k: usize) -> Tensor<f32> {
    Tensor::from_fn(&[1, size, size, 3], |i| ((i * 7 + k * 13) as f32 * 0.37).sin())
}

fn samples(n: usize) -> Vec<Sample> {
    let synth = SynthConfig {
        size: 48,
        ..SynthConfig::default()
    };
    (0..n)
        .map(|i| {
            let spec = sample_spec(4, i);
            Sample {
                image: render(&synth, &spec).unwrap(),
                mos: spec.pseudo_mos(),
            }
        })
        .collect()
}

fn quick(max_iters: usize) -> TrainConfig {
    TrainConfig {
        max_iters,
        warmup_iters: 5,
        batch_size: 4,
        lr_peak: 1e-3,
        eval_every: 0,
        log_every: 10,
        augment: AugmentFlags::none(),
        seed: 9,
        ..TrainConfig::desk()
    }
}

#[test]
fn blocks_with_zero_output_projections_are_identities() {
    let base = Fthnet::<f32>::new(FthnetConfig::tiny(), 1).unwrap();
    let mut a = base.clone();
    let mut b = Fthnet::<f32>::new(FthnetConfig::tiny(), 2).unwrap();
    // b shares everything with a except the attention and MLP internals of stage 0
    let ids: Vec<_> = base.params().iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (id, name) in &ids {
        let inner = name.starts_with("stage0.block") && !name.contains(".attn.o.") && !name.contains(".mlp.fc2.");
        if !inner {
            *b.params_mut().get_mut(*id) = base.params().get(*id).clone();
        }
        if name.starts_with("stage0.block") && (name.contains(".attn.o.") || name.contains(".mlp.fc2.")) {
            for net in [&mut a, &mut b] {
                let t = net.params_mut().get_mut(*id);
                *t = t.map(|_| 0.0);
            }
        }
    }
    let x = image(48, 0);
    let (fa, fb) = (a.backbone_features(&x).unwrap(), b.backbone_features(&x).unwrap());
    assert_eq!(fa[0].data(), fb[0].data());
    // sanity: the untouched network differs
    assert_ne!(base.backbone_features(&x).unwrap()[0].data(), fa[0].data());
}

#[test]
fn direct_and_stepwise_emit_identical_shapes() {
    for preset in [FthnetConfig::tiny(), FthnetConfig::desk_s()] {
        let gen = |mode| {
            let net = Fthnet::<f32>::new(FthnetConfig { hypernet_mode: mode, ..preset.clone() }, 0).unwrap();
            let p = net.generate(&image(preset.input_size, 1)).unwrap();
            let w: Vec<_> = p.weights.iter().map(|t| t.shape().to_vec()).collect();
            let b: Vec<_> = p.biases.iter().map(|t| t.shape().to_vec()).collect();
            (w, b)
        };
        assert_eq!(gen(HypernetMode::Stepwise), gen(HypernetMode::Direct));
    }
}

#[test]
fn stepwise_merge_is_cheaper_from_sixteen_channels() {
    for c in [16, 32, 64, 96] {
        let count = |mode| {
            let cfg = FthnetConfig {
                embed_channels: c,
                hypernet_mode: mode,
                ..FthnetConfig::fthnet_s()
            };
            Fthnet::<f32>::new(cfg, 0).unwrap().count_merge_params()
        };
        assert!(count(HypernetMode::Stepwise) < count(HypernetMode::Direct), "C = {c}");
    }
}

#[test]
fn overfitting_four_images_lowers_the_loss() {
    let data = samples(4);
    let mut net = Fthnet::<f32>::new(FthnetConfig::tiny(), 0).unwrap();
    let out = train(&mut net, &data, &[], &quick(50), |_| {}).unwrap();
    let first = out.log.first().unwrap().loss;
    let last = out.log.last().unwrap().loss;
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn training_is_bitwise_reproducible_across_executors() {
    let data = samples(6);
    let run = |executor| {
        let mut net = Fthnet::<f32>::new(FthnetConfig::tiny(), 3).unwrap();
        let cfg = TrainConfig { executor, ..quick(6) };
        train(&mut net, &data, &[], &cfg, |_| {}).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&net, &mut bytes).unwrap();
        bytes
    };
    let a = run(Executor::Parallel);
    assert_eq!(a, run(Executor::Parallel));
    assert_eq!(a, run(Executor::Sequential));
}
