//! The FTHNet architecture: transformer backbone, distortion perception
//! network, parameter hypernetwork and target network.

mod backbone;
pub mod checkpoint;
pub mod config;
pub mod flops;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphMode, ParamId, Var};
use crate::par::Executor;
use crate::tensor::{Real, Tensor};

use backbone::{btb_forward, BlockIds, StageGeometry};
pub use config::{FthnetConfig, HypernetMode};
pub use flops::count_flops;
pub use params::{Init, ParamStore};

/// Std of the truncated normal used for attention and MLP weights.
const BACKBONE_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
struct StageIds {
    blocks: Vec<BlockIds>,
    downsample: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct DpbIds {
    conv: (ParamId, ParamId),
    linear: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct PglIds {
    weight_conv: (ParamId, ParamId),
    bias_linear: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct HyperIds {
    merges: Vec<ParamId>,
    pgl: Vec<PglIds>,
    pgl5_weight: (ParamId, ParamId),
    pgl5_bias: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
enum TargetSource {
    Generated(HyperIds),
    Learned(Vec<(ParamId, ParamId)>),
}

/// Per-sample target-network parameters: `weights[i]` is `[d_i, d_{i+1}]`,
/// `biases[i]` is `[d_{i+1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedParams<T> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
}

/// Tape handles for the intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Prediction after `output_scale`, shape `[1, 1]`.
    pub score: Var,
    /// X0..X3, each `[1, H_i, W_i, C_i]`.
    pub features: [Var; 4],
    /// The distortion vector V, `[L]`.
    pub distortion: Var,
    /// Target-network weights and biases (generated or learned).
    pub target_weights: [Var; 5],
    pub target_biases: [Var; 5],
    pub blocks_run: usize,
}

/// An FTHNet instance: config, parameters and precomputed window geometry.
#[derive(Clone, Debug)]
pub struct Fthnet<T: Real> {
    config: FthnetConfig,
    params: ParamStore<T>,
    geometry: Vec<StageGeometry<T>>,
    patch_embed: (ParamId, ParamId),
    stages: Vec<StageIds>,
    dpn: Vec<DpbIds>,
    target: TargetSource,
}

impl<T: Real> Fthnet<T> {
    /// Build with freshly initialized parameters.
    pub fn new(config: FthnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let mut add = |name: String, shape: &[usize], init: Init| store.add(name, init.tensor(shape, &mut rng));
        let conv = |add: &mut dyn FnMut(String, &[usize], Init) -> ParamId,
                    name: &str,
                    k: usize,
                    cin: usize,
                    cout: usize,
                    bias: bool| {
            let fan_in = k * k * cin;
            let w = add(format!("{name}.weight"), &[k, k, cin, cout], Init::FanIn(fan_in));
            let b = bias.then(|| add(format!("{name}.bias"), &[cout], Init::FanIn(fan_in)));
            (w, b)
        };
        let linear = |add: &mut dyn FnMut(String, &[usize], Init) -> ParamId,
                      name: &str,
                      din: usize,
                      dout: usize,
                      init: Init| {
            let w = add(format!("{name}.weight"), &[din, dout], init);
            let b_init = match init {
                Init::TruncNormal(_) => Init::Zeros,
                other => other,
            };
            let b = add(format!("{name}.bias"), &[dout], b_init);
            (w, b)
        };

        let c = &config;
        let (w, b) = conv(&mut add, "patch_embed", c.patch_size, 3, c.embed_channels, true);
        let patch_embed = (w, b.expect("bias"));

        let mut stages = Vec::new();
        for i in 0..4 {
            let ch = c.stage_channels(i);
            let hidden = c.mlp_hidden(ch);
            let tn = Init::TruncNormal(BACKBONE_INIT_STD);
            let mut blocks = Vec::new();
            for j in 0..c.depths[i] {
                let name = format!("stage{i}.block{j}");
                let mut norm = |part: &str| {
                    (
                        add(format!("{name}.{part}.gamma"), &[ch], Init::Ones),
                        add(format!("{name}.{part}.beta"), &[ch], Init::Zeros),
                    )
                };
                let norm1 = norm("norm1");
                let q = linear(&mut add, &format!("{name}.attn.q"), ch, ch, tn);
                let k = linear(&mut add, &format!("{name}.attn.k"), ch, ch, tn);
                let v = linear(&mut add, &format!("{name}.attn.v"), ch, ch, tn);
                let o = linear(&mut add, &format!("{name}.attn.o"), ch, ch, tn);
                let norm2 = (
                    add(format!("{name}.norm2.gamma"), &[ch], Init::Ones),
                    add(format!("{name}.norm2.beta"), &[ch], Init::Zeros),
                );
                let fc1 = linear(&mut add, &format!("{name}.mlp.fc1"), ch, hidden, tn);
                let fc2 = linear(&mut add, &format!("{name}.mlp.fc2"), hidden, ch, tn);
                blocks.push(BlockIds {
                    norm1,
                    q,
                    k,
                    v,
                    o,
                    norm2,
                    fc1,
                    fc2,
                    shift: c.block_shift(i, j),
                });
            }
            let downsample = (i < 3).then(|| {
                let (w, b) = conv(&mut add, &format!("stage{i}.downsample"), 4, ch, 2 * ch, true);
                (w, b.expect("bias"))
            });
            stages.push(StageIds { blocks, downsample });
        }

        let mut dpn = Vec::new();
        for i in 0..4 {
            let ch = c.stage_channels(i);
            let (w, b) = conv(&mut add, &format!("dpn.stage{i}.conv"), 1, ch, ch / 8, true);
            let flat = c.dpb_flat_len(i);
            let lin = linear(&mut add, &format!("dpn.stage{i}.linear"), flat, c.dpb_out_len, Init::FanIn(flat));
            dpn.push(DpbIds {
                conv: (w, b.expect("bias")),
                linear: lin,
            });
        }

        let d = c.target_dims();
        let target = match c.hypernet_mode {
            HypernetMode::Off => TargetSource::Learned(
                (1..=5)
                    .map(|k| linear(&mut add, &format!("target.layer{k}"), d[k - 1], d[k], Init::FanIn(d[k - 1])))
                    .collect(),
            ),
            mode => {
                let top = c.merge_channels(0);
                let merges = (1..=5)
                    .map(|k| {
                        let cin = match mode {
                            HypernetMode::Stepwise => c.merge_channels(k - 1),
                            _ => top,
                        };
                        conv(&mut add, &format!("hyper.merge{k}"), 1, cin, c.merge_channels(k), false).0
                    })
                    .collect();
                let pool_len = |k: usize| c.merge_channels(k);
                let pgl = (1..=4)
                    .map(|k| {
                        let name = format!("hyper.pgl{k}");
                        let (w, b) = conv(
                            &mut add,
                            &format!("{name}.weight_conv"),
                            3,
                            c.merge_channels(k),
                            c.pgl_channels(k),
                            true,
                        );
                        let bias_linear = linear(
                            &mut add,
                            &format!("{name}.bias_linear"),
                            pool_len(k),
                            d[k],
                            Init::FanIn(pool_len(k)),
                        );
                        PglIds {
                            weight_conv: (w, b.expect("bias")),
                            bias_linear,
                        }
                    })
                    .collect();
                let p5 = pool_len(5);
                let pgl5_weight = linear(&mut add, "hyper.pgl5.weight_linear", p5, d[4], Init::FanIn(p5));
                let pgl5_bias = linear(&mut add, "hyper.pgl5.bias_linear", p5, 1, Init::FanIn(p5));
                TargetSource::Generated(HyperIds {
                    merges,
                    pgl,
                    pgl5_weight,
                    pgl5_bias,
                })
            }
        };

        let geometry = (0..4)
            .map(|i| StageGeometry::new(&config, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            params: store,
            geometry,
            patch_embed,
            stages,
            dpn,
            target,
        })
    }

    pub fn config(&self) -> &FthnetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Learnable scalar count.
    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Learnable scalars in the hypernetwork's channel-merging convs.
    pub fn count_merge_params(&self) -> usize {
        self.params.count_prefix("hyper.merge")
    }

    /// Same architecture and weights at another precision.
    pub fn cast<U: Real>(&self) -> Result<Fthnet<U>> {
        let mut out = Fthnet::<U>::new(self.config.clone(), 0)?;
        out.params.load_from(|name| self.params.find(name).map(|id| self.params.get(id).cast()))?;
        Ok(out)
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        if image.shape() != [1, s, s, 3] {
            return Err(Error::dim(
                "fthnet",
                format!("image {:?}, model expects [1, {s}, {s}, 3]", image.shape()),
            ));
        }
        Ok(())
    }

    /// Record a full forward pass of one `[1, S, S, 3]` image.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, image: Var) -> Result<ForwardVars> {
        self.check_image(g.value(image))?;
        let params = &self.params;
        let p = |g: &mut Graph<'a, T>, id: ParamId| g.param(id, params.get(id));
        let c = &self.config;

        // backbone
        let (w, b) = (p(g, self.patch_embed.0), p(g, self.patch_embed.1));
        let mut x = g.conv2d(image, w, Some(b), c.patch_size, 0)?;
        let mut features = Vec::with_capacity(4);
        let mut blocks_run = 0;
        for (i, stage) in self.stages.iter().enumerate() {
            for ids in &stage.blocks {
                x = btb_forward(g, params, &self.geometry[i], ids, c.dropout, x)?;
                blocks_run += 1;
            }
            features.push(x);
            if let Some((w, b)) = stage.downsample {
                let (w, b) = (p(g, w), p(g, b));
                x = g.conv2d(x, w, Some(b), 2, 1)?;
            }
        }

        // distortion perception network
        let mut parts = Vec::with_capacity(4);
        for (i, ids) in self.dpn.iter().enumerate() {
            let (w, b) = (p(g, ids.conv.0), p(g, ids.conv.1));
            let h = g.conv2d(features[i], w, Some(b), 1, 0)?;
            let h = g.softpool2d(h, c.dpb_pool)?;
            let h = g.reshape(h, &[1, c.dpb_flat_len(i)])?;
            let (w, b) = (p(g, ids.linear.0), p(g, ids.linear.1));
            parts.push(g.linear(h, w, Some(b))?);
        }
        let distortion = g.concat(&parts)?;

        // target network parameters
        let d = c.target_dims();
        let mut weights = Vec::with_capacity(5);
        let mut biases = Vec::with_capacity(5);
        match &self.target {
            TargetSource::Learned(layers) => {
                for &(w, b) in layers {
                    weights.push(p(g, w));
                    biases.push(p(g, b));
                }
            }
            TargetSource::Generated(h) => {
                let x3 = features[3];
                let m = c.map_size();
                let mut prev = x3;
                let mut merged = Vec::with_capacity(5);
                for &w in &h.merges {
                    let input = match c.hypernet_mode {
                        HypernetMode::Stepwise => prev,
                        _ => x3,
                    };
                    let w = p(g, w);
                    prev = g.conv2d(input, w, None, 1, 0)?;
                    merged.push(prev);
                }
                let pooled = |g: &mut Graph<'a, T>, v: Var| -> Result<Var> {
                    let ch = g.shape(v)[3];
                    let s = g.softpool2d(v, m)?;
                    g.reshape(s, &[1, ch])
                };
                for (k, ids) in h.pgl.iter().enumerate() {
                    let (w, b) = (p(g, ids.weight_conv.0), p(g, ids.weight_conv.1));
                    let wk = g.conv2d(merged[k], w, Some(b), 1, 1)?;
                    weights.push(g.reshape(wk, &[d[k], d[k + 1]])?);
                    let s = pooled(g, merged[k])?;
                    let (w, b) = (p(g, ids.bias_linear.0), p(g, ids.bias_linear.1));
                    let bk = g.linear(s, w, Some(b))?;
                    biases.push(g.reshape(bk, &[d[k + 1]])?);
                }
                let s = pooled(g, merged[4])?;
                let (w, b) = (p(g, h.pgl5_weight.0), p(g, h.pgl5_weight.1));
                let w5 = g.linear(s, w, Some(b))?;
                weights.push(g.reshape(w5, &[d[4], 1])?);
                let (w, b) = (p(g, h.pgl5_bias.0), p(g, h.pgl5_bias.1));
                let b5 = g.linear(s, w, Some(b))?;
                biases.push(g.reshape(b5, &[1])?);
            }
        }
        let target_weights: [Var; 5] = weights.try_into().expect("five layers");
        let target_biases: [Var; 5] = biases.try_into().expect("five layers");

        let raw = target_forward(g, distortion, &target_weights, &target_biases)?;
        let score = g.scale(raw, T::from_f64_lossy(c.output_scale))?;
        Ok(ForwardVars {
            score,
            features: features.try_into().expect("four stages"),
            distortion,
            target_weights,
            target_biases,
            blocks_run,
        })
    }

    /// Score one image (inference mode).
    pub fn predict(&self, image: &Tensor<T>) -> Result<f64> {
        let mut g = Graph::new(GraphMode::inference());
        let x = g.constant_ref(image);
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out.score).data()[0].as_f64())
    }

    /// Score every image; results are in input order and identical for both
    /// executors.
    pub fn predict_batch(&self, images: &[Tensor<T>], exec: Executor) -> Result<Vec<f64>> {
        exec.try_map(images, |_, img| self.predict(img))
    }

    /// Backbone features X0..X3 of one image.
    pub fn backbone_features(&self, image: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
        let mut g = Graph::new(GraphMode::inference());
        let x = g.constant_ref(image);
        let out = self.forward(&mut g, x)?;
        Ok(out.features.map(|v| g.value(v).clone()))
    }

    /// The target-network parameters this image yields.
    pub fn generate(&self, image: &Tensor<T>) -> Result<GeneratedParams<T>> {
        let mut g = Graph::new(GraphMode::inference());
        let x = g.constant_ref(image);
        let out = self.forward(&mut g, x)?;
        Ok(GeneratedParams {
            weights: out.target_weights.iter().map(|&v| g.value(v).clone()).collect(),
            biases: out.target_biases.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    /// Window index attending each spatial position of `stage` in `block`.
    pub fn window_membership(&self, stage: usize, block: usize) -> Vec<usize> {
        let geo = &self.geometry[stage];
        geo.window_membership(self.stages[stage].blocks[block].shift)
    }
}

/// Five linear layers on `v` with ReLU between them. Returns `[1, 1]`.
pub fn target_forward<T: Real>(g: &mut Graph<'_, T>, v: Var, weights: &[Var; 5], biases: &[Var; 5]) -> Result<Var> {
    let n = g.value(v).numel();
    let mut h = g.reshape(v, &[1, n])?;
    for k in 0..5 {
        h = g.linear(h, weights[k], Some(biases[k]))?;
        if k < 4 {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        Tensor::from_fn(&[1, size, size, 3], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn tiny_forward_is_finite_and_deterministic() {
        let net = Fthnet::<f32>::new(FthnetConfig::tiny(), 3).unwrap();
        let img = image(48, 1);
        let a = net.predict(&img).unwrap();
        let b = net.predict(&img).unwrap();
        assert!(a.is_finite());
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn generated_shapes_follow_the_halving_chain() {
        for mode in [HypernetMode::Stepwise, HypernetMode::Direct, HypernetMode::Off] {
            let cfg = FthnetConfig {
                hypernet_mode: mode,
                ..FthnetConfig::tiny()
            };
            let net = Fthnet::<f32>::new(cfg, 0).unwrap();
            let p = net.generate(&image(48, 2)).unwrap();
            let shapes: Vec<_> = p.weights.iter().map(|w| w.shape().to_vec()).collect();
            assert_eq!(shapes, vec![vec![96, 48], vec![48, 24], vec![24, 12], vec![12, 6], vec![6, 1]]);
            let lens: Vec<_> = p.biases.iter().map(Tensor::numel).collect();
            assert_eq!(lens, vec![48, 24, 12, 6, 1]);
        }
    }

    #[test]
    fn distinct_images_give_distinct_parameters() {
        let net = Fthnet::<f32>::new(FthnetConfig::tiny(), 0).unwrap();
        let a = net.generate(&image(48, 1)).unwrap();
        let b = net.generate(&image(48, 2)).unwrap();
        assert_ne!(a.weights[0], b.weights[0]);
        assert_eq!(a, net.generate(&image(48, 1)).unwrap());
    }

    #[test]
    fn counts_every_block() {
        let cfg = FthnetConfig {
            depths: [2, 1, 3, 2],
            ..FthnetConfig::tiny()
        };
        let net = Fthnet::<f32>::new(cfg, 0).unwrap();
        let mut g = Graph::new(GraphMode::inference());
        let img = image(48, 0);
        let x = g.constant_ref(&img);
        assert_eq!(net.forward(&mut g, x).unwrap().blocks_run, 8);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let net = Fthnet::<f32>::new(FthnetConfig::tiny(), 0).unwrap();
        assert!(net.predict(&image(40, 0)).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let net = Fthnet::<f32>::new(FthnetConfig::tiny(), 5).unwrap();
        let imgs: Vec<_> = (0..3).map(|s| image(48, s)).collect();
        for exec in [Executor::Sequential, Executor::Parallel] {
            let batch = net.predict_batch(&imgs, exec).unwrap();
            for (img, got) in imgs.iter().zip(batch) {
                assert_eq!(got.to_bits(), net.predict(img).unwrap().to_bits());
            }
        }
    }
}
