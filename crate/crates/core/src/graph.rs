//! A per-sample reverse-mode tape over the kernels in [`crate::kernels`].
//!
//! One `Graph` records one forward pass. Parameters enter as borrowed leaves
//! tagged with their [`ParamId`], so a forward pass never copies weights.
//! Samples in a batch get independent graphs; the trainer reduces their
//! parameter gradients in sample order, which keeps batched training
//! bit-reproducible regardless of how samples are scheduled.

use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{activation, conv, layout, linear, norm, pool};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Bmm {
        a: Var,
        trans_a: bool,
        b: Var,
        trans_b: bool,
    },
    /// `a + b` with `b` tiled over `a`.
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    Softmax {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    /// Element-wise product with a constant (dropout masks).
    Mask {
        x: Var,
        mask: Tensor<T>,
    },
    SoftPool {
        x: Var,
        kernel: usize,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// How a graph behaves while recording.
#[derive(Clone, Copy, Debug)]
pub struct GraphMode {
    /// Track what backward needs. Off for inference.
    pub record: bool,
    /// Dropout active.
    pub training: bool,
    pub dropout_seed: u64,
}

impl GraphMode {
    pub fn inference() -> Self {
        Self {
            record: false,
            training: false,
            dropout_seed: 0,
        }
    }

    pub fn training(dropout_seed: u64) -> Self {
        Self {
            record: true,
            training: true,
            dropout_seed,
        }
    }

    /// Gradients recorded but dropout off; used by gradient checks.
    pub fn eval_with_grad() -> Self {
        Self {
            record: true,
            training: false,
            dropout_seed: 0,
        }
    }
}

pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    mode: GraphMode,
    dropout_calls: u64,
    relu_margin: f64,
    flops: u64,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(mode: GraphMode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            dropout_calls: 0,
            relu_margin: f64::INFINITY,
            flops: 0,
        }
    }

    pub fn mode(&self) -> GraphMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Multiply-accumulates ×2 executed by conv, linear and bmm ops so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn count_product(&mut self, out: &Tensor<T>, contraction: usize) {
        self.flops += 2 * (out.numel() * contraction) as u64;
    }

    /// Smallest |x| seen by any ReLU so far; gradient checks use this to
    /// detect samples that landed on the kink.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.mode.record && inputs.iter().any(|&v| self.requires(v));
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.mode.record,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(value), false, None)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(value), false, None)
    }

    /// A leaf whose gradient is wanted (gradient-check inputs).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(value), true, None)
    }

    pub fn param(&mut self, id: ParamId, value: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(value), true, Some(id))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = conv::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let w = self.shape(weight);
        let contraction = w[0] * w[1] * w[2];
        self.count_product(&out, contraction);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &deps,
        )
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = linear::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let contraction = self.shape(weight)[0];
        self.count_product(&out, contraction);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        self.push("linear", out, Op::Linear { input, weight, bias }, &deps)
    }

    pub fn bmm(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Result<Var> {
        let out = linear::bmm(self.value(a), trans_a, self.value(b), trans_b)?;
        let contraction = linear::BmmDims::new(self.value(a), trans_a, self.value(b), trans_b)?.k;
        self.count_product(&out, contraction);
        self.push("bmm", out, Op::Bmm { a, trans_a, b, trans_b }, &[a, b])
    }

    /// `a + b`, where `b` is tiled over `a` (bias rows, per-window masks).
    /// `b` must share `a`'s last axis and divide its element count.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.numel() == 0 || va.numel() % vb.numel() != 0 || va.last_dim() != vb.last_dim() {
            return Err(Error::dim(
                "add",
                format!("cannot tile {:?} over {:?}", vb.shape(), va.shape()),
            ));
        }
        let mut out = va.clone();
        let n = vb.numel();
        for chunk in out.data_mut().chunks_exact_mut(n) {
            for (o, &x) in chunk.iter_mut().zip(vb.data()) {
                *o = *o + x;
            }
        }
        self.push("add", out, Op::Add { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, Op::Scale { x, factor }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let eps = T::from_f64_lossy(norm::LAYER_NORM_EPS);
        let out = norm::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta, eps }, &[x, gamma, beta])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = activation::softmax(self.value(x));
        self.push("softmax", out, Op::Softmax { x }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = activation::gelu(self.value(x));
        self.push("gelu", out, Op::Gelu { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x);
        let margin = value
            .data()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(v.as_f64().abs()));
        let out = activation::relu(value);
        self.relu_margin = self.relu_margin.min(margin);
        self.push("relu", out, Op::Relu { x }, &[x])
    }

    /// Seeded inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.mode.training || rate == 0.0 {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
            }
            return Ok(x);
        }
        self.dropout_calls += 1;
        let seed = self
            .mode
            .dropout_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.dropout_calls);
        let mask = activation::dropout_mask::<T>(self.shape(x), rate, seed)?;
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o = *o * m;
        }
        self.push("dropout", out, Op::Mask { x, mask }, &[x])
    }

    pub fn softpool2d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let out = pool::softpool2d(self.value(x), kernel, kernel)?;
        self.push("softpool2d", out, Op::SoftPool { x, kernel }, &[x])
    }

    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let out = layout::gather(self.value(x), &index, shape)?;
        self.push("gather", out, Op::Gather { x, index }, &[x])
    }

    /// Concatenate the flattened parts into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let data: Vec<T> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let out = Tensor::new(vec![data.len()], data)?;
        self.push("concat", out, Op::Concat { parts: parts.to_vec() }, parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape { x }, &[x])
    }

    /// Backpropagate `seed` (the gradient of some scalar w.r.t. `output`).
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.numel() != self.value(output).numel() {
            return Err(Error::dim(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        if !self.requires(output) {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(seed.reshape(self.shape(output))?);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let r = conv::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        *stride,
                        *padding,
                        self.requires(*input),
                    )?;
                    if let Some(di) = r.input {
                        acc(*input, di);
                    }
                    if self.requires(*weight) {
                        acc(*weight, r.weight);
                    }
                    if let Some(b) = bias.filter(|&b| self.requires(b)) {
                        acc(b, r.bias);
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let need = [
                        self.requires(*input),
                        self.requires(*weight),
                        bias.is_some_and(|b| self.requires(b)),
                    ];
                    let r = linear::linear_backward(self.value(*input), self.value(*weight), &g, need)?;
                    if let Some(t) = r.input {
                        acc(*input, t);
                    }
                    if let Some(t) = r.weight {
                        acc(*weight, t);
                    }
                    if let (Some(b), Some(t)) = (bias, r.bias) {
                        acc(*b, t);
                    }
                }
                Op::Bmm { a, trans_a, b, trans_b } => {
                    let need = [self.requires(*a), self.requires(*b)];
                    let (ga, gb) =
                        linear::bmm_backward(self.value(*a), *trans_a, self.value(*b), *trans_b, &g, need)?;
                    if let Some(t) = ga {
                        acc(*a, t);
                    }
                    if let Some(t) = gb {
                        acc(*b, t);
                    }
                }
                Op::Add { a, b } => {
                    if self.requires(*b) {
                        let shape = self.shape(*b).to_vec();
                        let n = shape.iter().product::<usize>();
                        let mut gb = Tensor::zeros(&shape);
                        for chunk in g.data().chunks_exact(n) {
                            for (o, &x) in gb.data_mut().iter_mut().zip(chunk) {
                                *o = *o + x;
                            }
                        }
                        acc(*b, gb);
                    }
                    if self.requires(*a) {
                        acc(*a, g);
                    }
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    acc(*x, g.map(|v| v * f));
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let r = norm::layer_norm_backward(
                        self.value(*x),
                        self.value(*gamma),
                        self.value(*beta),
                        *eps,
                        &g,
                    )?;
                    if self.requires(*x) {
                        acc(*x, r.input);
                    }
                    if self.requires(*gamma) {
                        acc(*gamma, r.gamma);
                    }
                    if self.requires(*beta) {
                        acc(*beta, r.beta);
                    }
                }
                Op::Softmax { x } => {
                    acc(*x, activation::softmax_backward(&node.value, &g));
                }
                Op::Gelu { x } => {
                    acc(*x, activation::gelu_backward(self.value(*x), &g));
                }
                Op::Relu { x } => {
                    acc(*x, activation::relu_backward(self.value(*x), &g));
                }
                Op::Mask { x, mask } => {
                    let mut t = g;
                    for (o, &m) in t.data_mut().iter_mut().zip(mask.data()) {
                        *o = *o * m;
                    }
                    acc(*x, t);
                }
                Op::SoftPool { x, kernel } => {
                    acc(*x, pool::softpool2d_backward(self.value(*x), *kernel, &g)?);
                }
                Op::Gather { x, index } => {
                    acc(*x, layout::gather_backward(self.shape(*x), index, &g));
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        if self.requires(p) {
                            let t = Tensor::new(
                                self.shape(p).to_vec(),
                                g.data()[offset..offset + n].to_vec(),
                            )?;
                            acc(p, t);
                        }
                        offset += n;
                    }
                }
                Op::Reshape { x } => {
                    let shape = self.shape(*x).to_vec();
                    acc(*x, g.reshape(&shape)?);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Pair each parameter leaf with its gradient.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().take(grads.grads.len()) {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].take()) {
                out.push((id, g));
            }
        }
        out
    }
}

/// Gradients indexed by tape position.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_input_accumulates_gradient() {
        let mut g = Graph::<f64>::new(GraphMode::eval_with_grad());
        let x = g.variable(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y, Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_do_not_record() {
        let mut g = Graph::<f64>::new(GraphMode::eval_with_grad());
        let c = g.constant(Tensor::full(&[2], 1.0));
        let y = g.scale(c, 3.0).unwrap();
        let grads = g.backward(y, Tensor::full(&[2], 1.0)).unwrap();
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn inference_mode_skips_tape() {
        let mut g = Graph::<f32>::new(GraphMode::inference());
        let x = g.variable(Tensor::full(&[2], 1.0));
        let y = g.gelu(x).unwrap();
        let grads = g.backward(y, Tensor::full(&[2], 1.0)).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn non_finite_output_is_a_kernel_error() {
        let mut g = Graph::<f64>::new(GraphMode::inference());
        let x = g.constant(Tensor::full(&[2], f64::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn broadcast_add_sums_bias_gradient() {
        let mut g = Graph::<f64>::new(GraphMode::eval_with_grad());
        let a = g.variable(Tensor::zeros(&[4, 2]));
        let b = g.variable(Tensor::zeros(&[2]));
        let y = g.add(a, b).unwrap();
        let grads = g.backward(y, Tensor::full(&[4, 2], 1.5)).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[6.0, 6.0]);
    }
}
