//! Parameter containers and the transformer building blocks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// A learnable tensor plus its freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

impl Param {
    pub fn new(mut value: Tensor) -> Self {
        value.round_to_f32();
        Self {
            value,
            frozen: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::new(Tensor::full(shape, 1.0))
    }

    /// Normal(0, 0.02) truncated at two standard deviations.
    pub fn trunc_normal(shape: &[usize], rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break v;
                }
            })
            .collect();
        Self::new(Tensor::new(shape, data).expect("init shape"))
    }

    /// Bind onto a tape under `name`.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Var {
        tape.param(name, &self.value, !self.frozen)
    }
}

/// Join a parameter path component onto a prefix.
pub fn scope(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns named parameters.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.numel());
        n
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.visit_mut("", &mut |_, p| p.frozen = frozen);
    }

    /// `(name, param)` pairs in visiting order.
    fn named_params(&self, prefix: &str) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, p| out.push((n.to_string(), p.clone())));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::trunc_normal(&[inputs, outputs], rng),
            bias: Param::zeros(&[outputs]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape, &scope(prefix, "weight"));
        let b = self.bias.bind(tape, &scope(prefix, "bias"));
        let y = tape.matmul(x, w)?;
        tape.add_trailing(y, b)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&scope(prefix, "weight"), &self.weight);
        f(&scope(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&scope(prefix, "weight"), &mut self.weight);
        f(&scope(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Param::ones(&[dim]),
            bias: Param::zeros(&[dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let g = self.gain.bind(tape, &scope(prefix, "weight"));
        let b = self.bias.bind(tape, &scope(prefix, "bias"));
        let n = tape.normalize(x);
        let y = tape.mul_trailing(n, g)?;
        tape.add_trailing(y, b)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&scope(prefix, "weight"), &self.gain);
        f(&scope(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&scope(prefix, "weight"), &mut self.gain);
        f(&scope(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, &scope(prefix, "fc1"), x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, &scope(prefix, "fc2"), h)
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit(&scope(prefix, "fc1"), f);
        self.fc2.visit(&scope(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_mut(&scope(prefix, "fc1"), f);
        self.fc2.visit_mut(&scope(prefix, "fc2"), f);
    }
}

/// `[b, t, d] -> [b * heads, t, d / heads]`
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[b, t, heads, d / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, t, d / heads])
}

/// `[b * heads, t, dh] -> [b, t, heads * dh]`
fn merge_heads(tape: &mut Tape, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let (t, dh) = (s[1], s[2]);
    let x = tape.reshape(x, &[batch, heads, t, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch, t, heads * dh])
}

/// Scaled dot-product attention over already split heads.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, head_dim: usize) -> Result<Var> {
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let weights = tape.softmax(scores);
    tape.bmm(weights, v, false)
}

/// Multi-head self-attention with a fused query/key/value projection.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub heads: usize,
    pub qkv: Linear,
    pub proj: Linear,
}

impl SelfAttention {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            heads,
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let batch = tape.value(x).shape()[0];
        let d = self.proj.in_dim();
        let qkv = self.qkv.forward(tape, &scope(prefix, "qkv"), x)?;
        let q = tape.slice_last(qkv, 0, d)?;
        let k = tape.slice_last(qkv, d, 2 * d)?;
        let v = tape.slice_last(qkv, 2 * d, 3 * d)?;
        let q = split_heads(tape, q, self.heads)?;
        let k = split_heads(tape, k, self.heads)?;
        let v = split_heads(tape, v, self.heads)?;
        let out = attend(tape, q, k, v, d / self.heads)?;
        let out = merge_heads(tape, out, batch, self.heads)?;
        self.proj.forward(tape, &scope(prefix, "proj"), out)
    }
}

impl Module for SelfAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.qkv.visit(&scope(prefix, "qkv"), f);
        self.proj.visit(&scope(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.qkv.visit_mut(&scope(prefix, "qkv"), f);
        self.proj.visit_mut(&scope(prefix, "proj"), f);
    }
}

/// Multi-head attention where a short query sequence reads a context.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub heads: usize,
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
}

impl CrossAttention {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            heads,
            q: Linear::new(dim, dim, rng),
            kv: Linear::new(dim, 2 * dim, rng),
            proj: Linear::new(dim, dim, rng),
        }
    }

    /// `query: [b, tq, d]`, `context: [b, tk, d]` -> `[b, tq, d]`.
    pub fn forward(&self, tape: &mut Tape, prefix: &str, query: Var, context: Var) -> Result<Var> {
        let batch = tape.value(query).shape()[0];
        let d = self.proj.in_dim();
        let q = self.q.forward(tape, &scope(prefix, "q"), query)?;
        let kv = self.kv.forward(tape, &scope(prefix, "kv"), context)?;
        let k = tape.slice_last(kv, 0, d)?;
        let v = tape.slice_last(kv, d, 2 * d)?;
        let q = split_heads(tape, q, self.heads)?;
        let k = split_heads(tape, k, self.heads)?;
        let v = split_heads(tape, v, self.heads)?;
        let out = attend(tape, q, k, v, d / self.heads)?;
        let out = merge_heads(tape, out, batch, self.heads)?;
        self.proj.forward(tape, &scope(prefix, "proj"), out)
    }
}

impl Module for CrossAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.q.visit(&scope(prefix, "q"), f);
        self.kv.visit(&scope(prefix, "kv"), f);
        self.proj.visit(&scope(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.q.visit_mut(&scope(prefix, "q"), f);
        self.kv.visit_mut(&scope(prefix, "kv"), f);
        self.proj.visit_mut(&scope(prefix, "proj"), f);
    }
}

/// Pre-norm transformer block over patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttentionBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SelfAttentionBlock {
    pub fn new(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: SelfAttention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, dim * mlp_ratio, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, &scope(prefix, "norm1"), x)?;
        let h = self.attn.forward(tape, &scope(prefix, "attn"), h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, &scope(prefix, "norm2"), x)?;
        let h = self.mlp.forward(tape, &scope(prefix, "mlp"), h)?;
        tape.add(x, h)
    }
}

impl Module for SelfAttentionBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm1.visit(&scope(prefix, "norm1"), f);
        self.attn.visit(&scope(prefix, "attn"), f);
        self.norm2.visit(&scope(prefix, "norm2"), f);
        self.mlp.visit(&scope(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm1.visit_mut(&scope(prefix, "norm1"), f);
        self.attn.visit_mut(&scope(prefix, "attn"), f);
        self.norm2.visit_mut(&scope(prefix, "norm2"), f);
        self.mlp.visit_mut(&scope(prefix, "mlp"), f);
    }
}

/// Task attention block: one task token queries the patch tokens.
///
/// The same pre-norm is applied to the token and to the patches; the token
/// path keeps its residual connections so the output lives in token space.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskAttentionBlock {
    pub norm1: LayerNorm,
    pub attn: CrossAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TaskAttentionBlock {
    pub fn new(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: CrossAttention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, dim * mlp_ratio, rng),
        }
    }

    /// `token: [b, 1, d]`, `patches: [b, p, d]` -> `[b, 1, d]`.
    pub fn forward(&self, tape: &mut Tape, prefix: &str, token: Var, patches: Var) -> Result<Var> {
        let q = self.norm1.forward(tape, &scope(prefix, "norm1"), token)?;
        let kv = self.norm1.forward(tape, &scope(prefix, "norm1"), patches)?;
        let h = self.attn.forward(tape, &scope(prefix, "attn"), q, kv)?;
        let x = tape.add(token, h)?;
        let h = self.norm2.forward(tape, &scope(prefix, "norm2"), x)?;
        let h = self.mlp.forward(tape, &scope(prefix, "mlp"), h)?;
        tape.add(x, h)
    }
}

impl Module for TaskAttentionBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm1.visit(&scope(prefix, "norm1"), f);
        self.attn.visit(&scope(prefix, "attn"), f);
        self.norm2.visit(&scope(prefix, "norm2"), f);
        self.mlp.visit(&scope(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm1.visit_mut(&scope(prefix, "norm1"), f);
        self.attn.visit_mut(&scope(prefix, "attn"), f);
        self.norm2.visit_mut(&scope(prefix, "norm2"), f);
        self.mlp.visit_mut(&scope(prefix, "mlp"), f);
    }
}
