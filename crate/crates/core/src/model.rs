//! Miniature encoder-decoder vision transformer with per-task tokens and
//! heads, and the two-branch ensembled encoder used while learning a task.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{scope, Linear, Module, Param, SelfAttentionBlock, TaskAttentionBlock};
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_sab: usize,
    pub num_tab: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub input_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_sab: 2,
            num_tab: 1,
            num_heads: 4,
            embed_dim: 64,
            input_size: 32,
            patch_size: 4,
            channels: 3,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// Full-size architecture for 32x32 inputs (5 SABs, 12 heads, width 384).
    pub fn full_cifar() -> Self {
        Self {
            num_sab: 5,
            num_heads: 12,
            embed_dim: 384,
            ..Self::default()
        }
    }

    /// Full-size architecture for 64x64 inputs with 8x8 patches.
    pub fn full_tiny_imagenet() -> Self {
        Self {
            input_size: 64,
            patch_size: 8,
            ..Self::full_cifar()
        }
    }

    /// Small enough to train several tasks in seconds on one CPU core.
    pub fn tiny() -> Self {
        Self {
            num_sab: 2,
            num_heads: 4,
            embed_dim: 32,
            input_size: 16,
            patch_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_sab == 0 || self.num_heads == 0 || self.embed_dim == 0 {
            return fail("num_sab, num_heads and embed_dim must be positive".into());
        }
        if self.num_tab != 1 {
            return fail(format!("num_tab must be 1, got {}", self.num_tab));
        }
        if self.patch_size == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "input_size {} is not divisible by patch_size {}",
                self.input_size, self.patch_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return fail("channels and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.input_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.input_size, self.input_size, self.channels]
    }
}

/// Cut `[b, h, w, c]` images into `[b, patches, patch*patch*c]`, patches in
/// row-major order and each patch flattened as `(row, col, channel)`.
pub fn patchify(images: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let s = images.shape();
    let [h, w, c] = config.image_shape();
    if s.len() != 4 || s[1] != h || s[2] != w || s[3] != c {
        return Err(Error::Config(format!(
            "expected images [batch, {h}, {w}, {c}], got {s:?}"
        )));
    }
    let batch = s[0];
    let p = config.patch_size;
    let side = h / p;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..batch {
        let img = &src[b * h * w * c..(b + 1) * h * w * c];
        for py in 0..side {
            for px in 0..side {
                for r in 0..p {
                    let row = py * p + r;
                    let start = (row * w + px * p) * c;
                    out.extend_from_slice(&img[start..start + p * c]);
                }
            }
        }
    }
    Tensor::new(&[batch, side * side, config.patch_dim()], out)
}

/// Patch embedding, learned positions and a stack of self-attention blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub pos_embed: Param,
    pub blocks: Vec<SelfAttentionBlock>,
}

impl Encoder {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        Ok(Self {
            config,
            patch_embed: Linear::new(config.patch_dim(), d, rng),
            pos_embed: Param::trunc_normal(&[config.num_patches(), d], rng),
            blocks: (0..config.num_sab)
                .map(|_| SelfAttentionBlock::new(d, config.num_heads, config.mlp_ratio, rng))
                .collect(),
        })
    }

    /// Closed-form parameter count for a configuration.
    pub fn expected_param_count(config: &ModelConfig) -> usize {
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
        config.patch_dim() * d + d + config.num_patches() * d + config.num_sab * block
    }

    /// `[b, h, w, c]` images to `[b, patches, embed_dim]` features.
    pub fn encode(&self, tape: &mut Tape, prefix: &str, images: &Tensor) -> Result<Var> {
        let patches = patchify(images, &self.config)?;
        let x = tape.constant(patches);
        let x = self.patch_embed.forward(tape, &scope(prefix, "patch_embed"), x)?;
        let pos = self.pos_embed.bind(tape, &scope(prefix, "pos_embed"));
        let mut x = tape.add_trailing(x, pos)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, &scope(prefix, &format!("sab.{i}")), x)?;
        }
        Ok(x)
    }

    /// Deep copy with every parameter frozen.
    pub fn clone_frozen(&self) -> Self {
        let mut copy = self.clone();
        copy.set_frozen(true);
        copy
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.patch_embed.visit(&scope(prefix, "patch_embed"), f);
        f(&scope(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&scope(prefix, &format!("sab.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.patch_embed.visit_mut(&scope(prefix, "patch_embed"), f);
        f(&scope(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&scope(prefix, &format!("sab.{i}")), f);
        }
    }
}

/// Channel-wise addition of the two encoder branches.
pub fn fuse(tape: &mut Tape, z_old: Var, z_sup: Var) -> Result<Var> {
    tape.add(z_old, z_sup)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskToken {
    /// 1-based.
    pub task_index: usize,
    pub embedding: Param,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub task_index: usize,
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn num_classes(&self) -> usize {
        self.linear.out_dim()
    }
}

/// Output of decoding every task token at once.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `e_i`, each `[b, d]`, in task order.
    pub embeddings: Vec<Var>,
    /// Per-task logits, each `[b, classes_in_task]`.
    pub task_logits: Vec<Var>,
    /// Concatenated logits over every seen class.
    pub logits: Var,
}

/// Start sigmoid outputs at the base rate of one-hot targets over
/// `total_classes` classes. With zero biases the first BCE steps mostly push
/// every logit down together, which can stall training.
fn set_prior_bias(head: &mut Linear, total_classes: usize) {
    let bias = -((total_classes.max(2) - 1) as f64).ln();
    head.bias = Param::new(Tensor::full(head.bias.value.shape(), bias));
}

/// One task attention block shared by all tasks, plus a token and a head
/// per task.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub embed_dim: usize,
    pub tab: TaskAttentionBlock,
    pub task_tokens: Vec<TaskToken>,
    pub heads: Vec<ClassifierHead>,
}

impl Decoder {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            embed_dim: config.embed_dim,
            tab: TaskAttentionBlock::new(config.embed_dim, config.num_heads, config.mlp_ratio, rng),
            task_tokens: Vec::new(),
            heads: Vec::new(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.task_tokens.len()
    }

    pub fn classes_per_task(&self) -> Vec<usize> {
        self.heads.iter().map(ClassifierHead::num_classes).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes_per_task().iter().sum()
    }

    /// Append a token and a head for a task introducing `num_classes` classes.
    pub fn add_task(&mut self, num_classes: usize, rng: &mut impl Rng) -> Result<usize> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("a task needs at least one class".into()));
        }
        let task_index = self.task_tokens.len() + 1;
        self.task_tokens.push(TaskToken {
            task_index,
            embedding: Param::trunc_normal(&[self.embed_dim], rng),
        });
        let mut linear = Linear::new(self.embed_dim, num_classes, rng);
        set_prior_bias(&mut linear, self.num_classes() + num_classes);
        self.heads.push(ClassifierHead { task_index, linear });
        Ok(task_index)
    }

    fn check_features(&self, tape: &Tape, z: Var) -> Result<usize> {
        let s = tape.value(z).shape();
        if s.len() != 3 || s[2] != self.embed_dim {
            return Err(Error::Shape(format!(
                "decoder expects [batch, patches, {}], got {s:?}",
                self.embed_dim
            )));
        }
        Ok(s[0])
    }

    fn bind_token(&self, tape: &mut Tape, prefix: &str, i: usize) -> Result<Var> {
        let tok = &self.task_tokens[i];
        let v = tok
            .embedding
            .bind(tape, &scope(prefix, &format!("task_token.{}", tok.task_index)));
        tape.reshape(v, &[1, self.embed_dim])
    }

    fn head(&self, tape: &mut Tape, prefix: &str, i: usize, e: Var) -> Result<Var> {
        let h = &self.heads[i];
        h.linear
            .forward(tape, &scope(prefix, &format!("head.{}", h.task_index)), e)
    }

    /// Task embedding and logits for the 1-based `task_index`.
    pub fn decode_task(
        &self,
        tape: &mut Tape,
        prefix: &str,
        z: Var,
        task_index: usize,
    ) -> Result<(Var, Var)> {
        if task_index == 0 || task_index > self.num_tasks() {
            return Err(Error::InvalidArgument(format!(
                "task index {task_index} outside 1..={}",
                self.num_tasks()
            )));
        }
        let batch = self.check_features(tape, z)?;
        let i = task_index - 1;
        let tok = self.bind_token(tape, prefix, i)?;
        let tok = tape.expand_leading(tok, batch);
        let out = self.tab.forward(tape, &scope(prefix, "tab"), tok, z)?;
        let e = tape.reshape(out, &[batch, self.embed_dim])?;
        let logits = self.head(tape, prefix, i, e)?;
        Ok((e, logits))
    }

    /// Decode all task tokens in one pass through the task attention block.
    /// Each token attends to the patches independently, so this equals
    /// calling [`Decoder::decode_task`] per task.
    pub fn decode_all(&self, tape: &mut Tape, prefix: &str, z: Var) -> Result<DecoderOutput> {
        let t = self.num_tasks();
        if t == 0 {
            return Err(Error::InvalidArgument("decoder has no tasks".into()));
        }
        let batch = self.check_features(tape, z)?;
        let d = self.embed_dim;
        let toks = (0..t)
            .map(|i| self.bind_token(tape, prefix, i))
            .collect::<Result<Vec<_>>>()?;
        let toks = tape.concat_last(&toks)?;
        let toks = tape.reshape(toks, &[t, d])?;
        let toks = tape.expand_leading(toks, batch);
        let out = self.tab.forward(tape, &scope(prefix, "tab"), toks, z)?;
        let flat = tape.reshape(out, &[batch, t * d])?;
        let mut embeddings = Vec::with_capacity(t);
        let mut task_logits = Vec::with_capacity(t);
        for i in 0..t {
            let e = tape.slice_last(flat, i * d, (i + 1) * d)?;
            task_logits.push(self.head(tape, prefix, i, e)?);
            embeddings.push(e);
        }
        let logits = tape.concat_last(&task_logits)?;
        Ok(DecoderOutput {
            embeddings,
            task_logits,
            logits,
        })
    }

    /// Freeze tokens and heads of tasks `1..=upto`; everything else is left
    /// as is.
    pub fn freeze_tasks_upto(&mut self, upto: usize) {
        for tok in self.task_tokens.iter_mut().filter(|t| t.task_index <= upto) {
            tok.embedding.frozen = true;
        }
        for head in self.heads.iter_mut().filter(|h| h.task_index <= upto) {
            head.linear.set_frozen(true);
        }
    }
}

impl Module for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.tab.visit(&scope(prefix, "tab"), f);
        for tok in &self.task_tokens {
            f(&scope(prefix, &format!("task_token.{}", tok.task_index)), &tok.embedding);
        }
        for h in &self.heads {
            h.linear.visit(&scope(prefix, &format!("head.{}", h.task_index)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.tab.visit_mut(&scope(prefix, "tab"), f);
        for tok in &mut self.task_tokens {
            f(
                &scope(prefix, &format!("task_token.{}", tok.task_index)),
                &mut tok.embedding,
            );
        }
        for h in &mut self.heads {
            h.linear
                .visit_mut(&scope(prefix, &format!("head.{}", h.task_index)), f);
        }
    }
}

/// Forward results of a single-encoder model.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub features: Var,
    pub decoded: DecoderOutput,
}

/// Anything that maps images to logits over every seen class.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    /// Logits on a no-grad tape.
    fn full_logits(&self, images: &Tensor) -> Result<Tensor>;
}

/// Single-encoder model: the deployable network between tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::new(config, rng)?;
        let decoder = Decoder::new(&config, rng);
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.decoder.num_tasks()
    }

    pub fn forward(&self, tape: &mut Tape, images: &Tensor) -> Result<ModelOutput> {
        let features = self.encoder.encode(tape, "encoder", images)?;
        let decoded = self.decoder.decode_all(tape, "decoder", features)?;
        Ok(ModelOutput { features, decoded })
    }

    /// Decode precomputed features (e.g. a cached teacher encoding).
    pub fn decode(&self, tape: &mut Tape, features: Var) -> Result<DecoderOutput> {
        self.decoder.decode_all(tape, "decoder", features)
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(&scope(prefix, "encoder"), f);
        self.decoder.visit(&scope(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_mut(&scope(prefix, "encoder"), f);
        self.decoder.visit_mut(&scope(prefix, "decoder"), f);
    }
}

impl Classifier for Model {
    fn num_classes(&self) -> usize {
        self.decoder.num_classes()
    }

    fn full_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, images)?;
        Ok(tape.value(out.decoded.logits).clone())
    }
}

/// How a freshly created encoder is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInit {
    /// Copy of the previous task's encoder.
    #[default]
    CopyOld,
    Random,
}

/// Features produced by both branches of an [`EnsembledEncoder`].
#[derive(Clone, Copy, Debug)]
pub struct EnsembleFeatures {
    pub old: Var,
    pub sup: Var,
    pub fused: Var,
}

/// Frozen copy of the previous encoder plus a trainable supplementary
/// encoder, fused by addition, with an auxiliary head on the supplementary
/// branch.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembledEncoder {
    pub old: Encoder,
    pub sup: Encoder,
    pub aux_head: Linear,
}

impl EnsembledEncoder {
    pub fn new(
        old: &Encoder,
        num_classes: usize,
        init: EncoderInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let sup = match init {
            EncoderInit::CopyOld => {
                let mut e = old.clone();
                e.set_frozen(false);
                e
            }
            EncoderInit::Random => Encoder::new(old.config, rng)?,
        };
        let flat = old.config.num_patches() * old.config.embed_dim;
        let mut aux_head = Linear::new(flat, num_classes, rng);
        set_prior_bias(&mut aux_head, num_classes);
        Ok(Self {
            old: old.clone_frozen(),
            sup,
            aux_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.old.config
    }

    /// Encoder parameters of both branches (auxiliary head excluded).
    pub fn encoder_param_count(&self) -> usize {
        self.old.param_count() + self.sup.param_count()
    }

    pub fn encode(&self, tape: &mut Tape, prefix: &str, images: &Tensor) -> Result<EnsembleFeatures> {
        let old = self.old.encode(tape, &scope(prefix, "old"), images)?;
        self.encode_with_old(tape, prefix, images, old)
    }

    /// Like [`EnsembledEncoder::encode`] but reuses an already computed
    /// old-branch encoding.
    pub fn encode_with_old(
        &self,
        tape: &mut Tape,
        prefix: &str,
        images: &Tensor,
        old: Var,
    ) -> Result<EnsembleFeatures> {
        let sup = self.sup.encode(tape, &scope(prefix, "sup"), images)?;
        let fused = fuse(tape, old, sup)?;
        Ok(EnsembleFeatures { old, sup, fused })
    }

    /// Auxiliary logits from the flattened supplementary features.
    pub fn aux_logits(&self, tape: &mut Tape, prefix: &str, z_sup: Var) -> Result<Var> {
        let s = tape.value(z_sup).shape().to_vec();
        let flat: usize = s[1..].iter().product();
        if s.len() != 3 || flat != self.aux_head.in_dim() {
            return Err(Error::Shape(format!(
                "aux head expects {} flattened features, got {s:?}",
                self.aux_head.in_dim()
            )));
        }
        let x = tape.reshape(z_sup, &[s[0], flat])?;
        self.aux_head.forward(tape, &scope(prefix, "aux_head"), x)
    }
}

impl Module for EnsembledEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.old.visit(&scope(prefix, "old"), f);
        self.sup.visit(&scope(prefix, "sup"), f);
        self.aux_head.visit(&scope(prefix, "aux_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.old.visit_mut(&scope(prefix, "old"), f);
        self.sup.visit_mut(&scope(prefix, "sup"), f);
        self.aux_head.visit_mut(&scope(prefix, "aux_head"), f);
    }
}

/// Forward results of an [`EnsembledModel`].
#[derive(Clone, Debug)]
pub struct EnsembledOutput {
    pub features: EnsembleFeatures,
    pub decoded: DecoderOutput,
}

/// Ensembled encoder feeding the shared decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembledModel {
    pub encoder: EnsembledEncoder,
    pub decoder: Decoder,
}

impl EnsembledModel {
    pub fn forward(&self, tape: &mut Tape, images: &Tensor) -> Result<EnsembledOutput> {
        let features = self.encoder.encode(tape, "encoder", images)?;
        let decoded = self.decoder.decode_all(tape, "decoder", features.fused)?;
        Ok(EnsembledOutput { features, decoded })
    }

    pub fn forward_with_old(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        old: Var,
    ) -> Result<EnsembledOutput> {
        let features = self.encoder.encode_with_old(tape, "encoder", images, old)?;
        let decoded = self.decoder.decode_all(tape, "decoder", features.fused)?;
        Ok(EnsembledOutput { features, decoded })
    }

    pub fn aux_logits(&self, tape: &mut Tape, z_sup: Var) -> Result<Var> {
        self.encoder.aux_logits(tape, "encoder", z_sup)
    }
}

impl Module for EnsembledModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(&scope(prefix, "encoder"), f);
        self.decoder.visit(&scope(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_mut(&scope(prefix, "encoder"), f);
        self.decoder.visit_mut(&scope(prefix, "decoder"), f);
    }
}

impl Classifier for EnsembledModel {
    fn num_classes(&self) -> usize {
        self.decoder.num_classes()
    }

    fn full_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, images)?;
        Ok(tape.value(out.decoded.logits).clone())
    }
}
