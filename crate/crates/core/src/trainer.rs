//! Task-by-task training: task-1 bootstrap, the two per-task stages
//! (ensembled-encoder training, then compression into a single encoder),
//! and the two reference baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{augment_batch, Dataset, Sample, TaskData, TaskStream};
use crate::error::{Error, Result};
use crate::losses::{
    divergence_labels, on_tape, per_class_weights, stage1_loss, stage2_loss, ClassCounts, LossConfig,
    PerClassWeights, Stage1Parts, Stage2Parts,
};
use crate::memory::{class_counts, MemoryBuffer, MergedLoader};
use crate::model::{Classifier, EncoderInit, Encoder, EnsembledEncoder, EnsembledModel, Model, ModelConfig};
use crate::nn::{Linear, Module};
use crate::optim::{cosine_lr, Optimizer, OptimizerKind};
use crate::tensor::Tensor;

/// Toggles for the individual components of the method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub aux_loss: bool,
    pub embeddings_kd: bool,
    pub balanced_classification: bool,
    pub feature_kd: bool,
    pub balanced_kd: bool,
    pub distill_encoder_only: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            aux_loss: true,
            embeddings_kd: true,
            balanced_classification: true,
            feature_kd: true,
            balanced_kd: true,
            distill_encoder_only: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub bootstrap_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Balanced fine-tuning epochs of the DyTox-style baseline.
    pub finetune_epochs: usize,
    pub learning_rate: f64,
    pub finetune_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub loss: LossConfig,
    pub ablation: AblationFlags,
    /// Initialization of the supplementary encoder in stage 1.
    pub sup_init: EncoderInit,
    /// Initialization of the compressed encoder in stage 2.
    pub new_encoder_init: EncoderInit,
    pub augment_flip: bool,
    pub augment_crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            bootstrap_epochs: 20,
            stage1_epochs: 60,
            stage2_epochs: 30,
            finetune_epochs: 10,
            learning_rate: 3e-3,
            finetune_lr: 5e-4,
            weight_decay: 1e-4,
            batch_size: 32,
            optimizer: OptimizerKind::AdamW,
            seed: 0,
            loss: LossConfig::default(),
            ablation: AblationFlags::default(),
            sup_init: EncoderInit::CopyOld,
            new_encoder_init: EncoderInit::CopyOld,
            augment_flip: false,
            augment_crop: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let epochs = [
            ("bootstrap_epochs", self.bootstrap_epochs),
            ("stage1_epochs", self.stage1_epochs),
            ("stage2_epochs", self.stage2_epochs),
            ("finetune_epochs", self.finetune_epochs),
        ];
        if let Some((name, _)) = epochs.iter().find(|(_, e)| *e == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        for (name, lr) in [("learning_rate", self.learning_rate), ("finetune_lr", self.finetune_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Sedeg,
    /// Single growing model with logits KD, divergence head and a balanced
    /// fine-tuning stage on the memory.
    DytoxBaseline,
    /// No memory and no distillation.
    FinetuneBaseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sedeg => "sedeg",
            Self::DytoxBaseline => "dytox",
            Self::FinetuneBaseline => "finetune",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sedeg" => Ok(Self::Sedeg),
            "dytox" | "dytox_baseline" => Ok(Self::DytoxBaseline),
            "finetune" | "finetune_baseline" => Ok(Self::FinetuneBaseline),
            other => Err(Error::InvalidArgument(format!(
                "unknown method '{other}' (sedeg|dytox|finetune)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Bootstrap,
    Stage1,
    Stage2,
    /// Base training of the DyTox-style baseline.
    Base,
    /// Balanced fine-tuning of the DyTox-style baseline.
    Finetune,
    /// Plain training of the fine-tuning baseline.
    Train,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Bootstrap => "bootstrap",
            Self::Stage1 => "stage1",
            Self::Stage2 => "stage2",
            Self::Base => "base",
            Self::Finetune => "finetune",
            Self::Train => "train",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Column order of the per-step loss trace.
pub const TERM_NAMES: [&str; 8] = ["bce", "bc", "kd", "div", "aux", "ted", "bld", "fd"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Bce = 0,
    Bc,
    Kd,
    Div,
    Aux,
    Ted,
    Bld,
    Fd,
}

/// Loss terms of one step: raw values and the weights applied to them.
/// Terms that are switched off keep a raw value and weight of zero.
#[derive(Clone, Debug, Default)]
pub struct Terms {
    pub raw: [f64; 8],
    pub weight: [f64; 8],
    pub total: f64,
    vars: Vec<(f64, Var)>,
}

impl Terms {
    fn add(&mut self, tape: &Tape, term: Term, weight: f64, v: Var) {
        self.raw[term as usize] = tape.value(v).item();
        self.weight[term as usize] = weight;
        self.vars.push((weight, v));
    }

    fn finish(&mut self, tape: &mut Tape) -> Result<Var> {
        let total = tape.weighted_sum(&self.vars)?;
        self.total = tape.value(total).item();
        if !self.total.is_finite() {
            return Err(Error::Training(format!("non-finite loss {}", self.total)));
        }
        Ok(total)
    }

    pub fn get(&self, term: Term) -> f64 {
        self.raw[term as usize]
    }

    pub fn contribution(&self, term: Term) -> f64 {
        self.raw[term as usize] * self.weight[term as usize]
    }

    pub fn contributions(&self) -> [f64; 8] {
        std::array::from_fn(|i| self.raw[i] * self.weight[i])
    }
}

/// One optimizer step in the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub task_index: usize,
    pub stage: StageKind,
    pub epoch: usize,
    pub lr: f64,
    pub raw: [f64; 8],
    pub contribution: [f64; 8],
    pub total: f64,
}

/// Names of frozen and trainable parameters of a module.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    pub frozen: BTreeSet<String>,
    pub trainable: BTreeSet<String>,
}

impl FreezeMask {
    pub fn of(module: &dyn Module, prefix: &str) -> Self {
        let mut mask = Self::default();
        module.visit(prefix, &mut |name, p| {
            let set = if p.frozen { &mut mask.frozen } else { &mut mask.trainable };
            set.insert(name.to_string());
        });
        mask
    }
}

pub fn tensor_hash(t: &Tensor) -> [u8; 32] {
    let mut h = Sha256::new();
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for &x in t.data() {
        h.update((x as f32).to_le_bytes());
    }
    h.finalize().into()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FreezeViolation {
    pub task_index: usize,
    pub stage: StageKind,
    pub epoch: usize,
    pub name: String,
}

/// Hashes of every frozen parameter taken at the start of a stage.
#[derive(Clone, Debug, Default)]
pub struct FreezeAudit {
    hashes: BTreeMap<String, [u8; 32]>,
}

impl FreezeAudit {
    pub fn capture(modules: &[(&str, &dyn Module)]) -> Self {
        let mut hashes = BTreeMap::new();
        for (prefix, m) in modules {
            m.visit(prefix, &mut |name, p| {
                if p.frozen {
                    hashes.insert(name.to_string(), tensor_hash(&p.value));
                }
            });
        }
        Self { hashes }
    }

    pub fn len(&self) -> usize {
        self.hashes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hashes.is_empty()
    }

    /// Names whose value changed or that disappeared since capture.
    pub fn changed(&self, modules: &[(&str, &dyn Module)]) -> Vec<String> {
        let mut now = BTreeMap::new();
        for (prefix, m) in modules {
            m.visit(prefix, &mut |name, p| {
                if self.hashes.contains_key(name) {
                    now.insert(name.to_string(), tensor_hash(&p.value));
                }
            });
        }
        self.hashes
            .iter()
            .filter(|(n, h)| now.get(*n) != Some(*h))
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Summary of one completed stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub task_index: usize,
    pub stage: StageKind,
    pub epochs: usize,
    pub steps: usize,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Encoder parameters of the stage's product (both branches for an
    /// ensembled model).
    pub encoder_params: usize,
    pub trainable_tensors: usize,
    pub audited_tensors: usize,
    pub violations: Vec<FreezeViolation>,
}

/// The product of a stage, as seen by evaluation and checkpointing.
#[derive(Clone, Copy, Debug)]
pub enum StageModel<'a> {
    Single(&'a Model),
    Ensembled(&'a EnsembledModel),
}

impl StageModel<'_> {
    pub fn checkpoint(&self, memory: Option<&MemoryBuffer>) -> Checkpoint {
        match self {
            Self::Single(m) => Checkpoint::from_model(m, memory),
            Self::Ensembled(m) => Checkpoint::from_ensembled(m, memory),
        }
    }
}

impl Classifier for StageModel<'_> {
    fn num_classes(&self) -> usize {
        match self {
            Self::Single(m) => m.num_classes(),
            Self::Ensembled(m) => m.num_classes(),
        }
    }

    fn full_logits(&self, images: &Tensor) -> Result<Tensor> {
        match self {
            Self::Single(m) => m.full_logits(images),
            Self::Ensembled(m) => m.full_logits(images),
        }
    }
}

/// Passed to the per-stage callback of [`Trainer::run_task`].
pub struct StageOutcome<'a> {
    pub report: &'a StageReport,
    pub model: StageModel<'a>,
    pub memory: &'a MemoryBuffer,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for a (task, stage, purpose) triple.
pub fn derive_seed(base: u64, task_index: usize, stage: StageKind, purpose: u64) -> u64 {
    [task_index as u64, stage as u64, purpose]
        .into_iter()
        .fold(splitmix(base), |acc, v| splitmix(acc ^ v))
}

const INIT: u64 = 0;
const SHUFFLE: u64 = 1;
const AUGMENT: u64 = 2;

/// Shared state threaded through the stage functions.
pub struct StageEnv<'a> {
    pub config: &'a TrainConfig,
    pub train: &'a Dataset,
    pub step: usize,
    pub trace: Vec<StepLog>,
}

impl<'a> StageEnv<'a> {
    pub fn new(config: &'a TrainConfig, train: &'a Dataset) -> Self {
        Self {
            config,
            train,
            step: 0,
            trace: Vec::new(),
        }
    }

    fn rng(&self, task_index: usize, stage: StageKind, purpose: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, task_index, stage, purpose))
    }

    fn loader(&self, samples: Vec<Sample>, task_index: usize, stage: StageKind) -> Result<MergedLoader> {
        let seed = derive_seed(self.config.seed, task_index, stage, SHUFFLE);
        MergedLoader::from_samples(samples, self.config.batch_size, seed)
    }

    /// Run `epochs` epochs of `runner` over `loader` with a cosine schedule
    /// and a freeze audit after every epoch.
    fn run(
        &mut self,
        runner: &mut dyn StageStep,
        loader: &MergedLoader,
        task_index: usize,
        stage: StageKind,
        epochs: usize,
        lr: f64,
    ) -> Result<StageReport> {
        let audit = FreezeAudit::capture(&runner.modules());
        let trainable_tensors = runner
            .modules()
            .iter()
            .map(|(p, m)| FreezeMask::of(*m, p).trainable.len())
            .sum();
        let total_steps = epochs * loader.batches_per_epoch();
        let mut aug = self.rng(task_index, stage, AUGMENT);
        let augment = self.config.augment_flip || self.config.augment_crop > 0;
        let mut epoch_losses = Vec::with_capacity(epochs);
        let mut violations = Vec::new();
        let mut k = 0;
        for epoch in 0..epochs {
            let mut sum = 0.0;
            let batches = loader.epoch(epoch);
            for batch in &batches {
                let indices: Vec<usize> = batch.iter().map(|s| s.index).collect();
                let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
                let mut images = self.train.batch(&indices);
                if augment {
                    augment_batch(&mut images, self.config.augment_flip, self.config.augment_crop, &mut aug);
                }
                let step_lr = cosine_lr(lr, k, total_steps);
                let terms = runner.step(&images, &labels, step_lr)?;
                sum += terms.total;
                self.trace.push(StepLog {
                    step: self.step,
                    task_index,
                    stage,
                    epoch,
                    lr: step_lr,
                    raw: terms.raw,
                    contribution: terms.contributions(),
                    total: terms.total,
                });
                self.step += 1;
                k += 1;
            }
            let mean = sum / batches.len() as f64;
            debug!("task {task_index} {stage} epoch {epoch}: loss {mean:.5}");
            epoch_losses.push(mean);
            violations.extend(audit.changed(&runner.modules()).into_iter().map(|name| FreezeViolation {
                task_index,
                stage,
                epoch,
                name,
            }));
        }
        info!(
            "task {task_index} {stage}: {epochs} epochs, loss {:.4} -> {:.4}",
            epoch_losses[0],
            epoch_losses[epochs - 1]
        );
        Ok(StageReport {
            task_index,
            stage,
            epochs,
            steps: k,
            epoch_losses,
            encoder_params: 0,
            trainable_tensors,
            audited_tensors: audit.len(),
            violations,
        })
    }
}

/// One optimization step over a batch plus the modules it owns.
trait StageStep {
    fn step(&mut self, images: &Tensor, labels: &[usize], lr: f64) -> Result<Terms>;
    fn modules(&self) -> Vec<(&str, &dyn Module)>;
}

fn div_head(config: &ModelConfig, task: &TaskData, rng: &mut ChaCha8Rng) -> Linear {
    Linear::new(config.embed_dim, task.classes.len() + 1, rng)
}

fn old_class_count(task: &TaskData) -> usize {
    task.first_class()
}

/// Column counts for the balanced losses; classes without samples count as
/// one so their weights stay finite.
fn weight_counts(counts: &ClassCounts, num_classes: usize) -> Vec<usize> {
    counts.columns(num_classes).into_iter().map(|s| s.max(1)).collect()
}

// ---------------------------------------------------------------- bootstrap

/// Plain sigmoid-BCE training of a whole single-encoder model.
struct BceRunner {
    model: Model,
    opt: Optimizer,
}

impl BceRunner {
    fn forward_backward(&self, images: &Tensor, labels: &[usize]) -> Result<(Terms, Gradients)> {
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, images)?;
        let mut terms = Terms::default();
        let l = on_tape::bce(&mut tape, out.decoded.logits, labels)?;
        terms.add(&tape, Term::Bce, 1.0, l);
        let total = terms.finish(&mut tape)?;
        Ok((terms, tape.backward(total)?))
    }
}

impl StageStep for BceRunner {
    fn step(&mut self, images: &Tensor, labels: &[usize], lr: f64) -> Result<Terms> {
        let (terms, grads) = self.forward_backward(images, labels)?;
        self.opt.step(&mut self.model, "", &grads, lr);
        Ok(terms)
    }

    fn modules(&self) -> Vec<(&str, &dyn Module)> {
        vec![("", &self.model)]
    }
}

/// Train a fresh model on the first task with sigmoid BCE.
pub fn bootstrap_task1(env: &mut StageEnv<'_>, task: &TaskData) -> Result<(Model, StageReport)> {
    if task.task_index != 1 {
        return Err(Error::Training(format!(
            "bootstrap runs on task 1, got task {}",
            task.task_index
        )));
    }
    let cfg = env.config;
    let mut rng = env.rng(1, StageKind::Bootstrap, INIT);
    let mut model = Model::new(cfg.model, &mut rng)?;
    model.decoder.add_task(task.classes.len(), &mut rng)?;
    let mut runner = BceRunner {
        model,
        opt: Optimizer::new(cfg.optimizer, cfg.weight_decay),
    };
    let loader = env.loader(task.train.clone(), 1, StageKind::Bootstrap)?;
    let mut report = env.run(&mut runner, &loader, 1, StageKind::Bootstrap, cfg.bootstrap_epochs, cfg.learning_rate)?;
    report.encoder_params = runner.model.encoder.param_count();
    Ok((runner.model, report))
}

// ------------------------------------------------------------------ stage 1

struct Stage1Runner<'a> {
    old: &'a Model,
    ens: EnsembledModel,
    div_head: Linear,
    opt: Optimizer,
    cfg: LossConfig,
    flags: AblationFlags,
    counts: ClassCounts,
    alpha: f64,
    task_index: usize,
    first_new: usize,
    num_new: usize,
}

impl Stage1Runner<'_> {
    fn forward_backward(&self, images: &Tensor, labels: &[usize]) -> Result<(Terms, Gradients)> {
        let t = self.task_index;
        let mut teacher = Tape::no_grad();
        let old_out = self.old.forward(&mut teacher, images)?;
        let mut tape = Tape::new();
        let z_old = tape.constant(teacher.value(old_out.features).clone());
        let o_old = tape.constant(teacher.value(old_out.decoded.logits).clone());
        let e_old: Vec<Var> = old_out
            .decoded
            .embeddings
            .iter()
            .map(|&e| tape.constant(teacher.value(e).clone()))
            .collect();
        drop(teacher);

        let out = self.ens.forward_with_old(&mut tape, images, z_old)?;
        let logits = out.decoded.logits;
        let mut terms = Terms::default();
        let w_cls = 1.0 - self.alpha;
        if self.flags.balanced_classification {
            let l = on_tape::bc(&mut tape, logits, labels, &self.counts, self.cfg.tau)?;
            terms.add(&tape, Term::Bc, w_cls, l);
        } else {
            let l = on_tape::bce(&mut tape, logits, labels)?;
            terms.add(&tape, Term::Bce, w_cls, l);
        }
        let old_logits = tape.slice_last(logits, 0, self.first_new)?;
        let kd = on_tape::kd(&mut tape, o_old, old_logits)?;
        terms.add(&tape, Term::Kd, self.alpha, kd);

        let local = divergence_labels(labels, self.first_new, self.num_new)?;
        let div_logits = self
            .div_head
            .forward(&mut tape, "div_head", out.decoded.embeddings[t - 1])?;
        let div = on_tape::div(&mut tape, div_logits, &local)?;
        terms.add(&tape, Term::Div, self.cfg.lambda, div);

        if self.flags.aux_loss {
            let o_sup = self.ens.aux_logits(&mut tape, out.features.sup)?;
            let aux = on_tape::aux(&mut tape, o_sup, labels)?;
            terms.add(&tape, Term::Aux, self.cfg.mu, aux);
        }
        if self.flags.embeddings_kd {
            let ted = on_tape::ted(&mut tape, &e_old, &out.decoded.embeddings[..t - 1], t)?;
            terms.add(&tape, Term::Ted, self.cfg.xi, ted);
        }
        let total = terms.finish(&mut tape)?;

        let parts = Stage1Parts {
            bc: terms.get(Term::Bc) + terms.get(Term::Bce),
            kd: terms.get(Term::Kd),
            div: terms.get(Term::Div),
            aux: terms.get(Term::Aux),
            ted: terms.get(Term::Ted),
        };
        let effective = LossConfig {
            mu: if self.flags.aux_loss { self.cfg.mu } else { 0.0 },
            xi: if self.flags.embeddings_kd { self.cfg.xi } else { 0.0 },
            ..self.cfg
        };
        check_composition(terms.total, stage1_loss(&parts, &effective, self.alpha))?;
        Ok((terms, tape.backward(total)?))
    }
}

fn check_composition(total: f64, recomposed: f64) -> Result<()> {
    if (total - recomposed).abs() > 1e-6 {
        return Err(Error::Training(format!(
            "loss {total} differs from its recomposition {recomposed}"
        )));
    }
    Ok(())
}

impl StageStep for Stage1Runner<'_> {
    fn step(&mut self, images: &Tensor, labels: &[usize], lr: f64) -> Result<Terms> {
        let (terms, grads) = self.forward_backward(images, labels)?;
        self.opt.step(&mut self.ens, "", &grads, lr);
        self.opt.step(&mut self.div_head, "div_head", &grads, lr);
        Ok(terms)
    }

    fn modules(&self) -> Vec<(&str, &dyn Module)> {
        vec![("", &self.ens), ("div_head", &self.div_head)]
    }
}

/// Build the stage-1 model from the previous task's model: a frozen copy of
/// its encoder plus a trainable supplementary encoder, and its decoder
/// extended with a token and head for `task` while old tokens and heads stay
/// frozen.
pub fn ensembled_from(old: &Model, task: &TaskData, init: EncoderInit, rng: &mut ChaCha8Rng) -> Result<EnsembledModel> {
    let seen = old.num_classes() + task.classes.len();
    let encoder = EnsembledEncoder::new(&old.encoder, seen, init, rng)?;
    let mut decoder = old.decoder.clone();
    decoder.set_frozen(false);
    decoder.add_task(task.classes.len(), rng)?;
    decoder.freeze_tasks_upto(task.task_index - 1);
    Ok(EnsembledModel { encoder, decoder })
}

fn stage1_runner<'a>(
    env: &StageEnv<'_>,
    old: &'a Model,
    task: &TaskData,
    counts: ClassCounts,
) -> Result<Stage1Runner<'a>> {
    let cfg = env.config;
    let t = task.task_index;
    let mut rng = env.rng(t, StageKind::Stage1, INIT);
    let ens = ensembled_from(old, task, cfg.sup_init, &mut rng)?;
    let first_new = old_class_count(task);
    Ok(Stage1Runner {
        old,
        div_head: div_head(&cfg.model, task, &mut rng),
        ens,
        opt: Optimizer::new(cfg.optimizer, cfg.weight_decay),
        cfg: cfg.loss,
        flags: cfg.ablation,
        counts,
        alpha: cfg.loss.alpha_for(first_new, first_new + task.classes.len()),
        task_index: t,
        first_new,
        num_new: task.classes.len(),
    })
}

fn check_old_model(old: &Model, task: &TaskData) -> Result<()> {
    if task.task_index < 2 {
        return Err(Error::Training("stage 1 starts at task 2; use the bootstrap for task 1".into()));
    }
    if old.num_tasks() != task.task_index - 1 || old.num_classes() != old_class_count(task) {
        return Err(Error::Training(format!(
            "old model covers {} tasks / {} classes, task {} expects {} / {}",
            old.num_tasks(),
            old.num_classes(),
            task.task_index,
            task.task_index - 1,
            old_class_count(task)
        )));
    }
    Ok(())
}

/// Train the ensembled encoder and the decoder jointly on the current task
/// plus the memory.
pub fn stage1(
    env: &mut StageEnv<'_>,
    old: &Model,
    task: &TaskData,
    memory: &MemoryBuffer,
) -> Result<(EnsembledModel, StageReport)> {
    check_old_model(old, task)?;
    let counts = class_counts(memory, &task.train);
    let mut runner = stage1_runner(env, old, task, counts)?;
    let loader = env.loader(merged(memory, task), task.task_index, StageKind::Stage1)?;
    let cfg = env.config;
    let mut report = env.run(
        &mut runner,
        &loader,
        task.task_index,
        StageKind::Stage1,
        cfg.stage1_epochs,
        cfg.learning_rate,
    )?;
    report.encoder_params = runner.ens.encoder.encoder_param_count();
    Ok((runner.ens, report))
}

fn merged(memory: &MemoryBuffer, task: &TaskData) -> Vec<Sample> {
    let mut samples = task.train.clone();
    samples.extend(memory.samples());
    samples
}

// ------------------------------------------------------------------ stage 2

struct Stage2Runner<'a> {
    teacher: &'a EnsembledModel,
    student: Model,
    div_head: Linear,
    opt: Optimizer,
    cfg: LossConfig,
    flags: AblationFlags,
    weights: PerClassWeights,
    task_index: usize,
    first_new: usize,
    num_new: usize,
}

impl Stage2Runner<'_> {
    fn forward_backward(&self, images: &Tensor, labels: &[usize]) -> Result<(Terms, Gradients)> {
        let mut teacher = Tape::no_grad();
        let t_out = self.teacher.forward(&mut teacher, images)?;
        let mut tape = Tape::new();
        let z_ens = tape.constant(teacher.value(t_out.features.fused).clone());
        let o_ens = tape.constant(teacher.value(t_out.decoded.logits).clone());
        drop(teacher);

        let out = self.student.forward(&mut tape, images)?;
        let mut terms = Terms::default();
        let bld = on_tape::bld(
            &mut tape,
            out.decoded.logits,
            o_ens,
            &self.weights,
            self.cfg.tau,
            self.cfg.bld_conventional,
        )?;
        terms.add(&tape, Term::Bld, 1.0, bld);

        let local = divergence_labels(labels, self.first_new, self.num_new)?;
        let e_t = out.decoded.embeddings[self.task_index - 1];
        let div_logits = self.div_head.forward(&mut tape, "div_head", e_t)?;
        let div = on_tape::div(&mut tape, div_logits, &local)?;
        terms.add(&tape, Term::Div, self.cfg.lambda, div);

        if self.flags.feature_kd {
            let fd = on_tape::fd(&mut tape, out.features, z_ens)?;
            terms.add(&tape, Term::Fd, self.cfg.beta, fd);
        }
        let total = terms.finish(&mut tape)?;
        let parts = Stage2Parts {
            bld: terms.get(Term::Bld),
            div: terms.get(Term::Div),
            fd: terms.get(Term::Fd),
        };
        let effective = LossConfig {
            beta: if self.flags.feature_kd { self.cfg.beta } else { 0.0 },
            ..self.cfg
        };
        check_composition(terms.total, stage2_loss(&parts, &effective))?;
        Ok((terms, tape.backward(total)?))
    }
}

impl StageStep for Stage2Runner<'_> {
    fn step(&mut self, images: &Tensor, labels: &[usize], lr: f64) -> Result<Terms> {
        let (terms, grads) = self.forward_backward(images, labels)?;
        self.opt.step(&mut self.student, "", &grads, lr);
        self.opt.step(&mut self.div_head, "div_head", &grads, lr);
        Ok(terms)
    }

    fn modules(&self) -> Vec<(&str, &dyn Module)> {
        vec![("", &self.student), ("div_head", &self.div_head)]
    }
}

/// Single-encoder student for stage 2: a fresh encoder of the old
/// configuration and a copy of the stage-1 decoder, frozen unless the whole
/// model is distilled.
pub fn student_from(
    old: &Model,
    ens: &EnsembledModel,
    init: EncoderInit,
    distill_encoder_only: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Model> {
    let mut encoder = match init {
        EncoderInit::CopyOld => old.encoder.clone(),
        EncoderInit::Random => Encoder::new(old.config, rng)?,
    };
    encoder.set_frozen(false);
    let mut decoder = ens.decoder.clone();
    decoder.set_frozen(distill_encoder_only);
    Ok(Model {
        config: old.config,
        encoder,
        decoder,
    })
}

/// Distill the ensembled model into a single encoder with the old
/// parameter budget.
pub fn stage2(
    env: &mut StageEnv<'_>,
    ens: &EnsembledModel,
    old: &Model,
    task: &TaskData,
    memory: &MemoryBuffer,
) -> Result<(Model, StageReport)> {
    check_old_model(old, task)?;
    let cfg = env.config;
    let t = task.task_index;
    let mut rng = env.rng(t, StageKind::Stage2, INIT);
    let student = student_from(old, ens, cfg.new_encoder_init, cfg.ablation.distill_encoder_only, &mut rng)?;
    let num_classes = student.num_classes();
    let weights = if cfg.ablation.balanced_kd {
        let counts = class_counts(memory, &task.train);
        per_class_weights(&weight_counts(&counts, num_classes), cfg.loss.gamma)?
    } else {
        PerClassWeights::uniform(num_classes)
    };
    let mut runner = Stage2Runner {
        teacher: ens,
        div_head: div_head(&cfg.model, task, &mut rng),
        student,
        opt: Optimizer::new(cfg.optimizer, cfg.weight_decay),
        cfg: cfg.loss,
        flags: cfg.ablation,
        weights,
        task_index: t,
        first_new: old_class_count(task),
        num_new: task.classes.len(),
    };
    let loader = env.loader(merged(memory, task), t, StageKind::Stage2)?;
    let mut report = env.run(&mut runner, &loader, t, StageKind::Stage2, cfg.stage2_epochs, cfg.learning_rate)?;
    let mut model = runner.student;
    model.set_frozen(false);
    let (new_count, old_count) = (model.encoder.param_count(), old.encoder.param_count());
    if new_count != old_count {
        return Err(Error::Training(format!(
            "compressed encoder has {new_count} parameters, previous encoder {old_count}"
        )));
    }
    report.encoder_params = new_count;
    Ok((model, report))
}

// ---------------------------------------------------------------- baselines

/// Base stage of the DyTox-style baseline: the previous model grows a token
/// and head and trains with BCE, logits KD and the divergence head.
struct DytoxRunner<'a> {
    old: &'a Model,
    model: Model,
    div_head: Linear,
    opt: Optimizer,
    cfg: LossConfig,
    alpha: f64,
    task_index: usize,
    first_new: usize,
    num_new: usize,
}

impl StageStep for DytoxRunner<'_> {
    fn step(&mut self, images: &Tensor, labels: &[usize], lr: f64) -> Result<Terms> {
        let mut teacher = Tape::no_grad();
        let old_out = self.old.forward(&mut teacher, images)?;
        let mut tape = Tape::new();
        let o_old = tape.constant(teacher.value(old_out.decoded.logits).clone());
        drop(teacher);
        let out = self.model.forward(&mut tape, images)?;
        let mut terms = Terms::default();
        let bce = on_tape::bce(&mut tape, out.decoded.logits, labels)?;
        terms.add(&tape, Term::Bce, 1.0 - self.alpha, bce);
        let old_logits = tape.slice_last(out.decoded.logits, 0, self.first_new)?;
        let kd = on_tape::kd(&mut tape, o_old, old_logits)?;
        terms.add(&tape, Term::Kd, self.alpha, kd);
        let local = divergence_labels(labels, self.first_new, self.num_new)?;
        let e_t = out.decoded.embeddings[self.task_index - 1];
        let div_logits = self.div_head.forward(&mut tape, "div_head", e_t)?;
        let div = on_tape::div(&mut tape, div_logits, &local)?;
        terms.add(&tape, Term::Div, self.cfg.lambda, div);
        let total = terms.finish(&mut tape)?;
        let grads = tape.backward(total)?;
        self.opt.step(&mut self.model, "", &grads, lr);
        self.opt.step(&mut self.div_head, "div_head", &grads, lr);
        Ok(terms)
    }

    fn modules(&self) -> Vec<(&str, &dyn Module)> {
        vec![("", &self.model), ("div_head", &self.div_head)]
    }
}

fn grown(old: &Model, task: &TaskData, rng: &mut ChaCha8Rng) -> Result<Model> {
    let mut model = old.clone();
    model.set_frozen(false);
    model.decoder.add_task(task.classes.len(), rng)?;
    Ok(model)
}

pub fn dytox_base(
    env: &mut StageEnv<'_>,
    old: &Model,
    task: &TaskData,
    memory: &MemoryBuffer,
) -> Result<(Model, StageReport)> {
    check_old_model(old, task)?;
    let cfg = env.config;
    let t = task.task_index;
    let mut rng = env.rng(t, StageKind::Base, INIT);
    let mut model = grown(old, task, &mut rng)?;
    model.decoder.freeze_tasks_upto(t - 1);
    let first_new = old_class_count(task);
    let mut runner = DytoxRunner {
        old,
        div_head: div_head(&cfg.model, task, &mut rng),
        model,
        opt: Optimizer::new(cfg.optimizer, cfg.weight_decay),
        cfg: cfg.loss,
        alpha: cfg.loss.alpha_for(first_new, first_new + task.classes.len()),
        task_index: t,
        first_new,
        num_new: task.classes.len(),
    };
    let loader = env.loader(merged(memory, task), t, StageKind::Base)?;
    let mut report = env.run(&mut runner, &loader, t, StageKind::Base, cfg.stage1_epochs, cfg.learning_rate)?;
    let mut model = runner.model;
    model.set_frozen(false);
    report.encoder_params = model.encoder.param_count();
    Ok((model, report))
}

/// Balanced fine-tuning of the whole model on the (already updated) memory.
pub fn dytox_finetune(
    env: &mut StageEnv<'_>,
    model: Model,
    task_index: usize,
    memory: &MemoryBuffer,
) -> Result<(Model, StageReport)> {
    let cfg = env.config;
    let mut runner = BceRunner {
        model,
        opt: Optimizer::new(cfg.optimizer, cfg.weight_decay),
    };
    let loader = env.loader(memory.samples(), task_index, StageKind::Finetune)?;
    let mut report = env.run(
        &mut runner,
        &loader,
        task_index,
        StageKind::Finetune,
        cfg.finetune_epochs,
        cfg.finetune_lr,
    )?;
    report.encoder_params = runner.model.encoder.param_count();
    Ok((runner.model, report))
}

/// Naive fine-tuning on the current task only.
pub fn finetune_task(env: &mut StageEnv<'_>, old: &Model, task: &TaskData) -> Result<(Model, StageReport)> {
    let cfg = env.config;
    let t = task.task_index;
    let mut rng = env.rng(t, StageKind::Train, INIT);
    let mut runner = BceRunner {
        model: grown(old, task, &mut rng)?,
        opt: Optimizer::new(cfg.optimizer, cfg.weight_decay),
    };
    let loader = env.loader(task.train.clone(), t, StageKind::Train)?;
    let mut report = env.run(&mut runner, &loader, t, StageKind::Train, cfg.stage1_epochs, cfg.learning_rate)?;
    report.encoder_params = runner.model.encoder.param_count();
    Ok((runner.model, report))
}

// ------------------------------------------------------------------- driver

/// Sequential state of one run: the current model, the memory and the loss
/// trace.
pub struct Trainer {
    pub config: TrainConfig,
    pub method: Method,
    pub memory: MemoryBuffer,
    model: Option<Model>,
    completed: usize,
    step: usize,
    pub trace: Vec<StepLog>,
}

impl Trainer {
    pub fn new(config: TrainConfig, method: Method, memory_capacity: usize) -> Result<Self> {
        config.validate()?;
        let memory_seed = derive_seed(config.seed, 0, StageKind::Bootstrap, 99);
        Ok(Self {
            config,
            method,
            memory: MemoryBuffer::new(memory_capacity, memory_seed),
            model: None,
            completed: 0,
            step: 0,
            trace: Vec::new(),
        })
    }

    pub fn model(&self) -> Option<&Model> {
        self.model.as_ref()
    }

    pub fn completed_tasks(&self) -> usize {
        self.completed
    }

    fn update_memory(&mut self, stream: &TaskStream, task: &TaskData) {
        if self.method != Method::FinetuneBaseline {
            self.memory
                .update(task.task_index, &task.train, &stream.seen_classes(task.task_index));
        }
    }

    /// Train task `t` (1-based); tasks must arrive in order. `on_stage` is
    /// called after every stage with the stage's product.
    pub fn run_task(
        &mut self,
        stream: &TaskStream,
        t: usize,
        on_stage: &mut dyn FnMut(&StageOutcome<'_>) -> Result<()>,
    ) -> Result<Vec<StageReport>> {
        if t != self.completed + 1 {
            return Err(Error::Training(format!(
                "tasks must run in order: expected task {}, got {t}",
                self.completed + 1
            )));
        }
        let task = stream.task(t)?;
        let mut env = StageEnv::new(&self.config, &stream.train);
        env.step = self.step;
        let mut reports = Vec::new();

        if t == 1 {
            let (model, report) = bootstrap_task1(&mut env, task)?;
            let (step, trace) = (env.step, std::mem::take(&mut env.trace));
            self.step = step;
            self.trace.extend(trace);
            self.update_memory(stream, task);
            on_stage(&StageOutcome {
                report: &report,
                model: StageModel::Single(&model),
                memory: &self.memory,
            })?;
            reports.push(report);
            self.model = Some(model);
            self.completed = 1;
            return Ok(reports);
        }

        let old = self
            .model
            .take()
            .ok_or_else(|| Error::Training("no model from the previous task".into()))?;
        let memory = self.memory.clone();
        let result = match self.method {
            Method::Sedeg => {
                let (ens, r1) = stage1(&mut env, &old, task, &memory)?;
                on_stage(&StageOutcome {
                    report: &r1,
                    model: StageModel::Ensembled(&ens),
                    memory: &memory,
                })?;
                let (new, r2) = stage2(&mut env, &ens, &old, task, &memory)?;
                reports.extend([r1, r2]);
                new
            }
            Method::DytoxBaseline => {
                let (base, r1) = dytox_base(&mut env, &old, task, &memory)?;
                on_stage(&StageOutcome {
                    report: &r1,
                    model: StageModel::Single(&base),
                    memory: &memory,
                })?;
                let mut updated = memory.clone();
                updated.update(t, &task.train, &stream.seen_classes(t));
                let (tuned, r2) = dytox_finetune(&mut env, base, t, &updated)?;
                reports.extend([r1, r2]);
                tuned
            }
            Method::FinetuneBaseline => {
                let (model, r) = finetune_task(&mut env, &old, task)?;
                reports.push(r);
                model
            }
        };
        self.step = env.step;
        self.trace.extend(env.trace);
        self.update_memory(stream, task);
        let last = reports.last().expect("at least one stage");
        on_stage(&StageOutcome {
            report: last,
            model: StageModel::Single(&result),
            memory: &self.memory,
        })?;
        self.model = Some(result);
        self.completed = t;
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                input_size: 8,
                embed_dim: 16,
                num_heads: 2,
                num_sab: 1,
                ..ModelConfig::tiny()
            },
            bootstrap_epochs: 2,
            stage1_epochs: 2,
            stage2_epochs: 2,
            finetune_epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    fn stream(tasks: usize) -> TaskStream {
        let data = SyntheticSpec {
            num_classes: 2 * tasks,
            train_per_class: 12,
            eval_per_class: 4,
            image_size: 8,
            channels: 3,
            ..SyntheticSpec::default()
        }
        .generate()
        .unwrap();
        TaskStream::build(data, tasks, 2, 0).unwrap()
    }

    fn bootstrapped(cfg: &TrainConfig, s: &TaskStream) -> (Model, MemoryBuffer) {
        let mut env = StageEnv::new(cfg, &s.train);
        let (model, _) = bootstrap_task1(&mut env, s.task(1).unwrap()).unwrap();
        let mut mem = MemoryBuffer::new(8, 0);
        mem.update(1, &s.task(1).unwrap().train, &s.seen_classes(1));
        (model, mem)
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            stage2_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Sedeg, Method::DytoxBaseline, Method::FinetuneBaseline] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("other".parse::<Method>().is_err());
    }

    #[test]
    fn bootstrap_builds_one_task() {
        let cfg = tiny_config();
        let s = stream(2);
        let (model, mem) = bootstrapped(&cfg, &s);
        assert_eq!(model.num_tasks(), 1);
        assert_eq!(model.decoder.heads.len(), 1);
        assert!(mem.len() <= 8);
        assert!(mem.iter().all(|e| e.task_of_origin == 1));
        let mut env = StageEnv::new(&cfg, &s.train);
        assert!(bootstrap_task1(&mut env, s.task(2).unwrap()).is_err());
    }

    #[test]
    fn stage1_rejects_first_task() {
        let cfg = tiny_config();
        let s = stream(2);
        let (model, mem) = bootstrapped(&cfg, &s);
        let mut env = StageEnv::new(&cfg, &s.train);
        assert!(matches!(
            stage1(&mut env, &model, s.task(1).unwrap(), &mem),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn stage1_trainable_set_is_exact() {
        let cfg = tiny_config();
        let s = stream(3);
        let (m1, mut mem) = bootstrapped(&cfg, &s);
        let mut env = StageEnv::new(&cfg, &s.train);
        let (ens, _) = stage1(&mut env, &m1, s.task(2).unwrap(), &mem).unwrap();
        let (m2, _) = stage2(&mut env, &ens, &m1, s.task(2).unwrap(), &mem).unwrap();
        mem.update(2, &s.task(2).unwrap().train, &s.seen_classes(2));

        let task = s.task(3).unwrap();
        let counts = class_counts(&mem, &task.train);
        let runner = stage1_runner(&env, &m2, task, counts).unwrap();
        let batch: Vec<Sample> = merged(&mem, task).into_iter().take(12).collect();
        let idx: Vec<usize> = batch.iter().map(|b| b.index).collect();
        let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
        let (_, grads) = runner.forward_backward(&s.train.batch(&idx), &labels).unwrap();
        let with_grad: BTreeSet<String> = grads
            .params()
            .iter()
            .filter(|(_, g)| g.data().iter().any(|&x| x != 0.0))
            .map(|(n, _)| n.clone())
            .collect();
        let prefixes = ["encoder.sup.", "encoder.aux_head.", "decoder.tab.", "decoder.head.3.", "div_head."];
        for name in &with_grad {
            assert!(
                prefixes.iter().any(|p| name.starts_with(p)) || name == "decoder.task_token.3",
                "unexpected gradient on {name}"
            );
        }
        assert!(with_grad.contains("decoder.task_token.3"));
        assert!(with_grad.iter().any(|n| n.starts_with("encoder.sup.")));
        assert!(with_grad.iter().any(|n| n.starts_with("encoder.aux_head.")));
        assert!(with_grad.iter().any(|n| n.starts_with("decoder.tab.")));

        let mask = FreezeMask::of(&runner.ens, "");
        assert!(mask.frozen.iter().all(|n| n.starts_with("encoder.old.")
            || n.starts_with("decoder.task_token.1")
            || n.starts_with("decoder.task_token.2")
            || n.starts_with("decoder.head.1.")
            || n.starts_with("decoder.head.2.")));
        assert!(mask.frozen.contains("decoder.task_token.1"));
        assert!(mask.frozen.contains("decoder.head.2.weight"));
        // the teacher is bound on a no-grad tape and never receives gradients
        assert!(m2.named_params("").iter().all(|(_, p)| !p.frozen));
    }

    #[test]
    fn stage2_keeps_budget_and_decoder() {
        let cfg = tiny_config();
        let s = stream(2);
        let (m1, mem) = bootstrapped(&cfg, &s);
        let task = s.task(2).unwrap();
        let mut env = StageEnv::new(&cfg, &s.train);
        let (ens, r1) = stage1(&mut env, &m1, task, &mem).unwrap();
        assert!(r1.violations.is_empty());
        assert_eq!(r1.encoder_params, 2 * m1.encoder.param_count());
        let (m2, r2) = stage2(&mut env, &ens, &m1, task, &mem).unwrap();
        assert!(r2.violations.is_empty());
        assert_eq!(m2.encoder.param_count(), m1.encoder.param_count());
        assert_eq!(r2.encoder_params, m1.encoder.param_count());
        let strip = |d: &crate::model::Decoder| d.named_params("").into_iter().map(|(n, p)| (n, p.value)).collect::<Vec<_>>();
        assert_eq!(strip(&m2.decoder), strip(&ens.decoder));
        // old tokens and heads unchanged by stage 1
        assert_eq!(ens.decoder.task_tokens[0].embedding.value, m1.decoder.task_tokens[0].embedding.value);
        assert_eq!(ens.decoder.heads[0].linear.weight.value, m1.decoder.heads[0].linear.weight.value);

        let full = TrainConfig {
            ablation: AblationFlags {
                distill_encoder_only: false,
                ..AblationFlags::default()
            },
            ..cfg.clone()
        };
        let mut env = StageEnv::new(&full, &s.train);
        let (m2_full, _) = stage2(&mut env, &ens, &m1, task, &mem).unwrap();
        assert_ne!(strip(&m2_full.decoder), strip(&ens.decoder));
    }

    #[test]
    fn flags_zero_their_contributions() {
        let s = stream(2);
        let base = tiny_config();
        let off = TrainConfig {
            ablation: AblationFlags {
                aux_loss: false,
                embeddings_kd: false,
                balanced_classification: false,
                feature_kd: false,
                balanced_kd: true,
                distill_encoder_only: true,
            },
            ..base.clone()
        };
        for (cfg, on) in [(&base, true), (&off, false)] {
            let (m1, mem) = bootstrapped(cfg, &s);
            let task = s.task(2).unwrap();
            let mut env = StageEnv::new(cfg, &s.train);
            let (ens, _) = stage1(&mut env, &m1, task, &mem).unwrap();
            stage2(&mut env, &ens, &m1, task, &mem).unwrap();
            let s1: Vec<&StepLog> = env.trace.iter().filter(|l| l.stage == StageKind::Stage1).collect();
            let s2: Vec<&StepLog> = env.trace.iter().filter(|l| l.stage == StageKind::Stage2).collect();
            for l in &s1 {
                assert_eq!(l.contribution[Term::Aux as usize] != 0.0, on);
                assert_eq!(l.contribution[Term::Ted as usize] == 0.0, !on || l.raw[Term::Ted as usize] == 0.0);
                assert_eq!(l.raw[Term::Bc as usize] != 0.0, on);
                assert_eq!(l.raw[Term::Bce as usize] != 0.0, !on);
                let sum: f64 = l.contribution.iter().sum();
                assert!((sum - l.total).abs() < 1e-9);
            }
            for l in &s2 {
                assert_eq!(l.contribution[Term::Fd as usize] != 0.0, on);
                let sum: f64 = l.contribution.iter().sum();
                assert!((sum - l.total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn run_task_order_and_stage_count() {
        let cfg = tiny_config();
        let s = stream(3);
        let mut trainer = Trainer::new(cfg, Method::Sedeg, 8).unwrap();
        let mut stages = Vec::new();
        let mut record = |o: &StageOutcome<'_>| {
            stages.push((o.report.task_index, o.report.stage, o.model.num_classes()));
            Ok(())
        };
        assert!(trainer.run_task(&s, 2, &mut record).is_err());
        for t in 1..=3 {
            trainer.run_task(&s, t, &mut record).unwrap();
        }
        assert!(trainer.run_task(&s, 3, &mut record).is_err());
        assert_eq!(stages.len(), 5);
        assert_eq!(stages[0], (1, StageKind::Bootstrap, 2));
        assert_eq!(stages[1], (2, StageKind::Stage1, 4));
        assert_eq!(stages[2], (2, StageKind::Stage2, 4));
        assert_eq!(stages[4], (3, StageKind::Stage2, 6));
        assert!(trainer.memory.len() <= 8);
        let steps: Vec<usize> = trainer.trace.iter().map(|l| l.step).collect();
        assert!(steps.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn baselines_run() {
        let cfg = tiny_config();
        let s = stream(2);
        for method in [Method::DytoxBaseline, Method::FinetuneBaseline] {
            let mut trainer = Trainer::new(cfg.clone(), method, 8).unwrap();
            let mut kinds = Vec::new();
            for t in 1..=2 {
                trainer
                    .run_task(&s, t, &mut |o| {
                        kinds.push(o.report.stage);
                        Ok(())
                    })
                    .unwrap();
            }
            assert_eq!(trainer.model().unwrap().num_classes(), 4);
            match method {
                Method::DytoxBaseline => {
                    assert_eq!(kinds, [StageKind::Bootstrap, StageKind::Base, StageKind::Finetune]);
                    assert!(!trainer.memory.is_empty());
                }
                _ => {
                    assert_eq!(kinds, [StageKind::Bootstrap, StageKind::Train]);
                    assert!(trainer.memory.is_empty());
                }
            }
        }
    }

    #[test]
    fn seeds_are_independent() {
        let a = derive_seed(1, 2, StageKind::Stage1, INIT);
        assert_ne!(a, derive_seed(1, 2, StageKind::Stage1, SHUFFLE));
        assert_ne!(a, derive_seed(1, 3, StageKind::Stage1, INIT));
        assert_ne!(a, derive_seed(2, 2, StageKind::Stage1, INIT));
        assert_eq!(a, derive_seed(1, 2, StageKind::Stage1, INIT));
    }
}
