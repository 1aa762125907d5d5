//! Benchmark execution: dataset ingestion, task streams, evaluation,
//! metric files, sweeps and multi-seed reports.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::data::{load_small_image_10, load_small_image_100, Sample, SplitDataset, SyntheticSpec, TaskStream};
use crate::error::{Error, Result};
use crate::memory::MemoryBuffer;
use crate::model::{Classifier, EncoderInit, ModelConfig};
use crate::trainer::{Method, StageKind, StageReport, StepLog, TrainConfig, Trainer, TERM_NAMES};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SEDEG_OUT_DIR";

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    SmallImage10,
    SmallImage100,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::SmallImage10 => "small-image-10",
            Self::SmallImage100 => "small-image-100",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "small-image-10" | "cifar10" => Ok(Self::SmallImage10),
            "small-image-100" | "cifar100" => Ok(Self::SmallImage100),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset '{other}' (synthetic|small-image-10|small-image-100)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub dataset: DatasetKind,
    /// Directory holding the binary files of a small-image set.
    pub data_dir: Option<PathBuf>,
    /// Generator settings when `dataset` is synthetic. Image size and
    /// channels follow the model configuration.
    pub synthetic: SyntheticSpec,
    pub num_tasks: usize,
    /// `None` splits the classes evenly over the tasks.
    pub classes_per_task: Option<usize>,
    pub class_order_seed: u64,
    pub memory_capacity: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            synthetic: SyntheticSpec::default(),
            num_tasks: 2,
            classes_per_task: None,
            class_order_seed: 0,
            memory_capacity: 20,
        }
    }
}

impl BenchmarkSpec {
    fn load(&self, model: &ModelConfig) -> Result<SplitDataset> {
        let data = match self.dataset {
            DatasetKind::Synthetic => {
                let spec = SyntheticSpec {
                    image_size: model.input_size,
                    channels: model.channels,
                    ..self.synthetic.clone()
                };
                return spec.generate();
            }
            DatasetKind::SmallImage10 | DatasetKind::SmallImage100 => {
                let dir = self
                    .data_dir
                    .as_deref()
                    .ok_or_else(|| Error::Config(format!("dataset {} needs data_dir", self.dataset)))?;
                if self.dataset == DatasetKind::SmallImage10 {
                    load_small_image_10(dir)?
                } else {
                    load_small_image_100(dir)?
                }
            }
        };
        let side = data.train.image_shape[0];
        if side == model.input_size {
            return Ok(data);
        }
        if model.input_size == 0 || side % model.input_size != 0 {
            return Err(Error::Config(format!(
                "images are {side}px; model input_size {} must divide it",
                model.input_size
            )));
        }
        let factor = side / model.input_size;
        Ok(SplitDataset {
            train: data.train.downsample(factor)?,
            eval: data.eval.downsample(factor)?,
        })
    }

    /// Split the dataset into the benchmark's task stream.
    pub fn build_stream(&self, model: &ModelConfig) -> Result<TaskStream> {
        if self.num_tasks == 0 {
            return Err(Error::Config("num_tasks must be >= 1".into()));
        }
        let data = self.load(model)?;
        let total = data.train.num_classes;
        let per_task = match self.classes_per_task {
            Some(k) => k,
            None if total % self.num_tasks == 0 => total / self.num_tasks,
            None => {
                return Err(Error::Config(format!(
                    "{total} classes do not split into {} tasks",
                    self.num_tasks
                )))
            }
        };
        if per_task * self.num_tasks != total {
            return Err(Error::Config(format!(
                "{} tasks x {per_task} classes != {total} classes",
                self.num_tasks
            )));
        }
        TaskStream::build(data, self.num_tasks, per_task, self.class_order_seed)
    }
}

/// Accuracies in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Tasks `1..=upto`, in order.
    pub per_task: Vec<f64>,
    /// Pooled over every evaluated sample.
    pub all_seen: f64,
}

const EVAL_BATCH: usize = 256;

/// Argmax accuracy over all seen classes on the eval sets of tasks
/// `1..=upto`.
pub fn evaluate(model: &dyn Classifier, stream: &TaskStream, upto: usize) -> Result<Accuracy> {
    if upto == 0 || upto > stream.num_tasks() {
        return Err(Error::InvalidArgument(format!(
            "cannot evaluate up to task {upto} of {}",
            stream.num_tasks()
        )));
    }
    let (mut correct_all, mut total_all) = (0usize, 0usize);
    let mut per_task = Vec::with_capacity(upto);
    for t in 1..=upto {
        let samples = &stream.task(t)?.eval;
        let mut correct = 0;
        for chunk in samples.chunks(EVAL_BATCH) {
            let idx: Vec<usize> = chunk.iter().map(|s| s.index).collect();
            let logits = model.full_logits(&stream.eval.batch(&idx))?;
            correct += logits
                .argmax_rows()
                .iter()
                .zip(chunk)
                .filter(|(p, s)| **p == s.label)
                .count();
        }
        per_task.push(percent(correct, samples.len()));
        correct_all += correct;
        total_all += samples.len();
    }
    Ok(Accuracy {
        per_task,
        all_seen: percent(correct_all, total_all),
    })
}

fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

/// Mean of the all-seen accuracies recorded after each phase.
pub fn avg_accuracy(phases: &[f64]) -> Result<f64> {
    if phases.is_empty() {
        return Err(Error::InvalidArgument("no phases recorded".into()));
    }
    Ok(phases.iter().sum::<f64>() / phases.len() as f64)
}

/// Running averages: entry `k` is the mean of `phases[..=k]`.
pub fn running_avg(phases: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    phases
        .iter()
        .enumerate()
        .map(|(k, a)| {
            sum += a;
            sum / (k + 1) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task_index: usize,
    pub stage: StageKind,
    pub seen_classes: usize,
    pub all_seen_acc: f64,
    /// Mean over the final accuracies of earlier tasks and this row's.
    pub avg_acc: f64,
    pub per_task_acc: Vec<f64>,
}

/// Everything measured during one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunRecord {
    pub rows: Vec<MetricRow>,
    pub stages: Vec<StageReport>,
    #[serde(skip)]
    pub trace: Vec<StepLog>,
    /// Eval images also seen in a training batch or the memory.
    pub eval_overlap: usize,
}

impl RunRecord {
    /// Final all-seen accuracy of each completed task.
    pub fn phase_finals(&self) -> Vec<f64> {
        let mut finals: Vec<f64> = Vec::new();
        let mut last_task = 0;
        for r in &self.rows {
            if r.task_index == last_task {
                *finals.last_mut().expect("row of current task") = r.all_seen_acc;
            } else {
                finals.push(r.all_seen_acc);
                last_task = r.task_index;
            }
        }
        finals
    }

    pub fn push(&mut self, task_index: usize, stage: StageKind, seen_classes: usize, acc: Accuracy) {
        let mut phases: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.task_index < task_index)
            .fold(BTreeMap::new(), |mut m, r| {
                m.insert(r.task_index, r.all_seen_acc);
                m
            })
            .into_values()
            .collect();
        phases.push(acc.all_seen);
        let avg_acc = avg_accuracy(&phases).expect("at least one phase");
        self.rows.push(MetricRow {
            task_index,
            stage,
            seen_classes,
            all_seen_acc: acc.all_seen,
            avg_acc,
            per_task_acc: acc.per_task,
        });
    }

    pub fn last(&self) -> Result<f64> {
        self.rows
            .last()
            .map(|r| r.all_seen_acc)
            .ok_or_else(|| Error::InvalidArgument("empty run record".into()))
    }

    pub fn avg(&self) -> Result<f64> {
        avg_accuracy(&self.phase_finals())
    }

    /// Accuracy on task `t`'s classes after the final stage.
    pub fn final_task_accuracy(&self, t: usize) -> Option<f64> {
        self.rows.last().and_then(|r| r.per_task_acc.get(t - 1).copied())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Output directory; nothing is written when `None`.
    pub out: Option<PathBuf>,
    /// Save a checkpoint after every stage.
    pub save_checkpoints: bool,
}

fn image_key(data: &crate::data::Dataset, i: usize) -> u64 {
    let mut h = DefaultHasher::new();
    for x in data.image(i) {
        x.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Count eval images whose pixels also occur among `train` samples or the
/// memory.
pub fn eval_overlap(stream: &TaskStream, train: &[Sample], memory: &MemoryBuffer) -> usize {
    let eval: HashSet<u64> = stream
        .tasks
        .iter()
        .flat_map(|t| t.eval.iter())
        .map(|s| image_key(&stream.eval, s.index))
        .collect();
    train
        .iter()
        .copied()
        .chain(memory.samples())
        .filter(|s| eval.contains(&image_key(&stream.train, s.index)))
        .count()
}

/// Train `method` over the whole stream, evaluating after every stage.
pub fn run_benchmark(
    spec: &BenchmarkSpec,
    config: &TrainConfig,
    method: Method,
    options: &RunOptions,
) -> Result<RunRecord> {
    let stream = spec.build_stream(&config.model)?;
    let mut trainer = Trainer::new(config.clone(), method, spec.memory_capacity)?;
    let mut record = RunRecord::default();
    let ckpt_dir = options
        .out
        .as_ref()
        .filter(|_| options.save_checkpoints)
        .map(|d| d.join("checkpoints"));
    for t in 1..=stream.num_tasks() {
        let seen = stream.seen_classes(t).len();
        let mut on_stage = |o: &crate::trainer::StageOutcome<'_>| -> Result<()> {
            let acc = evaluate(&o.model, &stream, t)?;
            info!(
                "{method} task {t} {}: all-seen {:.2}%",
                o.report.stage, acc.all_seen
            );
            record.push(t, o.report.stage, seen, acc);
            if let Some(dir) = &ckpt_dir {
                let path = dir.join(format!("task{t:02}_{}.ckpt", o.report.stage));
                o.model.checkpoint(Some(o.memory)).save(&path)?;
            }
            Ok(())
        };
        let reports = trainer.run_task(&stream, t, &mut on_stage)?;
        record.stages.extend(reports);
        record.eval_overlap += eval_overlap(&stream, &stream.task(t)?.train, &trainer.memory);
    }
    if record.eval_overlap > 0 {
        warn!("{} eval images also appear in training data", record.eval_overlap);
    }
    record.trace = std::mem::take(&mut trainer.trace);
    if let Some(dir) = &options.out {
        write_run(dir, &record, &RunSettingsView { spec, config, method })?;
    }
    Ok(record)
}

#[derive(Serialize)]
struct RunSettingsView<'a> {
    spec: &'a BenchmarkSpec,
    config: &'a TrainConfig,
    method: Method,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const STAGES_FILE: &str = "stages.json";

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))
}

pub fn metrics_csv(record: &RunRecord) -> Result<Vec<u8>> {
    let header = ["task_index", "stage", "seen_classes", "all_seen_acc", "avg_acc", "per_task_acc_json"]
        .map(String::from);
    let rows = record.rows.iter().map(|r| {
        let per_task = format!(
            "[{}]",
            r.per_task_acc.iter().map(|a| format!("{a}")).collect::<Vec<_>>().join(",")
        );
        vec![
            r.task_index.to_string(),
            r.stage.to_string(),
            r.seen_classes.to_string(),
            format!("{}", r.all_seen_acc),
            format!("{}", r.avg_acc),
            per_task,
        ]
    });
    csv_bytes(&header, rows)
}

pub fn losses_csv(trace: &[StepLog]) -> Result<Vec<u8>> {
    let mut header: Vec<String> = ["step", "task_index", "stage", "epoch", "lr", "total"].map(String::from).into();
    for name in TERM_NAMES {
        header.push(name.to_string());
        header.push(format!("{name}_contrib"));
    }
    let rows = trace.iter().map(|l| {
        let mut row = vec![
            l.step.to_string(),
            l.task_index.to_string(),
            l.stage.to_string(),
            l.epoch.to_string(),
            format!("{}", l.lr),
            format!("{}", l.total),
        ];
        for i in 0..TERM_NAMES.len() {
            row.push(format!("{}", l.raw[i]));
            row.push(format!("{}", l.contribution[i]));
        }
        row
    });
    csv_bytes(&header, rows)
}

fn write_run(dir: &Path, record: &RunRecord, settings: &RunSettingsView<'_>) -> Result<()> {
    write_atomic(&dir.join(METRICS_FILE), &metrics_csv(record)?)?;
    write_atomic(&dir.join(LOSSES_FILE), &losses_csv(&record.trace)?)?;
    write_atomic(&dir.join(CONFIG_FILE), serde_json::to_string_pretty(settings)?.as_bytes())?;
    write_atomic(&dir.join(STAGES_FILE), serde_json::to_string_pretty(&record.stages)?.as_bytes())
}

/// Parse a metrics file back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Data(format!("{}: short row", path.display())));
        let num = |i: usize| -> Result<f64> {
            field(i)?
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad number in column {i}", path.display())))
        };
        let stage: StageKind = serde_json::from_value(serde_json::Value::String(field(1)?.to_string()))?;
        rows.push(MetricRow {
            task_index: num(0)? as usize,
            stage,
            seen_classes: num(2)? as usize,
            all_seen_acc: num(3)?,
            avg_acc: num(4)?,
            per_task_acc: serde_json::from_str(field(5)?)?,
        });
    }
    Ok(rows)
}

// ------------------------------------------------------------- settings

/// Everything needed for one run, settable through flat `key=value` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub spec: BenchmarkSpec,
    pub train: TrainConfig,
    pub method: Method,
    pub save_checkpoints: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            spec: BenchmarkSpec::default(),
            train: TrainConfig::default(),
            method: Method::Sedeg,
            save_checkpoints: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for {key}"))),
    }
}

fn parse_init(key: &str, value: &str) -> Result<EncoderInit> {
    match value {
        "copy" | "copy_old" => Ok(EncoderInit::CopyOld),
        "random" => Ok(EncoderInit::Random),
        _ => Err(Error::Config(format!("invalid init '{value}' for {key} (copy|random)"))),
    }
}

/// Every key accepted by [`RunSettings::apply`].
pub const SETTING_KEYS: &[&str] = &[
    "dataset",
    "data_dir",
    "num_tasks",
    "classes_per_task",
    "memory",
    "seed",
    "class_order_seed",
    "method",
    "no_aux",
    "no_ted",
    "no_balanced_ce",
    "no_feature_kd",
    "no_balanced_kd",
    "distill_full",
    "save_checkpoints",
    "model",
    "num_sab",
    "num_heads",
    "embed_dim",
    "input_size",
    "patch_size",
    "mlp_ratio",
    "bootstrap_epochs",
    "stage1_epochs",
    "stage2_epochs",
    "finetune_epochs",
    "lr",
    "finetune_lr",
    "weight_decay",
    "batch_size",
    "optimizer",
    "alpha",
    "lambda",
    "mu",
    "xi",
    "beta",
    "tau",
    "gamma",
    "bld_conventional",
    "sup_init",
    "new_encoder_init",
    "augment_flip",
    "augment_crop",
    "synthetic_classes",
    "synthetic_train_per_class",
    "synthetic_eval_per_class",
    "synthetic_separation",
    "synthetic_noise",
    "synthetic_grid",
    "synthetic_seed",
];

impl RunSettings {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        let s = &mut self.spec;
        match key.trim() {
            "dataset" => s.dataset = value.parse()?,
            "data_dir" => s.data_dir = Some(PathBuf::from(value)),
            "num_tasks" => s.num_tasks = parse(key, value)?,
            "classes_per_task" => s.classes_per_task = Some(parse(key, value)?),
            "memory" => s.memory_capacity = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "class_order_seed" => s.class_order_seed = parse(key, value)?,
            "method" => self.method = value.parse()?,
            "no_aux" => t.ablation.aux_loss = !parse_bool(key, value)?,
            "no_ted" => t.ablation.embeddings_kd = !parse_bool(key, value)?,
            "no_balanced_ce" => t.ablation.balanced_classification = !parse_bool(key, value)?,
            "no_feature_kd" => t.ablation.feature_kd = !parse_bool(key, value)?,
            "no_balanced_kd" => t.ablation.balanced_kd = !parse_bool(key, value)?,
            "distill_full" => t.ablation.distill_encoder_only = !parse_bool(key, value)?,
            "save_checkpoints" => self.save_checkpoints = parse_bool(key, value)?,
            "model" => {
                t.model = match value {
                    "default" => ModelConfig::default(),
                    "tiny" => ModelConfig::tiny(),
                    "full" | "full_cifar" => ModelConfig::full_cifar(),
                    "full_tiny_imagenet" => ModelConfig::full_tiny_imagenet(),
                    _ => return Err(Error::Config(format!("unknown model preset '{value}'"))),
                }
            }
            "num_sab" => t.model.num_sab = parse(key, value)?,
            "num_heads" => t.model.num_heads = parse(key, value)?,
            "embed_dim" => t.model.embed_dim = parse(key, value)?,
            "input_size" => t.model.input_size = parse(key, value)?,
            "patch_size" => t.model.patch_size = parse(key, value)?,
            "mlp_ratio" => t.model.mlp_ratio = parse(key, value)?,
            "bootstrap_epochs" => t.bootstrap_epochs = parse(key, value)?,
            "stage1_epochs" => t.stage1_epochs = parse(key, value)?,
            "stage2_epochs" => t.stage2_epochs = parse(key, value)?,
            "finetune_epochs" => t.finetune_epochs = parse(key, value)?,
            "lr" => t.learning_rate = parse(key, value)?,
            "finetune_lr" => t.finetune_lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "optimizer" => t.optimizer = value.parse().map_err(Error::Config)?,
            "alpha" => {
                t.loss.alpha = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "lambda" => t.loss.lambda = parse(key, value)?,
            "mu" => t.loss.mu = parse(key, value)?,
            "xi" => t.loss.xi = parse(key, value)?,
            "beta" => t.loss.beta = parse(key, value)?,
            "tau" => t.loss.tau = parse(key, value)?,
            "gamma" => t.loss.gamma = parse(key, value)?,
            "bld_conventional" => t.loss.bld_conventional = parse_bool(key, value)?,
            "sup_init" => t.sup_init = parse_init(key, value)?,
            "new_encoder_init" => t.new_encoder_init = parse_init(key, value)?,
            "augment_flip" => t.augment_flip = parse_bool(key, value)?,
            "augment_crop" => t.augment_crop = parse(key, value)?,
            "synthetic_classes" => s.synthetic.num_classes = parse(key, value)?,
            "synthetic_train_per_class" => s.synthetic.train_per_class = parse(key, value)?,
            "synthetic_eval_per_class" => s.synthetic.eval_per_class = parse(key, value)?,
            "synthetic_separation" => s.synthetic.separation = parse(key, value)?,
            "synthetic_noise" => s.synthetic.noise = parse(key, value)?,
            "synthetic_grid" => s.synthetic.grid = parse(key, value)?,
            "synthetic_seed" => s.synthetic.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown setting '{other}'"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_kv(text)? {
            self.apply(&key, &value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s = Self::default();
        s.apply_text(&text)?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }

    pub fn run(&self, out: Option<&Path>) -> Result<RunRecord> {
        self.validate()?;
        let options = RunOptions {
            out: out.map(Path::to_path_buf),
            save_checkpoints: self.save_checkpoints,
        };
        run_benchmark(&self.spec, &self.train, self.method, &options)
    }
}

/// Split `key=value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

// ---------------------------------------------------------------- sweeps

/// Named flag combinations of the two ablation grids.
pub fn ablation_rows(grid: &str) -> Result<Vec<(String, Vec<(String, String)>)>> {
    let row = |label: &str, kv: &[(&str, &str)]| {
        (
            label.to_string(),
            kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect::<Vec<_>>(),
        )
    };
    // each flag disables a component, so an enabled component maps to "false"
    fn flags(names: [&'static str; 3], on: [bool; 3]) -> Vec<(&'static str, &'static str)> {
        names
            .iter()
            .zip(on)
            .map(|(n, on)| (*n, if on { "false" } else { "true" }))
            .chain([("method", "sedeg")])
            .collect()
    }
    let dytox = row("dytox", &[("method", "dytox")]);
    let (names, rows): ([&str; 3], [(&str, [bool; 3]); 4]) = match grid {
        "table4" => (
            ["no_aux", "no_ted", "no_balanced_ce"],
            [
                ("aux+ted+bc", [true, true, true]),
                ("aux+ted", [true, true, false]),
                ("aux+bc", [true, false, true]),
                ("bc", [false, false, true]),
            ],
        ),
        "table5" => (
            ["no_feature_kd", "no_balanced_kd", "distill_full"],
            [
                ("fkd+bkd+enc", [true, true, true]),
                ("fkd+bkd", [true, true, false]),
                ("fkd", [true, false, false]),
                ("none", [false, false, false]),
            ],
        ),
        other => return Err(Error::Config(format!("unknown ablation grid '{other}' (table4|table5)"))),
    };
    let mut out: Vec<_> = rows.iter().map(|(label, on)| row(label, &flags(names, *on))).collect();
    out.push(dytox);
    Ok(out)
}

/// One cell of a sweep: a label and the settings overrides that define it.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

/// Expand a grid file: `key=v1,v2,...` lines form a cartesian product in
/// file order; single values apply to every cell. The special key
/// `ablation` takes `table4` and/or `table5`.
pub fn expand_grid(text: &str) -> Result<Vec<SweepCell>> {
    let mut cells = vec![SweepCell {
        label: String::new(),
        overrides: Vec::new(),
    }];
    for (key, value) in parse_kv(text)? {
        let options: Vec<(String, Vec<(String, String)>)> = if key == "ablation" {
            let mut rows = Vec::new();
            for grid in value.split(',') {
                let grid = grid.trim();
                for (label, kv) in ablation_rows(grid)? {
                    rows.push((format!("{grid}:{label}"), kv));
                }
            }
            rows
        } else {
            if !SETTING_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown setting '{key}' in grid")));
            }
            value
                .split(',')
                .map(|v| (format!("{key}={}", v.trim()), vec![(key.clone(), v.trim().to_string())]))
                .collect()
        };
        let labelled = options.len() > 1 || key == "ablation";
        cells = cells
            .into_iter()
            .flat_map(|c| {
                options.iter().map(move |(label, kv)| {
                    let mut cell = c.clone();
                    if labelled {
                        if !cell.label.is_empty() {
                            cell.label.push(' ');
                        }
                        cell.label.push_str(label);
                    }
                    cell.overrides.extend(kv.iter().cloned());
                    cell
                })
            })
            .collect();
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub cell: usize,
    pub label: String,
    pub dir: PathBuf,
    pub avg: f64,
    pub last: f64,
}

/// Run every cell of a grid under `out/cell_NNN`, then write
/// `out/summary.csv`.
pub fn sweep(grid_text: &str, out: &Path) -> Result<Vec<SweepResult>> {
    let cells = expand_grid(grid_text)?;
    let mut results = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let mut settings = RunSettings::default();
        for (k, v) in &cell.overrides {
            settings.apply(k, v)?;
        }
        let dir = out.join(format!("cell_{i:03}"));
        info!("sweep cell {i}/{}: {}", cells.len(), cell.label);
        let record = settings.run(Some(&dir))?;
        results.push(SweepResult {
            cell: i,
            label: cell.label.clone(),
            dir,
            avg: record.avg()?,
            last: record.last()?,
        });
    }
    write_atomic(&out.join("summary.csv"), &summary_csv(&results)?)?;
    Ok(results)
}

pub fn summary_csv(results: &[SweepResult]) -> Result<Vec<u8>> {
    let header = ["cell", "label", "AVG", "LAST"].map(String::from);
    csv_bytes(
        &header,
        results.iter().map(|r| {
            vec![
                r.cell.to_string(),
                r.label.clone(),
                format!("{}", r.avg),
                format!("{}", r.last),
            ]
        }),
    )
}

pub fn summary_table(results: &[SweepResult]) -> String {
    let width = results.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:>4}  {:<width$}  {:>8}  {:>8}\n", "cell", "label", "AVG", "LAST");
    for r in results {
        s.push_str(&format!(
            "{:>4}  {:<width$}  {:>8.2}  {:>8.2}\n",
            r.cell, r.label, r.avg, r.last
        ));
    }
    s
}

// ---------------------------------------------------------------- report

/// Runs that differ only in their seeds, aggregated.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportGroup {
    pub key: String,
    pub runs: Vec<PathBuf>,
    pub avg_mean: f64,
    pub avg_std: f64,
    pub last_mean: f64,
    pub last_std: f64,
    /// `(task_index, stage, mean all-seen acc, std, mean avg acc)` per row.
    pub curve: Vec<(usize, StageKind, f64, f64, f64)>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    if entries.iter().any(|p| p.file_name().is_some_and(|n| n == METRICS_FILE)) {
        out.push(dir.to_path_buf());
    }
    for p in entries.into_iter().filter(|p| p.is_dir()) {
        find_runs(&p, out)?;
    }
    Ok(())
}

fn group_key(config: &Path) -> Result<String> {
    let text = fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let mut v: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(c) = v.get_mut("config").and_then(|c| c.as_object_mut()) {
        c.remove("seed");
    }
    if let Some(s) = v.get_mut("spec").and_then(|s| s.as_object_mut()) {
        s.remove("class_order_seed");
    }
    let method = v["method"].as_str().unwrap_or("?").to_string();
    let memory = v["spec"]["memory_capacity"].clone();
    let tasks = v["spec"]["num_tasks"].clone();
    let mut h = DefaultHasher::new();
    v.to_string().hash(&mut h);
    Ok(format!("{method} tasks={tasks} memory={memory} #{:08x}", h.finish() as u32))
}

/// Aggregate every run below `dir` over seeds.
pub fn report(dir: &Path) -> Result<Vec<ReportGroup>> {
    let mut runs = Vec::new();
    find_runs(dir, &mut runs)?;
    if runs.is_empty() {
        return Err(Error::Data(format!("no {METRICS_FILE} found under {}", dir.display())));
    }
    let mut groups: BTreeMap<String, Vec<(PathBuf, Vec<MetricRow>)>> = BTreeMap::new();
    for run in runs {
        let key = group_key(&run.join(CONFIG_FILE))?;
        let rows = read_metrics(&run.join(METRICS_FILE))?;
        groups.entry(key).or_default().push((run, rows));
    }
    let mut out = Vec::new();
    for (key, members) in groups {
        let mut avgs = Vec::new();
        let mut lasts = Vec::new();
        for (path, rows) in &members {
            let record = RunRecord {
                rows: rows.clone(),
                ..RunRecord::default()
            };
            avgs.push(record.avg()?);
            lasts.push(
                record
                    .last()
                    .map_err(|_| Error::Data(format!("{}: empty metrics", path.display())))?,
            );
        }
        let shape: Vec<(usize, StageKind)> = members[0].1.iter().map(|r| (r.task_index, r.stage)).collect();
        if members
            .iter()
            .any(|(_, rows)| rows.iter().map(|r| (r.task_index, r.stage)).ne(shape.iter().copied()))
        {
            return Err(Error::Data(format!("runs in group {key} have different stages")));
        }
        let curve = shape
            .iter()
            .enumerate()
            .map(|(i, &(t, stage))| {
                let acc: Vec<f64> = members.iter().map(|(_, r)| r[i].all_seen_acc).collect();
                let avg: Vec<f64> = members.iter().map(|(_, r)| r[i].avg_acc).collect();
                let (m, s) = mean_std(&acc);
                (t, stage, m, s, mean_std(&avg).0)
            })
            .collect();
        let (avg_mean, avg_std) = mean_std(&avgs);
        let (last_mean, last_std) = mean_std(&lasts);
        out.push(ReportGroup {
            key,
            runs: members.into_iter().map(|(p, _)| p).collect(),
            avg_mean,
            avg_std,
            last_mean,
            last_std,
            curve,
        });
    }
    Ok(out)
}

pub fn report_summary_csv(groups: &[ReportGroup]) -> Result<Vec<u8>> {
    let header = ["group", "runs", "AVG_mean", "AVG_std", "LAST_mean", "LAST_std"].map(String::from);
    csv_bytes(
        &header,
        groups.iter().map(|g| {
            vec![
                g.key.clone(),
                g.runs.len().to_string(),
                format!("{}", g.avg_mean),
                format!("{}", g.avg_std),
                format!("{}", g.last_mean),
                format!("{}", g.last_std),
            ]
        }),
    )
}

/// Long-format curve data, one row per (group, stage).
pub fn report_curves_csv(groups: &[ReportGroup]) -> Result<Vec<u8>> {
    let header = ["group", "task_index", "stage", "all_seen_mean", "all_seen_std", "avg_acc_mean"].map(String::from);
    let mut rows = Vec::new();
    for g in groups {
        for (t, stage, m, s, a) in &g.curve {
            rows.push(vec![
                g.key.clone(),
                t.to_string(),
                stage.to_string(),
                format!("{m}"),
                format!("{s}"),
                format!("{a}"),
            ]);
        }
    }
    csv_bytes(&header, rows.into_iter())
}

pub fn report_table(groups: &[ReportGroup]) -> String {
    let width = groups.iter().map(|g| g.key.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<width$}  {:>4}  {:>15}  {:>15}\n", "group", "runs", "AVG", "LAST");
    for g in groups {
        s.push_str(&format!(
            "{:<width$}  {:>4}  {:>7.2} ± {:<5.2}  {:>7.2} ± {:<5.2}\n",
            g.key,
            g.runs.len(),
            g.avg_mean,
            g.avg_std,
            g.last_mean,
            g.last_std
        ));
    }
    s
}
