//! Image datasets, class-incremental task streams and batch augmentation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images stored contiguously as `[n, h, w, c]` with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_shape: [usize; 3],
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(image_shape: [usize; 3], images: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} values for {} images of shape {image_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} >= {num_classes} classes")));
        }
        Ok(Self {
            image_shape,
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn per_image(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.per_image();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gather images into a `[indices.len(), h, w, c]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [h, w, c] = self.image_shape;
        Tensor::new(&[indices.len(), h, w, c], data).expect("batch shape")
    }

    /// Average-pool every image by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let [h, w, c] = self.image_shape;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Data(format!("cannot downsample {h}x{w} by {factor}")));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (nh, nw) = (h / factor, w / factor);
        let norm = (factor * factor) as f64;
        let mut images = Vec::with_capacity(self.len() * nh * nw * c);
        for i in 0..self.len() {
            let img = self.image(i);
            for y in 0..nh {
                for x in 0..nw {
                    for ch in 0..c {
                        let mut s = 0.0;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                s += img[((y * factor + dy) * w + x * factor + dx) * c + ch];
                            }
                        }
                        images.push(s / norm);
                    }
                }
            }
        }
        Self::new([nh, nw, c], images, self.labels.clone(), self.num_classes)
    }
}

/// Train and held-out pools of the same classes.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Seeded Gaussian class prototypes rendered as images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Scale of the class prototypes; larger means more separable.
    pub separation: f64,
    /// Per-pixel noise standard deviation.
    pub noise: f64,
    /// Side of the coarse grid each prototype is drawn on before upsampling.
    pub grid: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            train_per_class: 50,
            eval_per_class: 20,
            image_size: 32,
            channels: 3,
            separation: 1.0,
            noise: 0.5,
            grid: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<SplitDataset> {
        let (s, c, g) = (self.image_size, self.channels, self.grid);
        if g == 0 || s % g != 0 || c == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "synthetic grid {g} must divide image size {s}, with at least one class and channel"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let cell = s / g;
        let prototypes: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|_| {
                let coarse: Vec<f64> = (0..g * g * c).map(|_| unit.sample(&mut rng) * self.separation).collect();
                let mut img = Vec::with_capacity(s * s * c);
                for y in 0..s {
                    for x in 0..s {
                        let base = ((y / cell) * g + x / cell) * c;
                        img.extend_from_slice(&coarse[base..base + c]);
                    }
                }
                img
            })
            .collect();
        let render = |per_class: usize, rng: &mut ChaCha8Rng| {
            let mut images = Vec::with_capacity(per_class * self.num_classes * s * s * c);
            let mut labels = Vec::with_capacity(per_class * self.num_classes);
            for (label, proto) in prototypes.iter().enumerate() {
                for _ in 0..per_class {
                    images.extend(proto.iter().map(|p| p + self.noise * unit.sample(rng)));
                    labels.push(label);
                }
            }
            Dataset::new([s, s, c], images, labels, self.num_classes)
        };
        let train = render(self.train_per_class, &mut rng)?;
        let eval = render(self.eval_per_class, &mut rng)?;
        Ok(SplitDataset { train, eval })
    }
}

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;

/// Decode CIFAR-style binary records: `label_bytes` label bytes (the last
/// one is used) followed by a planar 32x32 RGB image. Pixels are mapped to
/// `[-1, 1]` and stored channel-last.
pub fn parse_cifar_records(bytes: &[u8], label_bytes: usize, num_classes: usize) -> Result<Dataset> {
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {record}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for r in bytes.chunks(record) {
        labels.push(r[label_bytes - 1] as usize);
        let px = &r[label_bytes..];
        for i in 0..plane {
            for ch in 0..3 {
                images.push(px[ch * plane + i] as f64 / 127.5 - 1.0);
            }
        }
    }
    Dataset::new([CIFAR_SIDE, CIFAR_SIDE, 3], images, labels, num_classes)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn concat_datasets(parts: Vec<Dataset>) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| Error::Data("no data files".into()))?;
    let (shape, classes) = (first.image_shape, first.num_classes);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        images.extend(p.images);
        labels.extend(p.labels);
    }
    Dataset::new(shape, images, labels, classes)
}

/// Load the 10-class small-image set from its binary distribution
/// (`data_batch_{1..5}.bin`, `test_batch.bin`). Missing training batches are
/// skipped as long as at least one exists.
pub fn load_small_image_10(dir: &Path) -> Result<SplitDataset> {
    let mut parts = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if p.exists() {
            parts.push(parse_cifar_records(&read(&p)?, 1, 10)?);
        }
    }
    if parts.is_empty() {
        return Err(Error::Data(format!("no data_batch_*.bin under {}", dir.display())));
    }
    Ok(SplitDataset {
        train: concat_datasets(parts)?,
        eval: parse_cifar_records(&read(&dir.join("test_batch.bin"))?, 1, 10)?,
    })
}

/// Load the 100-class small-image set (`train.bin`, `test.bin`; fine labels).
pub fn load_small_image_100(dir: &Path) -> Result<SplitDataset> {
    Ok(SplitDataset {
        train: parse_cifar_records(&read(&dir.join("train.bin"))?, 2, 100)?,
        eval: parse_cifar_records(&read(&dir.join("test.bin"))?, 2, 100)?,
    })
}

/// A reference to one image in a stream's train or eval pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    pub label: usize,
}

/// One task of a class-incremental stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    /// 1-based.
    pub task_index: usize,
    /// Stream labels introduced by this task, ascending.
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl TaskData {
    pub fn first_class(&self) -> usize {
        self.classes[0]
    }
}

/// Disjoint class groups presented one task at a time.
///
/// Labels inside the stream are positions in the class order, so task `t`
/// owns labels `(t-1)*k .. t*k` and logits columns line up with labels.
#[derive(Clone, Debug)]
pub struct TaskStream {
    /// Native dataset label of every stream label.
    pub class_order: Vec<usize>,
    pub train: Dataset,
    pub eval: Dataset,
    pub tasks: Vec<TaskData>,
}

impl TaskStream {
    /// Split `data` into `num_tasks` tasks of `classes_per_task` classes,
    /// with class order drawn from `class_order_seed`.
    pub fn build(data: SplitDataset, num_tasks: usize, classes_per_task: usize, class_order_seed: u64) -> Result<Self> {
        let total = data.train.num_classes;
        if num_tasks == 0 || classes_per_task == 0 || num_tasks * classes_per_task != total {
            return Err(Error::Config(format!(
                "{num_tasks} tasks x {classes_per_task} classes does not cover {total} classes"
            )));
        }
        if data.eval.num_classes != total {
            return Err(Error::Data("train and eval pools disagree on class count".into()));
        }
        let mut class_order: Vec<usize> = (0..total).collect();
        class_order.shuffle(&mut ChaCha8Rng::seed_from_u64(class_order_seed));
        let mut position = vec![0; total];
        for (pos, &native) in class_order.iter().enumerate() {
            position[native] = pos;
        }
        let relabel = |mut d: Dataset| {
            for l in &mut d.labels {
                *l = position[*l];
            }
            d
        };
        let train = relabel(data.train);
        let eval = relabel(data.eval);
        let samples = |d: &Dataset, lo: usize, hi: usize| -> Vec<Sample> {
            d.labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l >= lo && l < hi)
                .map(|(index, &label)| Sample { index, label })
                .collect()
        };
        let tasks = (0..num_tasks)
            .map(|t| {
                let (lo, hi) = (t * classes_per_task, (t + 1) * classes_per_task);
                TaskData {
                    task_index: t + 1,
                    classes: (lo..hi).collect(),
                    train: samples(&train, lo, hi),
                    eval: samples(&eval, lo, hi),
                }
            })
            .collect();
        Ok(Self {
            class_order,
            train,
            eval,
            tasks,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, task_index: usize) -> Result<&TaskData> {
        task_index
            .checked_sub(1)
            .and_then(|i| self.tasks.get(i))
            .ok_or_else(|| Error::InvalidArgument(format!("no task {task_index}")))
    }

    /// Stream labels introduced up to and including `task_index`.
    pub fn seen_classes(&self, task_index: usize) -> Vec<usize> {
        self.tasks
            .iter()
            .take(task_index)
            .flat_map(|t| t.classes.iter().copied())
            .collect()
    }
}

/// Random horizontal flips and zero-padded random crops, in place on a
/// `[b, h, w, c]` batch.
pub fn augment_batch(images: &mut Tensor, flip: bool, crop_pad: usize, rng: &mut impl Rng) {
    if !flip && crop_pad == 0 {
        return;
    }
    let s = images.shape().to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let per = h * w * c;
    for i in 0..b {
        let img = &mut images.data_mut()[i * per..(i + 1) * per];
        if flip && rng.random_bool(0.5) {
            for y in 0..h {
                for x in 0..w / 2 {
                    for ch in 0..c {
                        img.swap((y * w + x) * c + ch, (y * w + (w - 1 - x)) * c + ch);
                    }
                }
            }
        }
        if crop_pad > 0 {
            let p = crop_pad as i64;
            let dy = rng.random_range(-p..=p) as isize;
            let dx = rng.random_range(-p..=p) as isize;
            let src = img.to_vec();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (sy, sx) = (y + dy, x + dx);
                    let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                    for ch in 0..c {
                        let dst = ((y as usize) * w + x as usize) * c + ch;
                        img[dst] = if inside {
                            src[((sy as usize) * w + sx as usize) * c + ch]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}
