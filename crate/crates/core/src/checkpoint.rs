//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SDGCKPT\0" | version u32 | kind u8
//! model config: 8 x u32 | task count u32 | classes per task: u32 each
//! tensor count u32 | per tensor: name len u32, name utf-8, ndim u32, dims u32..., f32 payload
//! memory flag u8 | capacity u64, seed u64, exemplar count u32, per exemplar: index u32, label u32, task u32
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::memory::{Exemplar, MemoryBuffer};
use crate::model::{Decoder, EncoderInit, EnsembledEncoder, EnsembledModel, Model, ModelConfig};
use crate::nn::Module;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SDGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Model = 0,
    Ensembled = 1,
}

/// Decoded contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub classes_per_task: Vec<usize>,
    pub tensors: Vec<(String, Tensor)>,
    pub memory: Option<MemoryBuffer>,
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in u32")))
}

fn collect_tensors(module: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    module.visit("", &mut |name, p| out.push((name.to_string(), p.value.clone())));
    out
}

impl Checkpoint {
    pub fn from_model(model: &Model, memory: Option<&MemoryBuffer>) -> Self {
        Self {
            kind: CheckpointKind::Model,
            config: model.config,
            classes_per_task: model.decoder.classes_per_task(),
            tensors: collect_tensors(model),
            memory: memory.cloned(),
        }
    }

    pub fn from_ensembled(model: &EnsembledModel, memory: Option<&MemoryBuffer>) -> Self {
        Self {
            kind: CheckpointKind::Ensembled,
            config: *model.encoder.config(),
            classes_per_task: model.decoder.classes_per_task(),
            tensors: collect_tensors(model),
            memory: memory.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        let c = &self.config;
        for v in [
            c.num_sab,
            c.num_tab,
            c.num_heads,
            c.embed_dim,
            c.input_size,
            c.patch_size,
            c.channels,
            c.mlp_ratio,
        ] {
            out.extend_from_slice(&u32_of(v, "config field")?.to_le_bytes());
        }
        out.extend_from_slice(&u32_of(self.classes_per_task.len(), "task count")?.to_le_bytes());
        for &n in &self.classes_per_task {
            out.extend_from_slice(&u32_of(n, "class count")?.to_le_bytes());
        }
        out.extend_from_slice(&u32_of(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_of(t.ndim(), "rank")?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        match &self.memory {
            None => out.push(0),
            Some(m) => {
                out.push(1);
                out.extend_from_slice(&(m.capacity as u64).to_le_bytes());
                out.extend_from_slice(&m.seed.to_le_bytes());
                out.extend_from_slice(&u32_of(m.len(), "exemplar count")?.to_le_bytes());
                for e in m.iter() {
                    for v in [e.index, e.label, e.task_of_origin] {
                        out.extend_from_slice(&u32_of(v, "exemplar field")?.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = match r.u8()? {
            0 => CheckpointKind::Model,
            1 => CheckpointKind::Ensembled,
            k => return Err(Error::Checkpoint(format!("unknown kind {k}"))),
        };
        let mut f = [0usize; 8];
        for v in &mut f {
            *v = r.u32()? as usize;
        }
        let config = ModelConfig {
            num_sab: f[0],
            num_tab: f[1],
            num_heads: f[2],
            embed_dim: f[3],
            input_size: f[4],
            patch_size: f[5],
            channels: f[6],
            mlp_ratio: f[7],
        };
        let tasks = r.u32()? as usize;
        let classes_per_task = (0..tasks).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let memory = match r.u8()? {
            0 => None,
            1 => {
                let capacity = r.u64()? as usize;
                let seed = r.u64()?;
                let n = r.u32()? as usize;
                let mut ex = Vec::with_capacity(n.min(1 << 20));
                for _ in 0..n {
                    ex.push(Exemplar {
                        index: r.u32()? as usize,
                        label: r.u32()? as usize,
                        task_of_origin: r.u32()? as usize,
                    });
                }
                Some(MemoryBuffer::from_exemplars(capacity, seed, ex))
            }
            k => return Err(Error::Checkpoint(format!("bad memory flag {k}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            kind,
            config,
            classes_per_task,
            tensors,
            memory,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn decoder(&self, rng: &mut ChaCha8Rng) -> Result<Decoder> {
        let mut d = Decoder::new(&self.config, rng);
        for &n in &self.classes_per_task {
            d.add_task(n, rng)?;
        }
        Ok(d)
    }

    /// Rebuild a single-encoder model. All parameters come back trainable.
    pub fn to_model(&self) -> Result<Model> {
        if self.kind != CheckpointKind::Model {
            return Err(Error::Checkpoint("checkpoint holds an ensembled model".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(self.config, &mut rng)?;
        model.decoder = self.decoder(&mut rng)?;
        self.fill(&mut model)?;
        Ok(model)
    }

    /// Rebuild an ensembled model; the old branch comes back frozen.
    pub fn to_ensembled(&self) -> Result<EnsembledModel> {
        if self.kind != CheckpointKind::Ensembled {
            return Err(Error::Checkpoint("checkpoint holds a single-encoder model".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = Model::new(self.config, &mut rng)?;
        let decoder = self.decoder(&mut rng)?;
        let encoder = EnsembledEncoder::new(&base.encoder, decoder.num_classes(), EncoderInit::Random, &mut rng)?;
        let mut model = EnsembledModel { encoder, decoder };
        self.fill(&mut model)?;
        Ok(model)
    }

    fn fill(&self, module: &mut dyn Module) -> Result<()> {
        let mut expected = 0;
        let mut err = None;
        let mut i = 0;
        module.visit_mut("", &mut |name, p| {
            expected += 1;
            if err.is_some() {
                return;
            }
            match self.tensors.get(i) {
                Some((n, t)) if n == name && t.shape() == p.value.shape() => p.value = t.clone(),
                Some((n, t)) => {
                    err = Some(format!(
                        "tensor {i}: expected {name} {:?}, found {n} {:?}",
                        p.value.shape(),
                        t.shape()
                    ))
                }
                None => err = Some(format!("missing tensor {name}")),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(Error::Checkpoint(e));
        }
        if expected != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                self.tensors.len()
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}
