//! Optimizers keyed by canonical parameter name.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    #[default]
    AdamW,
    /// SGD with momentum 0.9.
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adamw" => Ok(Self::AdamW),
            "sgd" => Ok(Self::Sgd),
            other => Err(format!("unknown optimizer '{other}' (adamw|sgd)")),
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let progress = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Debug)]
struct Slot {
    m: Tensor,
    v: Tensor,
    steps: i32,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: BTreeMap<String, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Self {
            kind,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    /// Apply one update to every non-frozen parameter of `module` that has a
    /// gradient. Weight decay applies to matrices only. Updated values are
    /// rounded to `f32` so checkpoints reproduce them exactly. Returns the
    /// number of tensors updated.
    pub fn step(&mut self, module: &mut dyn Module, prefix: &str, grads: &Gradients, lr: f64) -> usize {
        let mut updated = 0;
        module.visit_mut(prefix, &mut |name, p| {
            if p.frozen {
                return;
            }
            let Some(g) = grads.param(name) else { return };
            let decay = if p.value.ndim() >= 2 { self.weight_decay } else { 0.0 };
            let slot = self.state.entry(name.to_string()).or_insert_with(|| Slot {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                steps: 0,
            });
            slot.steps += 1;
            match self.kind {
                OptimizerKind::AdamW => {
                    let bc1 = 1.0 - self.beta1.powi(slot.steps);
                    let bc2 = 1.0 - self.beta2.powi(slot.steps);
                    let params = p.value.data_mut();
                    let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
                    for i in 0..params.len() {
                        let gi = g.data()[i];
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * params[i]);
                    }
                }
                OptimizerKind::Sgd => {
                    let params = p.value.data_mut();
                    let m = slot.m.data_mut();
                    for i in 0..params.len() {
                        let gi = g.data()[i] + decay * params[i];
                        m[i] = 0.9 * m[i] + gi;
                        params[i] -= lr * m[i];
                    }
                }
            }
            p.value.round_to_f32();
            updated += 1;
        });
        updated
    }
}
