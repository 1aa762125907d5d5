//! Loss terms for both training stages.
//!
//! Every loss is a pure function of plain tensors that returns its value
//! together with the analytic gradient with respect to its trainable input.
//! Teacher-side inputs never receive a gradient. The [`on_tape`] adapters
//! splice these functions into an autograd [`Tape`].
//!
//! Reductions: batch means everywhere; [`loss_aux`] and [`loss_kd`] also
//! average over classes; [`loss_bld`] sums over classes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::softmax_in_place;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loss weights and temperatures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Logits-KD weight. `None` uses the fraction of old classes among all
    /// seen classes.
    pub alpha: Option<f64>,
    /// Divergence weight.
    pub lambda: f64,
    /// Auxiliary-head weight.
    pub mu: f64,
    /// Task-embedding distillation weight.
    pub xi: f64,
    /// Feature distillation weight.
    pub beta: f64,
    pub tau: f64,
    /// Exponent of the inverse-frequency class weights.
    pub gamma: f64,
    /// Swap student and teacher inside the balanced logits distillation.
    pub bld_conventional: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: None,
            lambda: 0.1,
            mu: 1.0,
            xi: 0.1,
            beta: 1.0,
            tau: 1.0,
            gamma: 1.0,
            bld_conventional: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda, self.mu, self.xi, self.beta, self.gamma];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }

    /// Logits-KD weight for a task with `old` previously seen classes out of
    /// `seen` classes in total.
    pub fn alpha_for(&self, old: usize, seen: usize) -> f64 {
        self.alpha
            .unwrap_or(if seen == 0 { 0.0 } else { old as f64 / seen as f64 })
    }
}

/// Per-class sample counts `s_j` in a training set.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(pub BTreeMap<usize, usize>);

impl ClassCounts {
    pub fn from_labels(labels: impl IntoIterator<Item = usize>) -> Self {
        let mut map = BTreeMap::new();
        for l in labels {
            *map.entry(l).or_insert(0) += 1;
        }
        Self(map)
    }

    pub fn get(&self, class: usize) -> usize {
        self.0.get(&class).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }

    /// Counts for columns `0..num_classes`, zero where a class is absent.
    pub fn columns(&self, num_classes: usize) -> Vec<usize> {
        (0..num_classes).map(|c| self.get(c)).collect()
    }
}

/// Non-negative per-class weights `w_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerClassWeights(pub Vec<f64>);

impl PerClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes])
    }
}

/// Value of a loss and its gradient with respect to the trainable input.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Tensor,
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [b, c] if *b > 0 => Ok((*b, *c)),
        s => Err(Error::Shape(format!("{what} must be [batch, classes], got {s:?}"))),
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Sigmoid binary cross-entropy against soft targets, averaged over batch
/// and classes.
fn bce_soft(logits: &Tensor, targets: &Tensor) -> LossGrad {
    let n = logits.numel() as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for ((g, &x), &t) in grad.data_mut().iter_mut().zip(logits.data()).zip(targets.data()) {
        // -[t log s(x) + (1 - t) log(1 - s(x))] = softplus(x) - t x
        value += softplus(x) - t * x;
        *g = (sigmoid(x) - t) / n;
    }
    LossGrad {
        value: value / n,
        grad,
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * classes + y] = 1.0;
    }
    t
}

/// Sigmoid binary cross-entropy with one-hot targets over every column.
pub fn binary_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossGrad> {
    let (b, c) = matrix_dims(logits, "logits")?;
    check_labels(labels, b, c)?;
    Ok(bce_soft(logits, &one_hot(labels, c)))
}

/// Auxiliary-head loss on the supplementary encoder's logits over all seen
/// classes.
pub fn loss_aux(o_sup: &Tensor, labels: &[usize]) -> Result<LossGrad> {
    binary_cross_entropy(o_sup, labels)
}

/// Softmax cross-entropy, batch mean.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossGrad> {
    let (b, c) = matrix_dims(logits, "logits")?;
    check_labels(labels, b, c)?;
    let mut probs = logits.clone();
    let mut value = 0.0;
    for (i, row) in probs.data_mut().chunks_mut(c).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        value += lse - row[labels[i]];
        softmax_in_place(row);
        row[labels[i]] -= 1.0;
    }
    Ok(LossGrad {
        value: value / b as f64,
        grad: probs.scale(1.0 / b as f64),
    })
}

/// Balanced softmax classification: cross-entropy on logits shifted by
/// `tau * log s_j`. Classes with no samples drop out of the normalizer.
pub fn loss_bc(
    o_ens: &Tensor,
    labels: &[usize],
    counts: &ClassCounts,
    tau: f64,
) -> Result<LossGrad> {
    let (b, c) = matrix_dims(o_ens, "logits")?;
    check_labels(labels, b, c)?;
    if let Some(&y) = labels.iter().find(|&&y| counts.get(y) == 0) {
        return Err(Error::InvalidArgument(format!(
            "class {y} appears in the batch but has no sample count"
        )));
    }
    let offsets: Vec<f64> = counts
        .columns(c)
        .into_iter()
        .map(|s| if s == 0 { f64::NEG_INFINITY } else { tau * (s as f64).ln() })
        .collect();
    let mut adjusted = o_ens.clone();
    for row in adjusted.data_mut().chunks_mut(c) {
        for (v, off) in row.iter_mut().zip(&offsets) {
            *v += off;
        }
    }
    let mut value = 0.0;
    for (i, row) in adjusted.data_mut().chunks_mut(c).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + row
                .iter()
                .filter(|v| v.is_finite())
                .map(|v| (v - max).exp())
                .sum::<f64>()
                .ln();
        value += lse - row[labels[i]];
        softmax_in_place(row);
        row[labels[i]] -= 1.0;
    }
    Ok(LossGrad {
        value: value / b as f64,
        grad: adjusted.scale(1.0 / b as f64),
    })
}

/// Task-embedding distillation for current task `t`: mean squared distance
/// between old-model and ensembled-model embeddings of tasks `1..t`,
/// averaged over those tasks. Returns gradients for the ensembled
/// embeddings.
pub fn loss_ted(old: &[Tensor], ens: &[Tensor], t: usize) -> Result<(f64, Vec<Tensor>)> {
    if t <= 1 {
        return Err(Error::InvalidArgument(format!(
            "embedding distillation needs a previous task (t = {t})"
        )));
    }
    if old.len() != t - 1 || ens.len() != t - 1 {
        return Err(Error::Shape(format!(
            "expected {} embeddings per model, got {} and {}",
            t - 1,
            old.len(),
            ens.len()
        )));
    }
    let k = (t - 1) as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(ens.len());
    for (o, e) in old.iter().zip(ens) {
        let n = e.numel() as f64;
        let diff = e.zip_map(o, |a, b| a - b)?;
        value += diff.data().iter().map(|d| d * d).sum::<f64>() / n;
        grads.push(diff.scale(2.0 / (n * k)));
    }
    Ok((value / k, grads))
}

/// Logits distillation on old classes: sigmoid BCE of the ensembled logits
/// against the old model's sigmoid probabilities.
pub fn loss_kd(o_old: &Tensor, o_ens: &Tensor) -> Result<LossGrad> {
    matrix_dims(o_old, "teacher logits")?;
    matrix_dims(o_ens, "student logits")?;
    o_old
        .expect_same_shape(o_ens)
        .map_err(|e| Error::Shape(format!("class sets differ: {e}")))?;
    Ok(bce_soft(o_ens, &o_old.map(sigmoid)))
}

/// Map global labels to divergence-head targets: the `num_new` classes
/// starting at `first_new` become `0..num_new` in order, every earlier
/// class becomes the extra index `num_new`.
pub fn divergence_labels(labels: &[usize], first_new: usize, num_new: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&y| {
            if y < first_new {
                Ok(num_new)
            } else if y < first_new + num_new {
                Ok(y - first_new)
            } else {
                Err(Error::InvalidArgument(format!(
                    "label {y} beyond the current task's classes"
                )))
            }
        })
        .collect()
}

/// Divergence loss: cross-entropy over the current task's classes plus one
/// "old" output. `local_labels` come from [`divergence_labels`].
pub fn loss_div(div_logits: &Tensor, local_labels: &[usize]) -> Result<LossGrad> {
    cross_entropy(div_logits, local_labels)
}

/// Inverse-frequency class weights normalized to mean one:
/// `w_j = C s_j^-gamma / sum_k s_k^-gamma`.
pub fn per_class_weights(counts: &[usize], gamma: f64) -> Result<PerClassWeights> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no classes".into()));
    }
    if let Some(j) = counts.iter().position(|&s| s == 0) {
        return Err(Error::InvalidArgument(format!("class {j} has zero samples")));
    }
    let raw: Vec<f64> = counts.iter().map(|&s| (s as f64).powf(-gamma)).collect();
    let total: f64 = raw.iter().sum();
    let c = counts.len() as f64;
    Ok(PerClassWeights(raw.iter().map(|r| c * r / total).collect()))
}

/// Balanced logits distillation,
/// `-(1/B) sum_b sum_j w_j sigma(o_new/tau) log sigma(o_ens/tau)`, with the
/// gradient taken through the student logits `o_new`. When `conventional` is
/// set the student and teacher swap places inside the product.
pub fn loss_bld(
    o_new: &Tensor,
    o_ens: &Tensor,
    weights: &PerClassWeights,
    tau: f64,
    conventional: bool,
) -> Result<LossGrad> {
    let (b, c) = matrix_dims(o_new, "student logits")?;
    o_new
        .expect_same_shape(o_ens)
        .map_err(|e| Error::Shape(format!("student/teacher mismatch: {e}")))?;
    if weights.0.len() != c {
        return Err(Error::Shape(format!("{} weights for {c} classes", weights.0.len())));
    }
    let bf = b as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(o_new.shape());
    for (idx, ((&n, &e), g)) in o_new
        .data()
        .iter()
        .zip(o_ens.data())
        .zip(grad.data_mut())
        .enumerate()
    {
        let w = weights.0[idx % c];
        let (sn, se) = (sigmoid(n / tau), sigmoid(e / tau));
        if conventional {
            value -= w * se * log_sigmoid(n / tau);
            // d/dn log sigma(n/tau) = (1 - sigma(n/tau)) / tau
            *g = -w * se * (1.0 - sn) / (tau * bf);
        } else {
            let log_se = log_sigmoid(e / tau);
            value -= w * sn * log_se;
            *g = -w * sn * (1.0 - sn) * log_se / (tau * bf);
        }
    }
    Ok(LossGrad {
        value: value / bf,
        grad,
    })
}

/// Feature distillation: Frobenius norm of `z_new - z_ens` per sample,
/// averaged over the batch. The gradient at a zero difference is zero.
pub fn loss_fd(z_new: &Tensor, z_ens: &Tensor) -> Result<LossGrad> {
    z_new
        .expect_same_shape(z_ens)
        .map_err(|e| Error::Shape(format!("feature maps differ: {e}")))?;
    let b = *z_new
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("features need a batch axis".into()))?;
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let per = z_new.numel() / b;
    let diff = z_new.zip_map(z_ens, |a, c| a - c)?;
    let mut grad = diff.clone();
    let mut value = 0.0;
    for g in grad.data_mut().chunks_mut(per) {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        value += norm;
        let scale = if norm > 0.0 { 1.0 / (norm * b as f64) } else { 0.0 };
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok(LossGrad {
        value: value / b as f64,
        grad,
    })
}

/// Raw values of the stage-one loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Parts {
    pub bc: f64,
    pub kd: f64,
    pub div: f64,
    pub aux: f64,
    pub ted: f64,
}

/// Coefficients applied to [`Stage1Parts`], in field order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Weights {
    pub bc: f64,
    pub kd: f64,
    pub div: f64,
    pub aux: f64,
    pub ted: f64,
}

impl Stage1Weights {
    pub fn new(cfg: &LossConfig, alpha: f64) -> Self {
        Self {
            bc: 1.0 - alpha,
            kd: alpha,
            div: cfg.lambda,
            aux: cfg.mu,
            ted: cfg.xi,
        }
    }
}

/// `(1 - alpha) L_bc + alpha L_kd + lambda L_div + mu L_aux + xi L_ted`.
pub fn stage1_loss(parts: &Stage1Parts, cfg: &LossConfig, alpha: f64) -> f64 {
    let w = Stage1Weights::new(cfg, alpha);
    w.bc * parts.bc + w.kd * parts.kd + w.div * parts.div + w.aux * parts.aux + w.ted * parts.ted
}

/// Raw values of the stage-two loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Parts {
    pub bld: f64,
    pub div: f64,
    pub fd: f64,
}

/// `L_bld + lambda L_div + beta L_fd`.
pub fn stage2_loss(parts: &Stage2Parts, cfg: &LossConfig) -> f64 {
    parts.bld + cfg.lambda * parts.div + cfg.beta * parts.fd
}

/// Adapters that evaluate a loss on tape values and record it as a node.
pub mod on_tape {
    use super::*;
    use crate::autograd::{Tape, Var};

    fn record(tape: &mut Tape, input: Var, loss: LossGrad) -> Result<Var> {
        tape.scalar_fn(&[input], loss.value, vec![Some(loss.grad)])
    }

    /// Teacher-side inputs get no gradient slot.
    fn record_with_teacher(tape: &mut Tape, student: Var, teacher: Var, loss: LossGrad) -> Result<Var> {
        tape.scalar_fn(&[student, teacher], loss.value, vec![Some(loss.grad), None])
    }

    pub fn bce(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = binary_cross_entropy(tape.value(logits), labels)?;
        record(tape, logits, l)
    }

    pub fn aux(tape: &mut Tape, o_sup: Var, labels: &[usize]) -> Result<Var> {
        let l = loss_aux(tape.value(o_sup), labels)?;
        record(tape, o_sup, l)
    }

    pub fn bc(tape: &mut Tape, o_ens: Var, labels: &[usize], counts: &ClassCounts, tau: f64) -> Result<Var> {
        let l = loss_bc(tape.value(o_ens), labels, counts, tau)?;
        record(tape, o_ens, l)
    }

    pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = super::cross_entropy(tape.value(logits), labels)?;
        record(tape, logits, l)
    }

    pub fn div(tape: &mut Tape, logits: Var, local_labels: &[usize]) -> Result<Var> {
        let l = loss_div(tape.value(logits), local_labels)?;
        record(tape, logits, l)
    }

    pub fn kd(tape: &mut Tape, o_old: Var, o_ens: Var) -> Result<Var> {
        let l = loss_kd(tape.value(o_old), tape.value(o_ens))?;
        record_with_teacher(tape, o_ens, o_old, l)
    }

    pub fn ted(tape: &mut Tape, old: &[Var], ens: &[Var], t: usize) -> Result<Var> {
        let old_v: Vec<Tensor> = old.iter().map(|&v| tape.value(v).clone()).collect();
        let ens_v: Vec<Tensor> = ens.iter().map(|&v| tape.value(v).clone()).collect();
        let (value, grads) = loss_ted(&old_v, &ens_v, t)?;
        let mut inputs = ens.to_vec();
        inputs.extend_from_slice(old);
        let mut slots: Vec<Option<Tensor>> = grads.into_iter().map(Some).collect();
        slots.extend(old.iter().map(|_| None));
        tape.scalar_fn(&inputs, value, slots)
    }

    pub fn bld(
        tape: &mut Tape,
        o_new: Var,
        o_ens: Var,
        weights: &PerClassWeights,
        tau: f64,
        conventional: bool,
    ) -> Result<Var> {
        let l = loss_bld(tape.value(o_new), tape.value(o_ens), weights, tau, conventional)?;
        record_with_teacher(tape, o_new, o_ens, l)
    }

    pub fn fd(tape: &mut Tape, z_new: Var, z_ens: Var) -> Result<Var> {
        let l = loss_fd(tape.value(z_new), tape.value(z_ens))?;
        record_with_teacher(tape, z_new, z_ens, l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v.to_vec()]).unwrap()
    }

    fn counts(s: &[usize]) -> ClassCounts {
        ClassCounts(s.iter().copied().enumerate().collect())
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn aux_examples() {
        close(loss_aux(&row(&[0.0, 0.0]), &[0]).unwrap().value, 2f64.ln(), 1e-12);
        assert!(loss_aux(&row(&[40.0, -40.0]), &[0]).unwrap().value < 1e-15);
        let one = loss_aux(&row(&[0.3, -1.2]), &[1]).unwrap().value;
        let two = loss_aux(
            &Tensor::from_rows(&[vec![0.3, -1.2], vec![0.3, -1.2]]).unwrap(),
            &[1, 1],
        )
        .unwrap()
        .value;
        close(one, two, 1e-15);
        assert!(loss_aux(&row(&[0.0, 0.0]), &[2]).is_err());
    }

    #[test]
    fn bc_examples() {
        close(loss_bc(&row(&[0.0; 3]), &[0], &counts(&[1, 1, 1]), 1.0).unwrap().value, 3f64.ln(), 1e-12);
        // -log(e / (e + 1))
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        close(loss_bc(&row(&[1.0, 0.0]), &[0], &counts(&[1, 1]), 1.0).unwrap().value, expected, 1e-12);
        close(expected, 0.3133, 1e-4);
        close(loss_bc(&row(&[0.0, 0.0]), &[0], &counts(&[1, 3]), 1.0).unwrap().value, 4f64.ln(), 1e-12);
    }

    #[test]
    fn bc_requires_counts_for_batch_labels() {
        let err = loss_bc(&row(&[0.0, 0.0]), &[1], &counts(&[3]), 1.0).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        // an absent class with no count simply drops out
        let l = loss_bc(&row(&[0.0, 5.0]), &[0], &counts(&[2]), 1.0).unwrap();
        close(l.value, 0.0, 1e-12);
        assert_eq!(l.grad.data()[1], 0.0);
    }

    #[test]
    fn ted_examples() {
        let e = row(&[0.4, -0.3]);
        assert_eq!(loss_ted(&[e.clone()], &[e.clone()], 2).unwrap().0, 0.0);
        close(loss_ted(&[row(&[1.0, 0.0])], &[row(&[0.0, 0.0])], 2).unwrap().0, 0.5, 1e-15);
        let (base, _) = loss_ted(&[row(&[1.0, 2.0])], &[row(&[0.5, -1.0])], 2).unwrap();
        let (scaled, _) = loss_ted(&[row(&[3.0, 6.0])], &[row(&[1.5, -3.0])], 2).unwrap();
        close(scaled, 9.0 * base, 1e-12);
        assert!(loss_ted(&[], &[], 1).is_err());
        assert!(loss_ted(&[e.clone()], &[e], 3).is_err());
    }

    #[test]
    fn kd_examples() {
        close(loss_kd(&row(&[0.0]), &row(&[0.0])).unwrap().value, 2f64.ln(), 1e-12);
        assert!(loss_kd(&row(&[40.0]), &row(&[40.0])).unwrap().value < 1e-15);
        let g = loss_kd(&row(&[0.7, -0.2]), &row(&[0.7, -0.2])).unwrap().grad;
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
        assert!(loss_kd(&row(&[0.0]), &row(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn div_examples() {
        close(loss_div(&row(&[0.0; 4]), &[2]).unwrap().value, 4f64.ln(), 1e-12);
        assert!(loss_div(&row(&[-50.0, -50.0, 50.0]), &[2]).unwrap().value < 1e-15);
        assert_eq!(divergence_labels(&[0, 5, 6, 7, 3], 5, 3).unwrap(), vec![3, 0, 1, 2, 3]);
        assert!(divergence_labels(&[8], 5, 3).is_err());
    }

    #[test]
    fn per_class_weight_examples() {
        assert_eq!(per_class_weights(&[4, 4, 4], 1.0).unwrap().0, vec![1.0; 3]);
        let w = per_class_weights(&[1, 3], 1.0).unwrap().0;
        close(w[0], 1.5, 1e-12);
        close(w[1], 0.5, 1e-12);
        assert_eq!(per_class_weights(&[1, 30, 7], 0.0).unwrap().0, vec![1.0; 3]);
        assert!(per_class_weights(&[1, 0], 1.0).is_err());
    }

    #[test]
    fn bld_examples() {
        let w = PerClassWeights(vec![1.0]);
        close(loss_bld(&row(&[0.0]), &row(&[0.0]), &w, 1.0, false).unwrap().value, -(0.5 * 0.5f64.ln()), 1e-12);
        assert!(loss_bld(&row(&[0.0]), &row(&[60.0]), &w, 1.0, false).unwrap().value < 1e-20);
        let a = loss_bld(&row(&[0.3, -0.1]), &row(&[-1.0, 2.0]), &PerClassWeights(vec![0.5, 1.5]), 1.0, false).unwrap();
        let b = loss_bld(&row(&[0.3, -0.1]), &row(&[-1.0, 2.0]), &PerClassWeights(vec![1.0, 3.0]), 1.0, false).unwrap();
        close(b.value, 2.0 * a.value, 1e-12);
    }

    #[test]
    fn fd_examples() {
        let z = Tensor::new(&[1, 2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let zero = Tensor::zeros(&[1, 2, 2]);
        close(loss_fd(&z, &zero).unwrap().value, 5.0, 1e-12);
        assert_eq!(loss_fd(&z, &z).unwrap().value, 0.0);
        close(loss_fd(&z.scale(-2.0), &zero).unwrap().value, 10.0, 1e-12);
        assert!(loss_fd(&z, &Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn composition_examples() {
        let cfg = LossConfig::default();
        assert_eq!(stage1_loss(&Stage1Parts::default(), &cfg, 0.5), 0.0);
        let ones = Stage1Parts { bc: 1.0, kd: 1.0, div: 1.0, aux: 1.0, ted: 1.0 };
        close(stage1_loss(&ones, &cfg, 0.5), 2.2, 1e-12);
        let no_ted = LossConfig { xi: 0.0, ..cfg };
        close(stage1_loss(&ones, &no_ted, 0.5), 2.1, 1e-12);
        assert_eq!(stage2_loss(&Stage2Parts::default(), &cfg), 0.0);
        let ones = Stage2Parts { bld: 1.0, div: 1.0, fd: 1.0 };
        close(stage2_loss(&ones, &cfg), 2.1, 1e-12);
        close(stage2_loss(&ones, &LossConfig { beta: 0.0, ..cfg }), 1.1, 1e-12);
    }

    #[test]
    fn alpha_follows_old_class_fraction() {
        let cfg = LossConfig::default();
        close(cfg.alpha_for(10, 20), 0.5, 1e-15);
        let fixed = LossConfig { alpha: Some(0.3), ..cfg };
        assert_eq!(fixed.alpha_for(10, 20), 0.3);
        assert!(LossConfig { tau: 0.0, ..cfg }.validate().is_err());
        assert!(LossConfig { xi: -1.0, ..cfg }.validate().is_err());
    }

    fn logits_strategy(b: usize, c: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-5.0f64..5.0, b * c).prop_map(move |v| Tensor::new(&[b, c], v).unwrap())
    }

    proptest! {
        #[test]
        fn bc_with_uniform_counts_is_plain_cross_entropy(o in logits_strategy(3, 4), y in prop::collection::vec(0usize..4, 3), s in 1usize..50) {
            let bc = loss_bc(&o, &y, &counts(&[s; 4]), 1.0).unwrap().value;
            // independent route: -log softmax by direct summation
            let mut ce = 0.0;
            for (i, &label) in y.iter().enumerate() {
                let r = o.row(i);
                let z: f64 = r.iter().map(|v| v.exp()).sum();
                ce -= (r[label].exp() / z).ln();
            }
            prop_assert!((bc - ce / 3.0).abs() < 1e-12);
        }

        #[test]
        fn bc_is_shift_invariant(o in logits_strategy(2, 5), y in prop::collection::vec(0usize..5, 2), shift in -20.0f64..20.0) {
            let c = counts(&[1, 4, 9, 2, 30]);
            let a = loss_bc(&o, &y, &c, 1.0).unwrap().value;
            let b = loss_bc(&o.map(|v| v + shift), &y, &c, 1.0).unwrap().value;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn losses_are_non_negative(o in logits_strategy(2, 3), t in logits_strategy(2, 3), y in prop::collection::vec(0usize..3, 2)) {
            prop_assert!(loss_aux(&o, &y).unwrap().value >= 0.0);
            prop_assert!(loss_bc(&o, &y, &counts(&[1, 5, 2]), 1.0).unwrap().value >= 0.0);
            prop_assert!(loss_ted(&[t.clone()], &[o.clone()], 2).unwrap().0 >= 0.0);
            prop_assert!(loss_fd(&o, &t).unwrap().value >= 0.0);
            let w = per_class_weights(&[3, 1, 8], 1.0).unwrap();
            prop_assert!(loss_bld(&o, &t, &w, 1.0, false).unwrap().value >= 0.0);
            prop_assert!(loss_kd(&t, &o).unwrap().value >= 0.0);
        }

        #[test]
        fn stage_compositions_are_exact(p in prop::array::uniform5(0.0f64..10.0), a in 0.0f64..1.0, l in 0.0f64..2.0, m in 0.0f64..2.0, x in 0.0f64..2.0, b in 0.0f64..2.0) {
            let cfg = LossConfig { lambda: l, mu: m, xi: x, beta: b, ..LossConfig::default() };
            let parts = Stage1Parts { bc: p[0], kd: p[1], div: p[2], aux: p[3], ted: p[4] };
            let hand = (1.0 - a) * p[0] + a * p[1] + l * p[2] + m * p[3] + x * p[4];
            prop_assert!((stage1_loss(&parts, &cfg, a) - hand).abs() <= 1e-12 * (1.0 + hand.abs()));
            let parts2 = Stage2Parts { bld: p[0], div: p[1], fd: p[2] };
            let hand2 = p[0] + l * p[1] + b * p[2];
            prop_assert!((stage2_loss(&parts2, &cfg) - hand2).abs() <= 1e-12 * (1.0 + hand2.abs()));
        }
    }
}
