//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Tape`] records every operation in evaluation order. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients for every node that depends on a trainable leaf.
//! Leaves created through [`Tape::param`] are remembered by name so the
//! optimizer can map gradients back onto model parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-6;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    Normalize { x: Var, rstd: Vec<f64> },
    Gelu(Var),
    ConcatLast(Vec<Var>),
    SliceLast { x: Var, start: usize },
    ExpandLeading(Var),
    /// Scalar-valued function with precomputed local gradients per input.
    Scalar { inputs: Vec<Var>, grads: Vec<Option<Tensor>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    no_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    by_param: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    /// Parameter gradients keyed by canonical parameter name.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.by_param
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which nothing requires a gradient; used for teachers and
    /// evaluation.
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn is_no_grad(&self) -> bool {
        self.no_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free-standing leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a named model parameter. Frozen parameters and
    /// no-grad tapes produce constants.
    pub fn param(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        let trainable = trainable && !self.no_grad;
        let v = self.push(value.clone(), Op::Leaf, trainable);
        if trainable {
            self.params.push((name.to_string(), v));
        }
        v
    }

    /// Names of every trainable parameter bound on this tape.
    pub fn bound_params(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    fn trailing_width(&self, x: Var, b: Var) -> Result<usize> {
        let xs = self.value(x).shape();
        let bs = self.value(b).shape();
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::Shape(format!(
                "{bs:?} is not a trailing shape of {xs:?}"
            )));
        }
        Ok(self.value(b).numel())
    }

    /// `x + b` where `b`'s shape is a suffix of `x`'s shape.
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let w = self.trailing_width(x, b)?;
        let mut value = self.value(x).clone();
        let bias = self.value(b).data();
        for chunk in value.data_mut().chunks_mut(w) {
            for (v, bb) in chunk.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddTrailing(x, b), rg))
    }

    /// `x * g` where `g`'s shape is a suffix of `x`'s shape.
    pub fn mul_trailing(&mut self, x: Var, g: Var) -> Result<Var> {
        let w = self.trailing_width(x, g)?;
        let mut value = self.value(x).clone();
        let gain = self.value(g).data();
        for chunk in value.data_mut().chunks_mut(w) {
            for (v, gg) in chunk.iter_mut().zip(gain) {
                *v *= gg;
            }
        }
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(value, Op::MulTrailing(x, g), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// `x[..., k] @ w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::Shape(format!("matmul {xs:?} @ {ws:?}")));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            0.0,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(x, w), rg))
    }

    /// Batched `a[b, m, k] @ b[b, k, n]`, or `a @ b^T` with `b[b, n, k]`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.value(a).shape();
        let bs = self.value(b).shape();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(Error::Shape(format!("bmm {as_:?} @ {bs:?}")));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (bk, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if bk != k {
            return Err(Error::Shape(format!("bmm inner dims {as_:?} @ {bs:?}")));
        }
        let mut out = vec![0.0; batch * m * n];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::Bmm { a, b, trans_b },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = permute_tensor(self.value(x), perm)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let w = *xv.shape().last().unwrap_or(&1);
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(w) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Zero-mean, unit-variance normalization over the last axis.
    pub fn normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let w = *xv.shape().last().unwrap_or(&1);
        let mut value = xv.clone();
        let mut rstd = Vec::with_capacity(value.numel() / w.max(1));
        for row in value.data_mut().chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(x);
        self.push(value, Op::Normalize { x, rstd }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            let u = GELU_K * (v + GELU_C * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Concatenate along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != *lead {
                return Err(Error::Shape(format!("concat {lead:?} vs {s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatLast(xs.to_vec()), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let w = *s.last().ok_or_else(|| Error::Shape("slice of scalar".into()))?;
        if start > end || end > w {
            return Err(Error::Shape(format!("slice {start}..{end} of width {w}")));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(w)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = end - start;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SliceLast { x, start }, rg))
    }

    /// Repeat `x` along a new leading axis of length `n`.
    pub fn expand_leading(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(xv.shape());
        let data = xv.data().repeat(n);
        let rg = self.rg(x);
        self.push(
            Tensor::new(&shape, data).expect("expand shape"),
            Op::ExpandLeading(x),
            rg,
        )
    }

    /// Record a scalar-valued function of `inputs` whose local gradients were
    /// computed alongside its value. `grads[i]` must match `inputs[i]`'s
    /// shape; `None` marks an input the function does not differentiate.
    pub fn scalar_fn(
        &mut self,
        inputs: &[Var],
        value: f64,
        grads: Vec<Option<Tensor>>,
    ) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::Shape("one gradient slot per input".into()));
        }
        for (&x, g) in inputs.iter().zip(&grads) {
            if let Some(g) = g {
                self.value(x).expect_same_shape(g)?;
            }
        }
        let rg = inputs
            .iter()
            .zip(&grads)
            .any(|(&x, g)| g.is_some() && self.rg(x));
        Ok(self.push(
            Tensor::scalar(value),
            Op::Scalar {
                inputs: inputs.to_vec(),
                grads,
            },
            rg,
        ))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::Shape("weighted_sum expects scalars".into()));
            }
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::Shape("weighted_sum of nothing".into()))
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let by_param = self
            .params
            .iter()
            .filter_map(|(name, v)| grads[v.0].clone().map(|g| (name.clone(), g)))
            .collect();
        Ok(Gradients {
            by_node: grads,
            by_param,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::AddTrailing(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*b) {
                    let bv = self.value(*b);
                    let mut gb = Tensor::zeros(bv.shape());
                    for chunk in g.data().chunks(bv.numel()) {
                        for (acc, v) in gb.data_mut().iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MulTrailing(x, gain) => {
                let gv = self.value(*gain);
                let w = gv.numel();
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for chunk in gx.data_mut().chunks_mut(w) {
                        for (v, s) in chunk.iter_mut().zip(gv.data()) {
                            *v *= s;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*gain) {
                    let xv = self.value(*x);
                    let mut gg = Tensor::zeros(gv.shape());
                    for (gc, xc) in g.data().chunks(w).zip(xv.data().chunks(w)) {
                        for ((acc, a), b) in gg.data_mut().iter_mut().zip(gc).zip(xc) {
                            *acc += a * b;
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c)),
            Op::MatMul(x, w) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.numel() / k;
                if self.rg(*x) {
                    let mut gx = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, wv.data(), true, &mut gx, 0.0);
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), gx)?);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm_at_b(m, k, n, xv.data(), g.data(), &mut gw);
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), gw)?);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.shape()[2];
                if self.rg(*a) {
                    // dA = G @ op(B)^T
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape(), ga)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = G^T @ A
                            gemm_at_b(m, n, k, gi, ai, out);
                        } else {
                            // B is [k, n]: dB = A^T @ G
                            gemm_at_b(m, k, n, ai, gi, out);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), gb)?);
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape)?);
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                self.accumulate(grads, *x, permute_tensor(g, &inverse)?);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let w = *y.shape().last().unwrap_or(&1);
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gv, yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Normalize { x, rstd } => {
                let xhat = &node.value;
                let w = *xhat.shape().last().unwrap_or(&1);
                let mut gx = g.clone();
                for ((gr, hr), r) in gx
                    .data_mut()
                    .chunks_mut(w)
                    .zip(xhat.data().chunks(w))
                    .zip(rstd)
                {
                    let mean_g = gr.iter().sum::<f64>() / w as f64;
                    let mean_gh =
                        gr.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for (gv, hv) in gr.iter_mut().zip(hr) {
                        *gv = r * (*gv - mean_g - hv * mean_gh);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, v| {
                    let u = GELU_K * (v + GELU_C * v * v * v);
                    let t = u.tanh();
                    let du = GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                })?;
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatLast(xs) => {
                let total = *g.shape().last().unwrap();
                let mut offset = 0;
                for &x in xs {
                    let xv = self.value(x);
                    let w = *xv.shape().last().unwrap();
                    if self.rg(x) {
                        let data: Vec<f64> = g
                            .data()
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        self.accumulate(grads, x, Tensor::new(xv.shape(), data)?);
                    }
                    offset += w;
                }
            }
            Op::SliceLast { x, start } => {
                let xv = self.value(*x);
                let w = *xv.shape().last().unwrap();
                let sw = *g.shape().last().unwrap();
                let mut gx = Tensor::zeros(xv.shape());
                for (dst, src) in gx.data_mut().chunks_mut(w).zip(g.data().chunks(sw)) {
                    dst[*start..start + sw].copy_from_slice(src);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ExpandLeading(x) => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for chunk in g.data().chunks(xv.numel()) {
                    for (acc, v) in gx.data_mut().iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Scalar { inputs, grads: local } => {
                let upstream = g.item();
                for (&x, lg) in inputs.iter().zip(local) {
                    if let Some(lg) = lg {
                        self.accumulate(grads, x, lg.scale(upstream));
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn permute_tensor(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let shape = x.shape();
    let nd = shape.len();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Shape(format!("bad permutation {perm:?} for {shape:?}")));
    }
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return Tensor::new(&out_shape, out);
    }
    // Innermost axis handled in a tight loop.
    let inner = out_shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        let mut axis = nd - 1;
        loop {
            if axis == 0 {
                return Tensor::new(&out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// `c = a(m x k) @ b(k x n) + beta * c`, with optional transposes of the
/// stored operands (`a` stored as `k x m` when `ta`, `b` as `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertion above guarantees every index touched by
    // the strides lies inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c(k x n) = a(m x k)^T @ b(m x n)`.
fn gemm_at_b(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(k, m, n, a, true, b, false, c, 0.0);
}
