//! Reverse-mode differentiation over a fixed operator set.
//!
//! Operations are recorded in execution order, so node order is already a
//! topological order and the backward pass is a single reverse sweep.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies one dropout draw for exact replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub epoch: u64,
    pub batch: u64,
}

impl DropoutKey {
    fn rng(&self) -> ChaCha8Rng {
        let mut bytes = [0u8; 32];
        for (chunk, word) in bytes
            .chunks_exact_mut(8)
            .zip([self.seed, self.layer, self.epoch, self.batch])
        {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        ChaCha8Rng::from_seed(bytes)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    RowScale(Var, Var),
    SegmentSum(Var, Arc<[usize]>),
    GatherRows(Var, Arc<[usize]>),
    Dropout(Var, Vec<f64>),
    Identity(Var),
    Concat(Vec<Var>, usize),
    Mean(Var),
    Bce(Var, Vec<f64>, Vec<f64>),
    BceLogits(Var, Vec<f64>, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Registered parameters in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// A differentiable leaf registered under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.leaf(value);
        self.params.push((name.into(), v));
        v
    }

    /// A differentiable leaf that is not a named parameter (e.g. inputs under analysis).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(&Tensor, &Tensor)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        Ok((ta, tb))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same_shape("add", a, b)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same_shape("sub", a, b)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same_shape("mul", a, b)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds the vector `bias` (numel = cols) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let cols = tx.cols();
        if tb.numel() != cols {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", tx.shape(), tb.shape()),
            ));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(x, bias), &[x, bias])
    }

    /// `scale * x + shift`, with constant scale and shift.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| scale * v + shift).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("affine", out, Op::Affine(x, scale), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Scales row `r` of `x` by the scalar `s[r]`; `s` has one value per row.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.numel() != tx.rows() {
            return Err(Error::shape(
                "row_scale",
                format!("{:?} scaled by {:?}", tx.shape(), ts.shape()),
            ));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            let f = ts.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        self.push("row_scale", out, Op::RowScale(x, s), &[x, s])
    }

    /// Sums rows of `values` into `num_segments` output rows: row `k` goes to
    /// output row `segment_ids[k]`. Empty segments are zero.
    pub fn segment_sum(
        &mut self,
        values: Var,
        segment_ids: Arc<[usize]>,
        num_segments: usize,
    ) -> Result<Var> {
        let tv = self.value(values);
        let cols = tv.cols();
        if segment_ids.len() != tv.rows() {
            return Err(Error::shape(
                "segment_sum",
                format!("{} ids for {} rows", segment_ids.len(), tv.rows()),
            ));
        }
        let mut out = Tensor::zeros(&[num_segments, cols]);
        for (k, &s) in segment_ids.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::shape(
                    "segment_sum",
                    format!("segment id {s} >= {num_segments}"),
                ));
            }
            let src = tv.row(k);
            for (o, v) in out.row_mut(s).iter_mut().zip(src) {
                *o += v;
            }
        }
        self.push(
            "segment_sum",
            out,
            Op::SegmentSum(values, segment_ids),
            &[values],
        )
    }

    /// Selects rows `indices` of `src` (repeats allowed).
    pub fn gather_rows(&mut self, src: Var, indices: Arc<[usize]>) -> Result<Var> {
        let ts = self.value(src);
        let (rows, cols) = (ts.rows(), ts.cols());
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            if i >= rows {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {i} out of {rows}"),
                ));
            }
            data.extend_from_slice(ts.row(i));
        }
        let out = Tensor::matrix(indices.len(), cols, data)?;
        self.push("gather_rows", out, Op::GatherRows(src, indices), &[src])
    }

    /// Inverted dropout. With `training == false` this records an identity node.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, key: DropoutKey) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout probability {p} not in [0,1)"
            )));
        }
        if !training || p == 0.0 {
            let out = self.value(x).clone();
            return self.push("dropout", out, Op::Identity(x), &[x]);
        }
        let mut rng = key.rng();
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("dropout", out, Op::Dropout(x, mask), &[x])
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat", "need >= 1 part and axis in {0,1}"));
        }
        let first = self.value(parts[0]);
        let (rows0, cols0) = (first.rows(), first.cols());
        let out = if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let t = self.value(p);
                if t.cols() != cols0 {
                    return Err(Error::shape("concat", "column count differs on axis 0"));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, cols0, data)?
        } else {
            let mut total = 0;
            for &p in parts {
                let t = self.value(p);
                if t.rows() != rows0 {
                    return Err(Error::shape("concat", "row count differs on axis 1"));
                }
                total += t.cols();
            }
            let mut data = Vec::with_capacity(rows0 * total);
            for r in 0..rows0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::matrix(rows0, total, data)?
        };
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Mean over all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Elementwise negated log-likelihood of `targets` under probabilities `p`,
    /// each term multiplied by `weights[k]`. Probabilities are clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
    pub fn binary_cross_entropy(
        &mut self,
        p: Var,
        targets: Vec<f64>,
        weights: Option<Vec<f64>>,
    ) -> Result<Var> {
        let tp = self.value(p);
        let n = tp.numel();
        let weights = weights.unwrap_or_else(|| vec![1.0; n]);
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!(
                    "{n} probabilities, {} targets, {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let data = tp
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&pv, &t), &w)| clamped_bce(pv, t, w))
            .collect();
        let out = Tensor::new(tp.shape().to_vec(), data)?;
        self.push(
            "binary_cross_entropy",
            out,
            Op::Bce(p, targets, weights),
            &[p],
        )
    }

    /// `binary_cross_entropy(sigmoid(z), ..)` fused on logits `z`.
    ///
    /// Values equal the unfused form up to rounding (they are computed from
    /// `z` in log space, which is more accurate for large `|z|`). The gradient is
    /// `w · (σ(z) − t)` everywhere: exact while the clamp is inactive, and
    /// still informative where the unfused form saturates to zero gradient.
    pub fn binary_cross_entropy_with_logits(
        &mut self,
        z: Var,
        targets: Vec<f64>,
        weights: Option<Vec<f64>>,
    ) -> Result<Var> {
        let tz = self.value(z);
        let n = tz.numel();
        let weights = weights.unwrap_or_else(|| vec![1.0; n]);
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "binary_cross_entropy_with_logits",
                format!(
                    "{n} logits, {} targets, {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let data = tz
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&zv, &t), &w)| clamped_bce_logit(zv, t, w))
            .collect();
        let out = Tensor::new(tz.shape().to_vec(), data)?;
        self.push(
            "binary_cross_entropy_with_logits",
            out,
            Op::BceLogits(z, targets, weights),
            &[z],
        )
    }

    /// Backward pass from a single-element output with seed 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let t = self.value(output);
        if t.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", t.shape()),
            ));
        }
        self.backward_with_seed(output, Tensor::new(t.shape().to_vec(), vec![1.0])?)
    }

    /// Backward pass with an explicit upstream gradient for `output`.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if !seed.same_shape(self.value(output)) {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed {:?} for output {:?}",
                    seed.shape(),
                    self.value(output).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let g_row = &g.data()[i * n..(i + 1) * n];
                        for p in 0..k {
                            let b_row = &tb.data()[p * n..(p + 1) * n];
                            da[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let at = ta.transpose();
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let neg = g.data().iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), neg)?);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), d)?);
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let tb = self.value(*bias);
                    let mut db = vec![0.0; tb.numel()];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Affine(x, scale) => {
                let d = g.data().iter().map(|v| scale * v).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::RowScale(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        let f = ts.data()[r];
                        dx.row_mut(r).iter_mut().for_each(|v| *v *= f);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*s) {
                    let ds = (0..tx.rows())
                        .map(|r| g.row(r).iter().zip(tx.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, Tensor::new(ts.shape().to_vec(), ds)?);
                }
            }
            Op::SegmentSum(values, ids) => {
                let tv = self.value(*values);
                let cols = tv.cols();
                let mut d = Vec::with_capacity(ids.len() * cols);
                for &s in ids.iter() {
                    d.extend_from_slice(g.row(s));
                }
                self.accumulate(grads, *values, Tensor::new(tv.shape().to_vec(), d)?);
            }
            Op::GatherRows(src, idx) => {
                let ts = self.value(*src);
                let mut d = Tensor::zeros(ts.shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *src, d);
            }
            Op::Dropout(x, mask) => {
                let d = g.data().iter().zip(mask).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Identity(x) => self.accumulate(grads, *x, g.clone()),
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let tp = self.value(p);
                        let n = tp.numel();
                        let d = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        self.accumulate(grads, p, Tensor::new(tp.shape().to_vec(), d)?);
                    }
                } else {
                    let mut col = 0;
                    for &p in parts {
                        let tp = self.value(p);
                        let c = tp.cols();
                        let mut d = Vec::with_capacity(tp.numel());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[col..col + c]);
                        }
                        col += c;
                        self.accumulate(grads, p, Tensor::new(tp.shape().to_vec(), d)?);
                    }
                }
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let v = g.item() / tx.numel() as f64;
                self.accumulate(grads, *x, Tensor::filled(tx.shape(), v));
            }
            Op::Bce(p, targets, weights) => {
                let tp = self.value(*p);
                let d = tp
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .zip(g.data())
                    .map(|(((&pv, &t), &w), &gv)| {
                        if pv <= PROB_CLAMP || pv >= 1.0 - PROB_CLAMP {
                            0.0
                        } else {
                            -gv * w * (t / pv - (1.0 - t) / (1.0 - pv))
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, Tensor::new(tp.shape().to_vec(), d)?);
            }
            Op::BceLogits(z, targets, weights) => {
                let tz = self.value(*z);
                let d = tz
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .zip(g.data())
                    .map(|(((&zv, &t), &w), &gv)| gv * w * (sigmoid(zv) - t))
                    .collect();
                self.accumulate(grads, *z, Tensor::new(tz.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

impl Tape {
    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn clamped_bce(p: f64, t: f64, w: f64) -> f64 {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -w * (t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
}

/// `clamped_bce(sigmoid(z), ..)` evaluated from `z` directly, so that
/// `ln(1 − p)` keeps full precision when `p` rounds towards 1.
fn clamped_bce_logit(z: f64, t: f64, w: f64) -> f64 {
    let (lo, hi) = (PROB_CLAMP.ln(), (-PROB_CLAMP).ln_1p());
    let log_p = (-softplus(-z)).clamp(lo, hi);
    let log_q = (-softplus(z)).clamp(lo, hi);
    -w * (t * log_p + (1.0 - t) * log_q)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn segment_sum_example() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(3, 1, &[1.0, 2.0, 3.0]));
        let s = tape.segment_sum(v, Arc::from(vec![0, 0, 1]), 2).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 3.0]);
    }

    #[test]
    fn segment_sum_scatters_upstream_gradient() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let s = tape.segment_sum(v, Arc::from(vec![1, 0, 1, 2]), 3).unwrap();
        let seed = t(3, 2, &[10.0, 20.0, 30.0, 40.0, 50.0, 60.0]);
        let g = tape.backward_with_seed(s, seed).unwrap();
        assert_eq!(
            g.get(v).unwrap().data(),
            &[30.0, 40.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0]
        );
    }

    #[test]
    fn segment_sum_rejects_bad_ids() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(2, 1, &[1.0, 2.0]));
        assert!(tape.segment_sum(v, Arc::from(vec![0, 5]), 2).is_err());
        assert!(tape.segment_sum(v, Arc::from(vec![0]), 2).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 2, &[1.0; 4]));
        let b = tape.leaf(t(3, 1, &[1.0; 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_is_raised() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1e308));
        assert!(matches!(
            tape.affine(a, 10.0, 0.0),
            Err(Error::NonFinite { op: "affine" })
        ));
    }

    #[test]
    fn eval_dropout_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 2, &[1.0, -2.0, 3.0, 4.0]));
        let y = tape.dropout(x, 0.5, false, DropoutKey::default()).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let seed = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let g = tape.backward_with_seed(y, seed.clone()).unwrap();
        assert_eq!(g.get(x).unwrap(), &seed);
    }

    #[test]
    fn dropout_replays_for_same_key() {
        let key = DropoutKey {
            seed: 7,
            layer: 1,
            epoch: 3,
            batch: 2,
        };
        let run = |key| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::filled(&[50, 4], 1.0));
            let y = tape.dropout(x, 0.5, true, key).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(key), run(key));
        assert_ne!(run(key), run(DropoutKey { batch: 3, ..key }));
        let out = run(key);
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x * x + x  => dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.5, 0.5]));
        let l = tape.binary_cross_entropy(p, vec![1.0, 0.0], None).unwrap();
        let m = tape.mean(l).unwrap();
        assert!((tape.value(m).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn fused_bce_matches_unfused() {
        let z = vec![-3.0, -0.2, 0.0, 0.7, 4.0];
        let targets = vec![1.0, 0.0, 1.0, 1.0, 0.0];
        let weights = Some(vec![2.0, 1.0, 1.0, 0.5, 1.0]);

        let mut a = Tape::new();
        let za = a.leaf(Tensor::vector(z.clone()));
        let pa = a.sigmoid(za).unwrap();
        let la = a
            .binary_cross_entropy(pa, targets.clone(), weights.clone())
            .unwrap();
        let la = a.mean(la).unwrap();
        let ga = a.backward(la).unwrap();

        let mut b = Tape::new();
        let zb = b.leaf(Tensor::vector(z));
        let lb = b
            .binary_cross_entropy_with_logits(zb, targets, weights)
            .unwrap();
        let lb = b.mean(lb).unwrap();
        let gb = b.backward(lb).unwrap();

        assert!((a.value(la).item() - b.value(lb).item()).abs() < 1e-14);
        assert!(ga.get(za).unwrap().max_abs_diff(gb.get(zb).unwrap()) < 1e-15);
    }

    #[test]
    fn fused_bce_keeps_gradient_when_saturated() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::vector(vec![-60.0]));
        let l = tape
            .binary_cross_entropy_with_logits(z, vec![1.0], None)
            .unwrap();
        // value is capped by the clamp, the gradient still pulls towards the target
        assert!((tape.value(l).item() + PROB_CLAMP.ln()).abs() < 1e-9);
        let g = tape.backward(l).unwrap();
        assert!((g.get(z).unwrap().item() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn concat_columns_then_rows() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 1, &[1.0, 2.0]));
        let b = tape.leaf(t(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let d = tape.concat(&[b, b], 0).unwrap();
        assert_eq!(tape.value(d).shape(), &[4, 2]);
    }
}
