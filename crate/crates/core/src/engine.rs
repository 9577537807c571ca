//! Dense `f64` tensors with a recording tape for reverse-mode gradients.
//!
//! Operations are appended to a [`Tape`] in execution order, so the tape is
//! a topological order of the forward graph; [`Tape::backward`] walks it
//! once in reverse and accumulates into the [`ParamStore`] gradients.
//! Every op checks its output for NaN/Inf.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::IGNORE;
use crate::rng::SplitMix64;

/// Additive logit applied to masked softmax entries.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(&'static str),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("backward called without a recorded tape")]
    NoTape,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("id {id} out of range for table of {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, EngineError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(EngineError::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EngineError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), EngineError> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(EngineError::NonFiniteValue(op))
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Plain matrix product on raw tensors, outside any tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, EngineError> {
    let (m, k) = (a.rows(), a.cols());
    if b.shape.len() != 2 || b.shape[0] != k {
        return Err(EngineError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    gemm_nn(&a.data, &b.data, &mut out, m, k, n);
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, EngineError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(EngineError::DuplicateName(name));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Embedding {
        table: ParamId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<i64>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

/// One recorded operation: how it was computed and what it produced.
#[derive(Debug, Clone)]
struct TapeNode {
    op: Op,
    value: Tensor,
}

/// Records a forward computation for later differentiation.
///
/// A tape created with [`Tape::no_grad`] still evaluates every op but keeps
/// no backward information, and `backward` on it fails with `NoTape`.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    recording: bool,
    param_vars: HashMap<ParamId, Var>,
    rng: SplitMix64,
}

impl Tape {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            param_vars: HashMap::new(),
            rng: SplitMix64::new(seed),
        }
    }

    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new(0)
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
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

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var, EngineError> {
        check_finite(name, &value.data)?;
        let op = if self.recording { op } else { Op::Input };
        self.nodes.push(TapeNode { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var, EngineError> {
        self.push(Op::Input, t, "input")
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let op = if self.recording { Op::Param(id) } else { Op::Input };
        self.nodes.push(TapeNode {
            op,
            value: store.get(id).value.clone(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> EngineError {
        EngineError::ShapeMismatch {
            op,
            lhs: self.value(a).shape.clone(),
            rhs: self.value(b).shape.clone(),
        }
    }

    /// `[m,k] x [k,n]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let out = matmul(self.value(a), self.value(b)).map_err(|_| self.mismatch("matmul", a, b))?;
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    /// `[m,k] x [n,k]^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        if bv.shape.len() != 2 || bv.cols() != k {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let n = bv.shape[0];
        let mut out = vec![0.0; m * n];
        gemm_nt(&av.data, &bv.data, &mut out, m, k, n);
        self.push(Op::MatMulBt(a, b), Tensor::new(vec![m, n], out)?, "matmul_bt")
    }

    /// Elementwise sum; `b` may match only the trailing dims of `a`, in
    /// which case it is broadcast over the leading ones.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let (av, bv) = (self.value(a), self.value(b));
        let ok = bv.shape.len() <= av.shape.len() && av.shape.ends_with(&bv.shape);
        if !ok || bv.is_empty() {
            return Err(self.mismatch("add", a, b));
        }
        let n = bv.len();
        let data: Vec<f64> = av.data.iter().enumerate().map(|(i, x)| x + bv.data[i % n]).collect();
        let out = Tensor::new(av.shape.clone(), data)?;
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, EngineError> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape.clone(), xv.data.iter().map(|v| v * s).collect())?;
        self.push(Op::Scale(x, s), out, "scale")
    }

    /// Gathers rows of a `[rows, d]` parameter table.
    pub fn embedding(&mut self, store: &ParamStore, table: ParamId, ids: &[usize]) -> Result<Var, EngineError> {
        let t = &store.get(table).value;
        let (rows, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(EngineError::IdOutOfRange { id, rows });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            out,
            "embedding",
        )
    }

    /// Normalizes each row over the last dimension, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, EngineError> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).shape != [d] || self.value(bias).shape != [d] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape.clone(), out)?;
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
            "layer_norm",
        )
    }

    /// Row-wise softmax over the last dimension. `key_valid[j] == false`
    /// adds [`MASK_VALUE`] to column `j`; a row with no valid column is all
    /// zeros.
    pub fn softmax(&mut self, x: Var, key_valid: Option<&[bool]>) -> Result<Var, EngineError> {
        let xv = self.value(x);
        let c = xv.cols();
        if let Some(mask) = key_valid {
            if mask.len() != c {
                return Err(EngineError::ShapeMismatch {
                    op: "softmax",
                    lhs: xv.shape.clone(),
                    rhs: vec![mask.len()],
                });
            }
        }
        let any_valid = key_valid.is_none_or(|m| m.iter().any(|&v| v));
        let mut out = vec![0.0; xv.len()];
        if any_valid && c > 0 {
            for r in 0..xv.rows() {
                let row = xv.row(r);
                let shifted: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| match key_valid {
                        Some(m) if !m[j] => v + MASK_VALUE,
                        _ => v,
                    })
                    .collect();
                let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let o = &mut out[r * c..(r + 1) * c];
                let mut sum = 0.0;
                for (ov, s) in o.iter_mut().zip(&shifted) {
                    *ov = (s - max).exp();
                    sum += *ov;
                }
                for ov in o.iter_mut() {
                    *ov /= sum;
                }
            }
        }
        let out = Tensor::new(xv.shape.clone(), out)?;
        self.push(Op::Softmax(x), out, "softmax")
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var, EngineError> {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(xv.shape.clone(), data)?;
        self.push(Op::Gelu(x), out, "gelu")
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)`. Identity
    /// when `training` is false or `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool) -> Result<Var, EngineError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(EngineError::InvalidRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let scale: Vec<f64> = (0..n)
            .map(|_| if self.rng.next_f64() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data.iter().zip(&scale).map(|(v, s)| v * s).collect();
        let out = Tensor::new(xv.shape.clone(), data)?;
        self.push(Op::Dropout { x, scale }, out, "dropout")
    }

    /// Columns `start..end` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, EngineError> {
        let xv = self.value(x);
        let c = xv.cols();
        if start > end || end > c {
            return Err(EngineError::ShapeMismatch {
                op: "slice_cols",
                lhs: xv.shape.clone(),
                rhs: vec![start, end],
            });
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        self.push(Op::SliceCols { x, start }, out, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, EngineError> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(self.mismatch("concat_cols", parts[0], parts[parts.len() - 1]));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.push(Op::ConcatCols(parts.to_vec()), out, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, EngineError> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(self.mismatch("concat_rows", parts[0], parts[parts.len() - 1]));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push(Op::ConcatRows(parts.to_vec()), out, "concat_rows")
    }

    /// Mean softmax cross-entropy over rows whose target is not [`IGNORE`].
    /// With no counted rows the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64]) -> Result<Var, EngineError> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(EngineError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            if t < 0 || t as usize >= c {
                return Err(EngineError::IdOutOfRange {
                    id: t as usize,
                    rows: c,
                });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
            total += log_z - row[t as usize];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            Tensor::scalar(loss),
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, EngineError> {
        let s = self.value(x).data.iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), "sum")
    }

    /// Propagates d(loss)/d(node) in reverse order, adds parameter gradients
    /// into `store`, and clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), EngineError> {
        if !self.recording || loss.0 >= self.nodes.len() {
            return Err(EngineError::NoTape);
        }
        if self.value(loss).len() != 1 {
            return Err(EngineError::NotScalar(self.value(loss).shape.clone()));
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.param_vars.clear();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    for (pg, gv) in p.grad.data.iter_mut().zip(&g) {
                        *pg += gv;
                    }
                    if !p.grad.is_finite() {
                        return Err(EngineError::NonFiniteGradient(p.name.clone()));
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    gemm_nt(&g, &bv.data, acc(&mut grads, *a, m * k), m, n, k);
                    gemm_tn(&av.data, &g, acc(&mut grads, *b, k * n), m, k, n);
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    gemm_nn(&g, &bv.data, acc(&mut grads, *a, m * k), m, n, k);
                    gemm_tn(&g, &av.data, acc(&mut grads, *b, n * k), m, n, k);
                }
                Op::Add(a, b) => {
                    let (la, lb) = (val(*a).len(), val(*b).len());
                    for (x, gv) in acc(&mut grads, *a, la).iter_mut().zip(&g) {
                        *x += gv;
                    }
                    let gb = acc(&mut grads, *b, lb);
                    for (idx, gv) in g.iter().enumerate() {
                        gb[idx % lb] += gv;
                    }
                }
                Op::Scale(x, s) => {
                    let gx = acc(&mut grads, *x, g.len());
                    for (a, gv) in gx.iter_mut().zip(&g) {
                        *a += gv * s;
                    }
                }
                Op::Embedding { table, ids } => {
                    let p = store.get_mut(*table);
                    let d = p.value.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut p.grad.data[id * d..(id + 1) * d];
                        for (a, gv) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *a += gv;
                        }
                    }
                    if !p.grad.is_finite() {
                        return Err(EngineError::NonFiniteGradient(p.name.clone()));
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = val(*gain).len();
                    let gv = &val(*gain).data;
                    let rows = inv_std.len();
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let go = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            dgain[j] += go[j] * xh[j];
                            dbias[j] += go[j];
                            let dxh = go[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = go[j] * gv[j];
                            dx[r * d + j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    add_into(acc(&mut grads, *x, rows * d), &dx);
                    add_into(acc(&mut grads, *gain, d), &dgain);
                    add_into(acc(&mut grads, *bias, d), &dbias);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let gx = acc(&mut grads, *x, y.len());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = val(*x);
                    let gx = acc(&mut grads, *x, xv.len());
                    for ((a, &v), gv) in gx.iter_mut().zip(&xv.data).zip(&g) {
                        *a += gv * gelu_grad(v);
                    }
                }
                Op::Dropout { x, scale } => {
                    let gx = acc(&mut grads, *x, scale.len());
                    for ((a, s), gv) in gx.iter_mut().zip(scale).zip(&g) {
                        *a += gv * s;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let (c, w) = (xv.cols(), node.value.cols());
                    let gx = acc(&mut grads, *x, xv.len());
                    for r in 0..node.value.rows() {
                        for j in 0..w {
                            gx[r * c + start + j] += g[r * w + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let w = pv.cols();
                        let gp = acc(&mut grads, p, pv.len());
                        for r in 0..pv.rows() {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        add_into(acc(&mut grads, p, n), &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    if *count > 0 {
                        let c = val(*logits).cols();
                        let s = g[0] / *count as f64;
                        let gl = acc(&mut grads, *logits, probs.len());
                        for (r, &t) in targets.iter().enumerate() {
                            if t == IGNORE {
                                continue;
                            }
                            for j in 0..c {
                                let onehot = if j == t as usize { 1.0 } else { 0.0 };
                                gl[r * c + j] += s * (probs[r * c + j] - onehot);
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = val(*x).len();
                    for a in acc(&mut grads, *x, n).iter_mut() {
                        *a += g[0];
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// One checked coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(parameter name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Loss at the unperturbed parameters.
    pub loss: f64,
    pub step: f64,
    pub entries: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    /// Largest absolute difference the central quotient can show from
    /// rounding of the two loss values alone: a couple of ulps of the loss
    /// divided by `2h`.
    pub fn rounding_floor(&self) -> f64 {
        2.0 * f64::EPSILON * self.loss.abs() / self.step
    }

    /// Coordinates whose relative error reaches `tol` and whose absolute
    /// difference is also above the rounding floor.
    pub fn unexplained(&self, tol: f64) -> Vec<&CoordinateCheck> {
        let floor = self.rounding_floor();
        self.entries
            .iter()
            .filter(|e| e.relative_error >= tol && (e.analytic - e.numeric).abs() > floor)
            .collect()
    }
}

/// Picks `n` coordinates, cycling over parameters so every tensor is covered.
pub fn sample_coordinates(store: &ParamStore, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = SplitMix64::new(seed);
    let ids: Vec<ParamId> = store.ids().filter(|&id| !store.get(id).value.is_empty()).collect();
    if ids.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|i| {
            let id = ids[i % ids.len()];
            let len = store.get(id).value.len() as u64;
            (id, rng.next_below(len) as usize)
        })
        .collect()
}

/// Compares tape gradients against central differences
/// `(f(θ+h) - f(θ-h)) / 2h` at the given coordinates.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
/// `f` must be deterministic; it is evaluated on fresh tapes.
pub fn grad_check<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    mut f: F,
) -> Result<GradCheckReport, EngineError>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var, EngineError>,
{
    store.zero_grad();
    let mut tape = Tape::new(0);
    let loss = f(store, &mut tape)?;
    let base = tape.value(loss).item();
    tape.backward(loss, store)?;

    let mut eval = |store: &ParamStore| -> Result<f64, EngineError> {
        let mut t = Tape::no_grad();
        let l = f(store, &mut t)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
        loss: base,
        step: h,
        entries: Vec::with_capacity(coords.len()),
    };
    for &(id, idx) in coords {
        let analytic = store.get(id).grad.data[idx];
        let orig = store.get(id).value.data[idx];
        store.get_mut(id).value.data[idx] = orig + h;
        let plus = eval(store)?;
        store.get_mut(id).value.data[idx] = orig - h;
        let minus = eval(store)?;
        store.get_mut(id).value.data[idx] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(EngineError::NonFiniteValue("grad_check"));
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(rel);
            report.worst = Some((store.get(id).name.clone(), idx, analytic, numeric));
        }
        report.entries.push(CoordinateCheck {
            name: store.get(id).name.clone(),
            index: idx,
            analytic,
            numeric,
            relative_error: rel,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = SplitMix64::new(5);
        let mut rand =
            |r: usize, c: usize| Tensor::new(vec![r, c], (0..r * c).map(|_| rng.next_normal()).collect()).unwrap();
        for _ in 0..20 {
            let a = rand(3, 4);
            let b = rand(4, 2);
            let c = matmul(&a, &b).unwrap();
            for i in 0..3 {
                for j in 0..2 {
                    let mut s = 0.0;
                    for k in 0..4 {
                        s += a.at(i, k) * b.at(k, j);
                    }
                    assert!((c.at(i, j) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new(0);
        let a = tape.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.input(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(EngineError::ShapeMismatch { .. })));
    }

    #[test]
    fn uniform_softmax() {
        let mut tape = Tape::new(0);
        let x = tape.input(Tensor::zeros(&[1, 4])).unwrap();
        let y = tape.softmax(x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn masked_softmax_and_fully_masked_rows() {
        let mut tape = Tape::new(0);
        let x = tape.input(t2(&[vec![1.0, 2.0, 3.0], vec![0.5, -0.5, 9.0]])).unwrap();
        let y = tape.softmax(x, Some(&[true, true, false])).unwrap();
        for r in 0..2 {
            let row = tape.value(y).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[2] < 1e-30);
        }
        let z = tape.softmax(x, Some(&[false, false, false])).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut store = ParamStore::new();
        let g = store.add("g", Tensor::filled(&[4], 1.0)).unwrap();
        let b = store.add("b", Tensor::zeros(&[4])).unwrap();
        let mut tape = Tape::new(0);
        let x = tape.input(Tensor::filled(&[2, 4], 3.5)).unwrap();
        let (gv, bv) = (tape.param(&store, g), tape.param(&store, b));
        let y = tape.layer_norm(x, gv, bv, 1e-12).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let mut tape = Tape::new(0);
        let x = tape.input(Tensor::zeros(&[3, 13])).unwrap();
        let l = tape.cross_entropy(x, &[4, IGNORE, 12]).unwrap();
        assert!((tape.value(l).item() - 13f64.ln()).abs() < 1e-12);
        let none = tape.cross_entropy(x, &[IGNORE; 3]).unwrap();
        assert_eq!(tape.value(none).item(), 0.0);
    }

    #[test]
    fn dropout_identity_cases_and_scaling() {
        let mut tape = Tape::new(1);
        let x = tape.input(Tensor::filled(&[1, 10_000], 1.0)).unwrap();
        assert_eq!(tape.dropout(x, 0.0, true).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, false).unwrap(), x);
        let y = tape.dropout(x, 0.5, true).unwrap();
        let v = tape.value(y).data();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        assert!(matches!(tape.dropout(x, 1.0, true), Err(EngineError::InvalidRate(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new(0);
        let x = tape.input(Tensor::filled(&[1, 2], 1e308)).unwrap();
        assert_eq!(tape.scale(x, 10.0), Err(EngineError::NonFiniteValue("scale")));
        assert!(tape.input(Tensor::filled(&[1], f64::NAN)).is_err());
    }

    #[test]
    fn linear_gradient_is_input_broadcast() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", t2(&[vec![0.1, -0.2], vec![0.3, 0.4], vec![0.5, 0.6]]))
            .unwrap();
        let x = t2(&[vec![1.5, -2.0, 0.25]]);
        let run = |store: &mut ParamStore| {
            let mut tape = Tape::new(0);
            let xv = tape.input(x.clone()).unwrap();
            let wv = tape.param(store, w);
            let y = tape.matmul(xv, wv).unwrap();
            let l = tape.sum(y).unwrap();
            tape.backward(l, store).unwrap();
        };
        run(&mut store);
        let expected = [1.5, 1.5, -2.0, -2.0, 0.25, 0.25];
        assert_eq!(store.get(w).grad.data(), &expected);
        run(&mut store);
        let doubled: Vec<f64> = expected.iter().map(|v| v * 2.0).collect();
        assert_eq!(store.get(w).grad.data(), doubled.as_slice());
    }

    #[test]
    fn backward_requires_a_tape() {
        let mut store = ParamStore::new();
        let mut tape = Tape::no_grad();
        let x = tape.input(Tensor::scalar(1.0)).unwrap();
        assert_eq!(tape.backward(x, &mut store), Err(EngineError::NoTape));
        let mut tape = Tape::new(0);
        let x = tape.input(Tensor::scalar(1.0)).unwrap();
        tape.backward(x, &mut store).unwrap();
        assert_eq!(tape.backward(x, &mut store), Err(EngineError::NoTape));
    }

    #[test]
    fn grad_check_quadratic() {
        let mut store = ParamStore::new();
        let th = store.add("theta", Tensor::filled(&[1, 1], 3.0)).unwrap();
        let rep = grad_check(&mut store, &[(th, 0)], 1e-5, |s, t| {
            let v = t.param(s, th);
            let sq = t.matmul(v, v)?;
            t.sum(sq)
        })
        .unwrap();
        assert!(rep.max_relative_error < 1e-8, "{rep:?}");
        assert!((store.get(th).grad.item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn grad_check_constant_function() {
        let mut store = ParamStore::new();
        let th = store.add("theta", Tensor::scalar(3.0)).unwrap();
        let rep = grad_check(&mut store, &[(th, 0)], 1e-4, |_, t| t.input(Tensor::scalar(2.0))).unwrap();
        assert_eq!(rep.max_relative_error, 0.0);
    }

    /// Finite-difference check of each op in isolation, composed into a scalar
    /// through a random projection.
    fn check_op<F>(shapes: &[&[usize]], seed: u64, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var, EngineError>,
    {
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|_| rng.next_normal()).collect();
                store
                    .add(format!("p{i}"), Tensor::new(s.to_vec(), data).unwrap())
                    .unwrap()
            })
            .collect();
        let proj_seed = rng.next_u64();
        let coords: Vec<(ParamId, usize)> = ids
            .iter()
            .flat_map(|&id| (0..store.get(id).value.len()).map(move |i| (id, i)))
            .collect();
        let rep = grad_check(&mut store, &coords, 1e-4, |s, t| {
            let vars: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect();
            let out = build(t, &vars)?;
            if t.value(out).shape().len() == 1 {
                return t.sum(out);
            }
            let (r, c) = (t.value(out).rows(), t.value(out).cols());
            // bilinear functional u^T out w with random u, w
            let mut prng = SplitMix64::new(proj_seed);
            let u = Tensor::new(vec![1, r], (0..r).map(|_| prng.next_normal()).collect())?;
            let w = Tensor::new(vec![c, 1], (0..c).map(|_| prng.next_normal()).collect())?;
            let (u, w) = (t.input(u)?, t.input(w)?);
            let left = t.matmul(u, out)?;
            let both = t.matmul(left, w)?;
            t.sum(both)
        })
        .unwrap();
        assert!(rep.max_relative_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn per_op_gradients() {
        check_op(&[&[3, 4], &[4, 2]], 1, |t, v| t.matmul(v[0], v[1]));
        check_op(&[&[3, 4], &[5, 4]], 2, |t, v| t.matmul_bt(v[0], v[1]));
        check_op(&[&[3, 4], &[4]], 3, |t, v| t.add(v[0], v[1]));
        check_op(&[&[3, 4]], 4, |t, v| t.scale(v[0], -1.7));
        check_op(&[&[3, 5], &[5], &[5]], 5, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-12));
        check_op(&[&[3, 4]], 6, |t, v| t.softmax(v[0], None));
        check_op(&[&[3, 4]], 7, |t, v| t.softmax(v[0], Some(&[true, false, true, true])));
        check_op(&[&[3, 4]], 8, |t, v| t.gelu(v[0]));
        check_op(&[&[3, 6]], 9, |t, v| t.slice_cols(v[0], 2, 5));
        check_op(&[&[3, 2], &[3, 3]], 10, |t, v| t.concat_cols(&[v[0], v[1]]));
        check_op(&[&[2, 3], &[1, 3]], 11, |t, v| t.concat_rows(&[v[0], v[1]]));
        check_op(&[&[4, 5]], 12, |t, v| t.cross_entropy(v[0], &[1, IGNORE, 4, 0]));
    }

    #[test]
    fn masked_softmax_inputs_get_zero_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", t2(&[vec![0.3, -1.2, 0.7]])).unwrap();
        let mut tape = Tape::new(0);
        let xv = tape.param(&store, x);
        let y = tape.softmax(xv, Some(&[true, false, true])).unwrap();
        let w = tape.input(t2(&[vec![1.0], vec![2.0], vec![-3.0]])).unwrap();
        let z = tape.matmul(y, w).unwrap();
        let l = tape.sum(z).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(x).grad.data()[1], 0.0);
        assert!(store.get(x).grad.data()[0] != 0.0);
    }
}
