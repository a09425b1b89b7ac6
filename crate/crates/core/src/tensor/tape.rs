//! Reverse-mode differentiation over a flat, append-only node list.
//!
//! Every op appends one node holding its forward value and whatever it needs to
//! run its backward rule. Parents always precede children, so a reverse sweep
//! over the list is a valid topological order.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::value::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Public tag of every node kind, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    AddConst,
    MatMul,
    MatMulNT,
    Transpose,
    Softmax,
    Relu,
    Gelu,
    LayerNorm,
    GatherRows,
    ConcatRows,
    ConcatCols,
    SliceCols,
    Mean,
    Sum,
    Reshape,
    NormalizeRows,
    CrossEntropy,
    MaskedNll,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddConst(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Softmax(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Reshape(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<f64>,
        count: usize,
    },
    MaskedNll {
        scores: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::AddConst(..) => OpKind::AddConst,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNT(..) => OpKind::MatMulNT,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::MaskedNll { .. } => OpKind::MaskedNll,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one [`Tape::backward`] sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, numel: usize) -> Vec<f64> {
        self.get(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel])
    }
}

/// Layer-norm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Records one forward pass. Confined to the thread that builds it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    bound: Vec<(ParamId, Var)>,
    fault: Option<OpKind>,
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

    /// Corrupts the backward rule of one op kind (halves its upstream gradient).
    /// Exists only so gradient checks can prove they detect broken rules.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter as a leaf. Repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        self.bound.push((id, v));
        v
    }

    pub(crate) fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().copied()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.rank() {
            2 => Ok((t.shape()[0], t.shape()[1])),
            r => shape_err(format!("{what} expects a matrix, got rank {r}")),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(x.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `x[m×n] + b[n]` with `b` repeated over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "add_row")?;
        let bias = self.value(b);
        if bias.rank() != 1 || bias.numel() != n {
            return shape_err(format!("add_row: bias {:?} for {m}×{n}", bias.shape()));
        }
        let mut data = self.value(x).data().to_vec();
        let bd = bias.data();
        for row in data.chunks_mut(n) {
            for (o, v) in row.iter_mut().zip(bd) {
                *o += v;
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// Adds a constant tensor (e.g. an attention mask); no gradient to the constant.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return shape_err(format!("add_const: {:?} vs {:?}", self.shape(x), c.shape()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(p, q)| p + q)
            .collect();
        let out = Tensor::new(c.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return shape_err(format!("matmul: {m}×{k} by {k2}×{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return shape_err(format!("matmul_nt: {m}×{k} by ({n}×{k2})ᵀ"));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix(a, "transpose")?;
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(x.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(x.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(x.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        for (p, what) in [(gain, "gain"), (bias, "bias")] {
            let pt = self.value(p);
            if pt.rank() != 1 || pt.numel() != n {
                return shape_err(format!("layer_norm {what} {:?} for width {n}", pt.shape()));
            }
        }
        let rows = t.numel() / n.max(1);
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = &t.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Rows of `x` selected by `idx`, in order; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix(x, "gather_rows")?;
        let t = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index(format!("row {i} out of range for {m} rows")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(&[idx.len(), n], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Embedding lookup: rows of `table` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Stacks matrices (or vectors, as single rows) along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of zero tensors");
        }
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.rank() > 2 || t.cols() != n {
                return shape_err(format!("concat rows: {:?} with width {n}", t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(&[rows, n], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices with equal row counts along axis 1.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of zero tensors");
        }
        let m = self.matrix(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_cols")?;
            if r != m {
                return shape_err(format!("concat cols: {r} rows vs {m}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..m {
                data[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let out = Tensor::new(&[m, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix(x, "slice_cols")?;
        if start + len > n {
            return shape_err(format!("slice cols {start}..{} of width {n}", start + len));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::new(&[m, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Arithmetic mean over one axis. `[m×n]` axis 0 → `[n]`, axis 1 → `[m]`; `[n]` axis 0 → scalar.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let out = match (t.rank(), axis) {
            (1, 0) => {
                if t.numel() == 0 {
                    return Err(Error::Empty("mean of an empty vector".into()));
                }
                Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
            }
            (2, 0) => {
                let (m, n) = (t.rows(), t.cols());
                if m == 0 {
                    return Err(Error::Empty("mean over zero rows".into()));
                }
                let mut acc = vec![0.0; n];
                for r in 0..m {
                    for (a, v) in acc.iter_mut().zip(t.row(r)) {
                        *a += v;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= m as f64);
                Tensor::vector(acc)
            }
            (2, 1) => {
                let n = t.cols();
                if n == 0 {
                    return Err(Error::Empty("mean over zero columns".into()));
                }
                Tensor::vector(
                    (0..t.rows())
                        .map(|r| t.row(r).iter().sum::<f64>() / n as f64)
                        .collect(),
                )
            }
            (r, a) => return shape_err(format!("mean over axis {a} of rank {r}")),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Mean { x, axis }, rg))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Scales each row to unit L2 norm. Zero rows are a domain error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || t.rank() > 2 {
            return shape_err(format!("normalize_rows of rank {}", t.rank()));
        }
        let n = t.cols();
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(n) {
            let norm = dot(row, row).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Domain(format!("cannot normalize a row with norm {norm}")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, rg))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar.
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape(u, v, "cosine_sim")?;
        let d = self.value(u).numel();
        let ru = self.reshape(u, &[1, d])?;
        let rv = self.reshape(v, &[1, d])?;
        let nu = self.normalize_rows(ru)?;
        let nv = self.normalize_rows(rv)?;
        let prod = self.mul(nu, nv)?;
        Ok(self.sum(prod))
    }

    /// Mean token negative log-likelihood of `targets` under row-softmax of `logits`.
    /// Rows whose target equals `ignore` are excluded; all-ignored gives 0.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let (l, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != l {
            return shape_err(format!("cross_entropy: {l} rows vs {} targets", targets.len()));
        }
        let t = self.value(logits);
        let mut probs = vec![0.0; l * v];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &y) in targets.iter().enumerate() {
            if Some(y) == ignore {
                continue;
            }
            if y >= v {
                return Err(Error::Index(format!("target {y} outside vocabulary of {v}")));
            }
            let row = t.row(r);
            let p = &mut probs[r * v..(r + 1) * v];
            p.copy_from_slice(row);
            let lse = log_softmax_in_place(p);
            total += lse - row[y];
            p.iter_mut().for_each(|x| *x = (*x).exp());
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean over rows of `logsumexp(scores[r, allowed]) - scores[r, target_r]`.
    ///
    /// The target need not be in the allowed set; every row needs at least one
    /// allowed column. With the target allowed this is softmax cross-entropy
    /// restricted to the allowed columns.
    pub fn masked_nll(&mut self, scores: Var, targets: &[usize], allowed: &[bool]) -> Result<Var> {
        let (r, c) = self.matrix(scores, "masked_nll")?;
        if targets.len() != r || allowed.len() != r * c {
            return shape_err("masked_nll: targets/mask do not match scores");
        }
        let t = self.value(scores);
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for i in 0..r {
            let y = targets[i];
            if y >= c {
                return Err(Error::Index(format!("target {y} outside {c} columns")));
            }
            let row = t.row(i);
            let mask = &allowed[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &a)| a)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Domain(format!("row {i} has no allowed columns")));
            }
            let mut z = 0.0;
            for j in 0..c {
                if mask[j] {
                    let e = (row[j] - max).exp();
                    probs[i * c + j] = e;
                    z += e;
                }
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= z);
            total += max + z.ln() - row[y];
        }
        let rg = self.rg(scores);
        Ok(self.push(
            Tensor::scalar(total / r as f64),
            Op::MaskedNll {
                scores,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`; `d loss / d loss = 1`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Usage(
                "backward on a tensor detached from every differentiable input".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if Some(node.op.kind()) == self.fault && !matches!(node.op, Op::Leaf) {
                g.iter_mut().for_each(|v| *v *= 0.5);
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
                }
            }
            Op::AddRow(x, b) => {
                if let Some(d) = self.acc(grads, *x) {
                    add_into(d, g);
                }
                let n = self.value(*b).numel();
                if let Some(d) = self.acc(grads, *b) {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    add_into(d, g);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    gemm_nt(g, bv, d, m, n, k);
                }
                if let Some(d) = self.acc(grads, *b) {
                    gemm_tn(av, g, d, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    gemm_nn(g, bv, d, m, n, k);
                }
                if let Some(d) = self.acc(grads, *b) {
                    gemm_tn(g, av, d, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            d[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let y = node.value.data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let s = dot(yr, gr);
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        d[i] += g[i] * gelu_grad(x[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gv = self.value(*gain).data();
                if let Some(d) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for (r, s) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = dot(&dxhat, hr) / n as f64;
                        let dr = &mut d[r * n..(r + 1) * n];
                        for j in 0..n {
                            dr[j] += s * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *gain) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *bias) {
                    for gr in g.chunks(n) {
                        add_into(d, gr);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let n = node.value.cols();
                if let Some(d) = self.acc(grads, *x) {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * n..(i + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(d) = self.acc(grads, p) {
                        add_into(d, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(d) = self.acc(grads, p) {
                        for r in 0..m {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let n = self.value(*x).cols();
                if let Some(d) = self.acc(grads, *x) {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut d[r * n + start..r * n + start + len], gr);
                    }
                }
            }
            Op::Mean { x, axis } => {
                let src = self.value(*x);
                let (rank, m, n) = (src.rank(), src.rows(), src.cols());
                if let Some(d) = self.acc(grads, *x) {
                    match (rank, axis) {
                        (1, _) => {
                            let s = g[0] / n as f64;
                            d.iter_mut().for_each(|v| *v += s);
                        }
                        (_, 0) => {
                            for r in 0..m {
                                for j in 0..n {
                                    d[r * n + j] += g[j] / m as f64;
                                }
                            }
                        }
                        _ => {
                            for r in 0..m {
                                let s = g[r] / n as f64;
                                d[r * n..(r + 1) * n].iter_mut().for_each(|v| *v += s);
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let n = node.value.cols();
                let y = node.value.data();
                if let Some(d) = self.acc(grads, *x) {
                    for (r, norm) in norms.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let s = dot(yr, gr);
                        let dr = &mut d[r * n..(r + 1) * n];
                        for j in 0..n {
                            dr[j] += (gr[j] - yr[j] * s) / norm;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                if let Some(d) = self.acc(grads, *logits) {
                    for (r, &y) in targets.iter().enumerate() {
                        if Some(y) == *ignore {
                            continue;
                        }
                        let dr = &mut d[r * v..(r + 1) * v];
                        let pr = &probs[r * v..(r + 1) * v];
                        for j in 0..v {
                            dr[j] += scale * pr[j];
                        }
                        dr[y] -= scale;
                    }
                }
            }
            Op::MaskedNll {
                scores,
                targets,
                probs,
            } => {
                let c = self.value(*scores).cols();
                let scale = g[0] / targets.len() as f64;
                if let Some(d) = self.acc(grads, *scores) {
                    for (r, &y) in targets.iter().enumerate() {
                        let dr = &mut d[r * c..(r + 1) * c];
                        let pr = &probs[r * c..(r + 1) * c];
                        for j in 0..c {
                            dr[j] += scale * pr[j];
                        }
                        dr[y] -= scale;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Overwrites `row` with its log-softmax and returns the log-partition.
pub(crate) fn log_softmax_in_place(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + z.ln();
    row.iter_mut().for_each(|v| *v -= lse);
    lse
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
