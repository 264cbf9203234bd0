use std::rc::Rc;

use super::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// sqrt(2/pi) and the cubic coefficient of the tanh GELU approximation.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Rc<[usize]>,
    },
    ReplaceRows {
        x: Var,
        fill: Var,
        flags: Rc<[bool]>,
    },
    AddToRows {
        x: Var,
        table: Var,
        flags: Rc<[bool]>,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Rc<[usize]>,
        flags: Rc<[bool]>,
        probs: Vec<f64>,
        count: usize,
    },
    MaskedMse {
        pred: Var,
        target: Var,
        flags: Rc<[bool]>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
    WeightedMeanRows {
        x: Var,
        weights: Rc<[f64]>,
        total: f64,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    /// Backward rule with a deliberately flipped sign; used only by the
    /// gradient-check self test.
    BrokenIdentity(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::AddToRows { .. } => "add_to_rows",
            Op::MaskedCrossEntropy { .. } => "masked_cross_entropy",
            Op::MaskedMse { .. } => "masked_mse",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::WeightedMeanRows { .. } => "weighted_mean_rows",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::BrokenIdentity(_) => "broken_identity",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; replayed in reverse by
/// [`Tape::backward`]. Indices only ever point backwards, so the recording
/// order is already a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Accumulated gradients of leaves that require them.
    grads: Vec<Option<Tensor>>,
    first_nonfinite: Option<String>,
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

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients (inputs, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` for frozen leaves, intermediate
    /// values, and leaves not yet reached by any backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Name and index of the first operation that produced a non-finite value.
    pub fn first_nonfinite(&self) -> Option<&str> {
        self.first_nonfinite.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(format!("{} (node {})", op.name(), self.nodes.len()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[..×d] + bias[d]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(bias).numel() != d {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data: out }, Op::Scale(x, c), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data: out }, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis. Entries with `excluded[i] == true` get
    /// probability exactly zero; every row needs at least one admitted entry.
    pub fn softmax_masked(&mut self, x: Var, excluded: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if let Some(m) = excluded {
            if m.len() != xv.numel() {
                return Err(Error::Dimension {
                    op: "softmax",
                    lhs: xv.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        if !xv.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = vec![0.0; xv.numel()];
        for (r, (row, orow)) in xv.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let admitted = |j: usize| excluded.is_none_or(|m| !m[r * n + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if admitted(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::Contract(format!(
                    "softmax row {r} has every entry masked"
                )));
            }
            let mut s = 0.0;
            for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if admitted(j) {
                    *o = (v - mx).exp();
                    s += *o;
                }
            }
            orow.iter_mut().for_each(|o| *o /= s);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax(x), rg))
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        for p in [gamma, beta] {
            if self.value(p).numel() != d {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
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
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.matrix_dims(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix_dims(p, "concat_cols")?;
            if pm != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: vec![pm, pn],
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).cols() != n {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `idx` of `x`, in order; indices may repeat (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Contract(format!("row index {i} out of range {m}")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows { x, idx: idx.into() },
            rg,
        ))
    }

    /// Rows of `x` with `flags[i]` set are replaced by the single row `fill`.
    pub fn replace_rows(&mut self, x: Var, flags: &[bool], fill: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if flags.len() != xv.rows() || self.value(fill).numel() != n {
            return Err(Error::Dimension {
                op: "replace_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![flags.len(), self.value(fill).numel()],
            });
        }
        let f = self.value(fill).data();
        let mut out = xv.data().to_vec();
        for (row, &flag) in out.chunks_mut(n).zip(flags) {
            if flag {
                row.copy_from_slice(f);
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, fill]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::ReplaceRows {
                x,
                fill,
                flags: flags.into(),
            },
            rg,
        ))
    }

    /// Adds the matching rows of `table` (at least as many rows as `x`) to
    /// the rows of `x` with `flags[i]` set.
    pub fn add_to_rows(&mut self, x: Var, flags: &[bool], table: Var) -> Result<Var> {
        let xv = self.value(x);
        let tv = self.value(table);
        let n = xv.cols();
        if flags.len() != xv.rows() || tv.cols() != n || tv.rows() < xv.rows() {
            return Err(Error::Dimension {
                op: "add_to_rows",
                lhs: xv.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for (i, (row, &flag)) in out.chunks_mut(n).zip(flags).enumerate() {
            if flag {
                for (o, t) in row.iter_mut().zip(tv.row(i)) {
                    *o += t;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, table]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::AddToRows {
                x,
                table,
                flags: flags.into(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` over rows with `flags` set.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        flags: &[bool],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (t, v) = (lv.rows(), lv.cols());
        if targets.len() != t || flags.len() != t {
            return Err(Error::Dimension {
                op: "masked_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len(), flags.len()],
            });
        }
        let count = flags.iter().filter(|&&f| f).count();
        if count == 0 {
            return Err(Error::EmptyMask {
                op: "masked_cross_entropy",
            });
        }
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for i in 0..t {
            if !flags[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(Error::Contract(format!(
                    "target {} outside vocabulary of {v}",
                    targets[i]
                )));
            }
            let row = lv.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + s.ln();
            loss += lse - row[targets[i]];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / count as f64),
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.into(),
                flags: flags.into(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean squared error over the flagged rows and all feature columns.
    pub fn masked_mse(&mut self, pred: Var, target: Var, flags: &[bool]) -> Result<Var> {
        self.same_shape(pred, target, "masked_mse")?;
        let pv = self.value(pred);
        let (t, d) = (pv.rows(), pv.cols());
        if flags.len() != t {
            return Err(Error::Dimension {
                op: "masked_mse",
                lhs: pv.shape().to_vec(),
                rhs: vec![flags.len()],
            });
        }
        let count = flags.iter().filter(|&&f| f).count();
        if count == 0 {
            return Err(Error::EmptyMask { op: "masked_mse" });
        }
        let tv = self.value(target);
        let mut s = 0.0;
        for i in (0..t).filter(|&i| flags[i]) {
            for (p, q) in pv.row(i).iter().zip(tv.row(i)) {
                s += (p - q) * (p - q);
            }
        }
        let rg = self.rg(&[pred, target]);
        Ok(self.push(
            Tensor::scalar(s / (count * d) as f64),
            Op::MaskedMse {
                pred,
                target,
                flags: flags.into(),
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `Σ wᵢ·xᵢ / Σ wᵢ` over rows, producing a `1×d` row.
    pub fn weighted_mean_rows(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if weights.len() != m {
            return Err(Error::Dimension {
                op: "weighted_mean_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::EmptyMask {
                op: "weighted_mean_rows",
            });
        }
        let mut out = vec![0.0; n];
        for (i, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(xv.row(i)) {
                    *o += w * v / total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![1, n], out)?,
            Op::WeightedMeanRows {
                x,
                weights: weights.into(),
                total,
            },
            rg,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data: out }, Op::L2NormalizeRows { x, norms }, rg)
    }

    #[doc(hidden)]
    pub fn broken_identity(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(value, Op::BrokenIdentity(x), rg)
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.grads.len() < self.nodes.len() {
                    self.grads.resize_with(self.nodes.len(), || None);
                }
                let slot = &mut self.grads[i];
                match slot {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b),
                    None => {
                        *slot = Some(Tensor {
                            shape: self.nodes[i].value.shape().to_vec(),
                            data: g,
                        })
                    }
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if wants(*a) {
                    gemm_nt_acc(g, val(*b).data(), acc(adj, *a, m * k), m, n, k);
                }
                if wants(*b) {
                    gemm_tn_acc(val(*a).data(), g, acc(adj, *b, k * n), m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ, a: m×k, b: n×k
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                if wants(*a) {
                    gemm_acc(g, val(*b).data(), acc(adj, *a, m * k), m, n, k);
                }
                if wants(*b) {
                    gemm_tn_acc(g, val(*a).data(), acc(adj, *b, n * k), m, n, k);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                let ga = acc(adj, *x, m * n);
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] += g[c * m + r];
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(v) {
                        add_scaled(acc(adj, v, g.len()), g, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        add_scaled(acc(adj, v, g.len()), g, sign);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b).data();
                    let ga = acc(adj, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if wants(*b) {
                    let av = val(*a).data();
                    let gb = acc(adj, *b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if wants(*x) {
                    add_scaled(acc(adj, *x, g.len()), g, 1.0);
                }
                if wants(*bias) {
                    let d = val(*bias).numel();
                    let gb = acc(adj, *bias, d);
                    for row in g.chunks(d) {
                        add_scaled(gb, row, 1.0);
                    }
                }
            }
            Op::Scale(x, c) => add_scaled(acc(adj, *x, g.len()), g, *c),
            Op::Gelu(x) => {
                let xv = val(*x).data();
                let gx = acc(adj, *x, g.len());
                for j in 0..g.len() {
                    let v = xv[j];
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    gx[j] += g[j] * d;
                }
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let y = out.data();
                let gx = acc(adj, *x, g.len());
                for r in 0..y.len() / n {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = val(*gamma).numel();
                let gam = val(*gamma).data();
                if wants(*gamma) {
                    let gg = acc(adj, *gamma, d);
                    for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * hrow[j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = acc(adj, *beta, d);
                    for row in g.chunks(d) {
                        add_scaled(gb, row, 1.0);
                    }
                }
                if wants(*x) {
                    let gx = acc(adj, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let k = inv_std[r] / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += k * (d as f64 * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = val(*x).cols();
                let len = out.cols();
                let gx = acc(adj, *x, val(*x).numel());
                for (r, row) in g.chunks(len).enumerate() {
                    add_scaled(&mut gx[r * n + start..r * n + start + len], row, 1.0);
                }
            }
            Op::ConcatCols(parts) => {
                let n = out.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let gp = acc(adj, p, val(p).numel());
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            add_scaled(row, &g[r * n + off..r * n + off + w], 1.0);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if wants(p) {
                        add_scaled(acc(adj, p, len), &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let n = out.cols();
                let gx = acc(adj, *x, val(*x).numel());
                for (k, &r) in idx.iter().enumerate() {
                    add_scaled(&mut gx[r * n..(r + 1) * n], &g[k * n..(k + 1) * n], 1.0);
                }
            }
            Op::ReplaceRows { x, fill, flags } => {
                let n = out.cols();
                if wants(*x) {
                    let gx = acc(adj, *x, g.len());
                    for (r, &f) in flags.iter().enumerate() {
                        if !f {
                            add_scaled(&mut gx[r * n..(r + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                        }
                    }
                }
                if wants(*fill) {
                    let gf = acc(adj, *fill, n);
                    for (r, &f) in flags.iter().enumerate() {
                        if f {
                            add_scaled(gf, &g[r * n..(r + 1) * n], 1.0);
                        }
                    }
                }
            }
            Op::AddToRows { x, table, flags } => {
                let n = out.cols();
                if wants(*x) {
                    add_scaled(acc(adj, *x, g.len()), g, 1.0);
                }
                if wants(*table) {
                    let gt = acc(adj, *table, val(*table).numel());
                    for (r, &f) in flags.iter().enumerate() {
                        if f {
                            add_scaled(&mut gt[r * n..(r + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                        }
                    }
                }
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                flags,
                probs,
                count,
            } => {
                let v = val(*logits).cols();
                let scale = g[0] / *count as f64;
                let gl = acc(adj, *logits, val(*logits).numel());
                for (r, &f) in flags.iter().enumerate() {
                    if f {
                        for j in 0..v {
                            gl[r * v + j] += scale * probs[r * v + j];
                        }
                        gl[r * v + targets[r]] -= scale;
                    }
                }
            }
            Op::MaskedMse {
                pred,
                target,
                flags,
                count,
            } => {
                let d = val(*pred).cols();
                let k = 2.0 * g[0] / (*count * d) as f64;
                let pv = val(*pred).data();
                let tv = val(*target).data();
                for (v, sign) in [(*pred, 1.0), (*target, -1.0)] {
                    if !wants(v) {
                        continue;
                    }
                    let gv = acc(adj, v, pv.len());
                    for (r, &f) in flags.iter().enumerate() {
                        if f {
                            for j in r * d..(r + 1) * d {
                                gv[j] += sign * k * (pv[j] - tv[j]);
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                acc(adj, *x, n).iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let c = g[0] / n as f64;
                acc(adj, *x, n).iter_mut().for_each(|a| *a += c);
            }
            Op::WeightedMeanRows { x, weights, total } => {
                let n = out.cols();
                let gx = acc(adj, *x, val(*x).numel());
                for (r, &w) in weights.iter().enumerate() {
                    if w != 0.0 {
                        add_scaled(&mut gx[r * n..(r + 1) * n], g, w / total);
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = out.cols();
                let y = out.data();
                let gx = acc(adj, *x, y.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += (gs[j] - ys[j] * dot) / norm;
                    }
                }
            }
            Op::BrokenIdentity(x) => add_scaled(acc(adj, *x, g.len()), g, -1.0),
        }
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}
