//! Dense 2-D tensors on a reverse-mode gradient tape.
//!
//! Every value is a row-major `rows x cols` matrix; scalars are `1 x 1`.
//! Operations are recorded as an explicit enum so each backward rule is a
//! small, auditable match arm. Broadcasting is limited to the two patterns
//! the model needs: a `1 x d` row added to every row, and a per-row scalar
//! column scaling every feature of its row.

use crate::error::{Error, Result};
use crate::scalar::{log_sigmoid, sigmoid, Scalar};

/// Epsilon inside the layer-norm variance denominator.
pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044715;

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One tape node: value plus (after `backward`) its gradient.
#[derive(Debug, Clone)]
pub struct Tensor<S> {
    pub shape: [usize; 2],
    pub data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn numel(&self) -> usize {
        self.shape[0] * self.shape[1]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    ConcatRows { a: usize, b: usize },
    SliceRows { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    ScaleRows { a: usize, s: usize },
    ScaleConst { a: usize, k: f64 },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Gelu { a: usize },
    SoftmaxRows { a: usize },
    LayerNorm { a: usize, gain: usize, bias: usize },
    Mse { a: usize, b: usize },
    LogSigmoid { a: usize },
    L2NormRows { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    Embed { weight: usize, ids: Vec<u32> },
}

/// Recording tape. Nodes only reference earlier nodes, so reverse index
/// order is a valid reverse topological traversal.
pub struct Tape<S> {
    nodes: Vec<Tensor<S>>,
    ops: Vec<Op>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> [usize; 2] {
        self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Node creation ───────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<S>, shape: [usize; 2], requires_grad: bool) -> Result<TensorId> {
        if shape[0] * shape[1] != data.len() {
            return Err(Error::Contract(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<S>, shape: [usize; 2]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, value: S) -> TensorId {
        self.push(vec![value], [1, 1], false, Op::Leaf)
    }

    fn push(&mut self, data: Vec<S>, shape: [usize; 2], requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape[0] * shape[1], data.len());
        let id = self.nodes.len();
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        });
        self.ops.push(op);
        TensorId(id)
    }

    fn push_from(&mut self, inputs: &[TensorId], data: Vec<S>, shape: [usize; 2], op: Op) -> TensorId {
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.push(data, shape, rg, op)
    }

    fn dim_err(&self, op: &'static str, a: TensorId, b: TensorId) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ── Forward operations ──────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let out = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        Ok(self.push_from(&[a, b], out, [m, n], Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let [r, c] = self.shape(a);
        let src = &self.nodes[a.0].data;
        let mut out = vec![S::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push_from(&[a], out, [c, r], Op::Transpose { a: a.0 }))
    }

    /// Vertical stack: `a` on top of `b`.
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let [ra, ca] = self.shape(a);
        let [rb, cb] = self.shape(b);
        if ca != cb {
            return Err(self.dim_err("concat_rows", a, b));
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(&self.nodes[a.0].data);
        out.extend_from_slice(&self.nodes[b.0].data);
        Ok(self.push_from(&[a, b], out, [ra + rb, ca], Op::ConcatRows { a: a.0, b: b.0 }))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let [r, c] = self.shape(a);
        if start + len > r {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let out = self.nodes[a.0].data[start * c..(start + len) * c].to_vec();
        Ok(self.push_from(&[a], out, [len, c], Op::SliceRows { a: a.0, start }))
    }

    /// Horizontal stack of equally tall parts.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of zero parts".into()))?;
        let [r, _] = self.shape(first);
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        for &p in parts {
            if self.shape(p)[0] != r {
                return Err(self.dim_err("concat_cols", first, p));
            }
        }
        let mut out = vec![S::ZERO; r * total];
        let mut col = 0;
        for &p in parts {
            let [_, c] = self.shape(p);
            let src = &self.nodes[p.0].data;
            for i in 0..r {
                out[i * total + col..i * total + col + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            col += c;
        }
        Ok(self.push_from(
            parts,
            out,
            [r, total],
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let [r, c] = self.shape(a);
        if start + len > c {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of range for {c} cols",
                start + len
            )));
        }
        let src = &self.nodes[a.0].data;
        let mut out = vec![S::ZERO; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push_from(&[a], out, [r, len], Op::SliceCols { a: a.0, start }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("add", a, b));
        }
        let out: Vec<S> = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        let shape = self.shape(a);
        Ok(self.push_from(&[a, b], out, shape, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("sub", a, b));
        }
        let out: Vec<S> = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        let shape = self.shape(a);
        Ok(self.push_from(&[a, b], out, shape, Op::Sub { a: a.0, b: b.0 }))
    }

    /// Element-wise product of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("mul", a, b));
        }
        let out: Vec<S> = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        let shape = self.shape(a);
        Ok(self.push_from(&[a, b], out, shape, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Add a `1 x d` row to every row of `a`.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let [m, d] = self.shape(a);
        if self.shape(row) != [1, d] {
            return Err(self.dim_err("add_row", a, row));
        }
        let rv = &self.nodes[row.0].data;
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(m * d);
        for i in 0..m {
            for j in 0..d {
                out.push(src[i * d + j] + rv[j]);
            }
        }
        Ok(self.push_from(&[a, row], out, [m, d], Op::AddRow { a: a.0, row: row.0 }))
    }

    /// Scale row `i` of `a` by the per-row scalar `s[i]` (`s` is `m x 1`).
    pub fn scale_rows(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let [m, d] = self.shape(a);
        if self.shape(s) != [m, 1] {
            return Err(self.dim_err("scale_rows", a, s));
        }
        let sv = &self.nodes[s.0].data;
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(m * d);
        for i in 0..m {
            let si = sv[i];
            for j in 0..d {
                out.push(src[i * d + j] * si);
            }
        }
        Ok(self.push_from(&[a, s], out, [m, d], Op::ScaleRows { a: a.0, s: s.0 }))
    }

    /// Multiply by a compile-time-known scalar constant (no gradient to `k`).
    pub fn scale_const(&mut self, a: TensorId, k: f64) -> Result<TensorId> {
        let kk = S::from_f64(k);
        let out: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x * kk).collect();
        let shape = self.shape(a);
        Ok(self.push_from(&[a], out, shape, Op::ScaleConst { a: a.0, k }))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a);
        Ok(self.push_from(&[a], out, shape, Op::Tanh { a: a.0 }))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<S> = self.nodes[a.0].data.iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a);
        Ok(self.push_from(&[a], out, shape, Op::Sigmoid { a: a.0 }))
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = S::from_f64(GELU_COEF);
        let half = S::from_f64(0.5);
        let out: Vec<S> = self.nodes[a.0].data
            .iter()
            .map(|&x| half * x * (S::ONE + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a);
        Ok(self.push_from(&[a], out, shape, Op::Gelu { a: a.0 }))
    }

    /// Row-wise softmax, stabilized by per-row max subtraction.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let [m, n] = self.shape(a);
        let src = &self.nodes[a.0].data;
        if src.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("softmax_rows", "non-finite input entry"));
        }
        let mut out = vec![S::ZERO; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mut max = row[0];
            for &x in row {
                max = max.max(x);
            }
            let mut sum = S::ZERO;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] / sum;
            }
        }
        Ok(self.push_from(&[a], out, [m, n], Op::SoftmaxRows { a: a.0 }))
    }

    /// Per-row zero mean, unit variance, then affine `gain`/`bias` (both `1 x d`).
    pub fn layernorm(&mut self, a: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let [m, d] = self.shape(a);
        if d < 2 {
            return Err(Error::Contract(format!(
                "layernorm needs feature width >= 2, got {d}"
            )));
        }
        if self.shape(gain) != [1, d] {
            return Err(self.dim_err("layernorm gain", a, gain));
        }
        if self.shape(bias) != [1, d] {
            return Err(self.dim_err("layernorm bias", a, bias));
        }
        let eps = S::from_f64(LAYERNORM_EPS);
        let inv_d = S::ONE / S::from_f64(d as f64);
        let src = &self.nodes[a.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![S::ZERO; m * d];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let mut mean = S::ZERO;
            for &x in row {
                mean += x;
            }
            mean = mean * inv_d;
            let mut var = S::ZERO;
            for &x in row {
                let dx = x - mean;
                var += dx * dx;
            }
            var = var * inv_d;
            let inv_std = S::ONE / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        Ok(self.push_from(
            &[a, gain, bias],
            out,
            [m, d],
            Op::LayerNorm {
                a: a.0,
                gain: gain.0,
                bias: bias.0,
            },
        ))
    }

    /// Mean over all entries of `(a - b)^2`; returns a `1 x 1` scalar.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("mse", a, b));
        }
        let n = self.nodes[a.0].numel();
        let mut acc = S::ZERO;
        for (&x, &y) in self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data) {
            let d = x - y;
            acc += d * d;
        }
        let out = vec![acc / S::from_f64(n as f64)];
        Ok(self.push_from(&[a, b], out, [1, 1], Op::Mse { a: a.0, b: b.0 }))
    }

    pub fn log_sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<S> = self.nodes[a.0].data.iter().map(|&x| log_sigmoid(x)).collect();
        let shape = self.shape(a);
        Ok(self.push_from(&[a], out, shape, Op::LogSigmoid { a: a.0 }))
    }

    /// Euclidean norm of each row; `m x d -> m x 1`.
    pub fn l2_norm_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let [m, d] = self.shape(a);
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let mut acc = S::ZERO;
            for j in 0..d {
                let x = src[i * d + j];
                acc += x * x;
            }
            out.push(acc.sqrt());
        }
        Ok(self.push_from(&[a], out, [m, 1], Op::L2NormRows { a: a.0 }))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let mut acc = S::ZERO;
        for &x in &self.nodes[a.0].data {
            acc += x;
        }
        Ok(self.push_from(&[a], vec![acc], [1, 1], Op::SumAll { a: a.0 }))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.nodes[a.0].numel();
        let mut acc = S::ZERO;
        for &x in &self.nodes[a.0].data {
            acc += x;
        }
        let out = vec![acc / S::from_f64(n as f64)];
        Ok(self.push_from(&[a], out, [1, 1], Op::MeanAll { a: a.0 }))
    }

    /// Gather rows of `weight` (`V x d`) by token id; backward scatter-adds.
    pub fn embed(&mut self, weight: TensorId, ids: &[u32]) -> Result<TensorId> {
        let [v, d] = self.shape(weight);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Contract(format!(
                    "token id {id} out of range for vocabulary {v}"
                )));
            }
        }
        let src = &self.nodes[weight.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let r = id as usize;
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        Ok(self.push_from(
            &[weight],
            out,
            [ids.len(), d],
            Op::Embed {
                weight: weight.0,
                ids: ids.to_vec(),
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. A tape is consumed by exactly one
    /// backward pass; gradients materialize only where `requires_grad` holds.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("tape already consumed by a backward pass".into()));
        }
        self.consumed = true;
        if self.shape(loss) != [1, 1] {
            return Err(Error::Contract(format!(
                "backward requires a 1x1 scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // nothing trainable feeds the loss
        }
        self.nodes[loss.0].grad = Some(vec![S::ONE]);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = self.ops[i].clone();
            match op {
                Op::Leaf => {}

                Op::MatMul { a, b } => {
                    let [m, k] = self.nodes[a].shape;
                    let n = self.nodes[b].shape[1];
                    if self.nodes[a].requires_grad {
                        // da = g * b^T
                        let bt = transpose_raw(&self.nodes[b].data, k, n);
                        let da = matmul_raw(&g, &bt, m, n, k);
                        self.acc(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        // db = a^T * g
                        let at = transpose_raw(&self.nodes[a].data, m, k);
                        let db = matmul_raw(&at, &g, k, m, n);
                        self.acc(b, &db);
                    }
                }

                Op::Transpose { a } => {
                    if self.nodes[a].requires_grad {
                        let [c, r] = self.nodes[i].shape;
                        let da = transpose_raw(&g, c, r);
                        self.acc(a, &da);
                    }
                }

                Op::ConcatRows { a, b } => {
                    let split = self.nodes[a].numel();
                    if self.nodes[a].requires_grad {
                        self.acc(a, &g[..split]);
                    }
                    if self.nodes[b].requires_grad {
                        self.acc(b, &g[split..]);
                    }
                }

                Op::SliceRows { a, start } => {
                    if self.nodes[a].requires_grad {
                        let c = self.nodes[a].shape[1];
                        self.acc_range(a, start * c, &g);
                    }
                }

                Op::ConcatCols { parts } => {
                    let [r, total] = self.nodes[i].shape;
                    let mut col = 0;
                    for p in parts {
                        let c = self.nodes[p].shape[1];
                        if self.nodes[p].requires_grad {
                            let mut dp = vec![S::ZERO; r * c];
                            for row in 0..r {
                                dp[row * c..(row + 1) * c]
                                    .copy_from_slice(&g[row * total + col..row * total + col + c]);
                            }
                            self.acc(p, &dp);
                        }
                        col += c;
                    }
                }

                Op::SliceCols { a, start } => {
                    if self.nodes[a].requires_grad {
                        let [r, c] = self.nodes[a].shape;
                        let len = self.nodes[i].shape[1];
                        let mut da = vec![S::ZERO; r * c];
                        for row in 0..r {
                            da[row * c + start..row * c + start + len]
                                .copy_from_slice(&g[row * len..(row + 1) * len]);
                        }
                        self.acc(a, &da);
                    }
                }

                Op::Add { a, b } => {
                    if self.nodes[a].requires_grad {
                        self.acc(a, &g);
                    }
                    if self.nodes[b].requires_grad {
                        self.acc(b, &g);
                    }
                }

                Op::Sub { a, b } => {
                    if self.nodes[a].requires_grad {
                        self.acc(a, &g);
                    }
                    if self.nodes[b].requires_grad {
                        let neg: Vec<S> = g.iter().map(|&x| -x).collect();
                        self.acc(b, &neg);
                    }
                }

                Op::Mul { a, b } => {
                    if self.nodes[a].requires_grad {
                        let da = zip_map(&g, &self.nodes[b].data, |x, y| x * y);
                        self.acc(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        let db = zip_map(&g, &self.nodes[a].data, |x, y| x * y);
                        self.acc(b, &db);
                    }
                }

                Op::AddRow { a, row } => {
                    if self.nodes[a].requires_grad {
                        self.acc(a, &g);
                    }
                    if self.nodes[row].requires_grad {
                        let [m, d] = self.nodes[i].shape;
                        let mut dr = vec![S::ZERO; d];
                        for r in 0..m {
                            for j in 0..d {
                                dr[j] += g[r * d + j];
                            }
                        }
                        self.acc(row, &dr);
                    }
                }

                Op::ScaleRows { a, s } => {
                    let [m, d] = self.nodes[i].shape;
                    if self.nodes[a].requires_grad {
                        let sv = &self.nodes[s].data;
                        let mut da = vec![S::ZERO; m * d];
                        for r in 0..m {
                            for j in 0..d {
                                da[r * d + j] = g[r * d + j] * sv[r];
                            }
                        }
                        self.acc(a, &da);
                    }
                    if self.nodes[s].requires_grad {
                        let av = &self.nodes[a].data;
                        let mut ds = vec![S::ZERO; m];
                        for r in 0..m {
                            for j in 0..d {
                                ds[r] += g[r * d + j] * av[r * d + j];
                            }
                        }
                        self.acc(s, &ds);
                    }
                }

                Op::ScaleConst { a, k } => {
                    if self.nodes[a].requires_grad {
                        let kk = S::from_f64(k);
                        let da: Vec<S> = g.iter().map(|&x| x * kk).collect();
                        self.acc(a, &da);
                    }
                }

                Op::Tanh { a } => {
                    if self.nodes[a].requires_grad {
                        let da = zip_map(&g, &self.nodes[i].data, |gx, y| gx * (S::ONE - y * y));
                        self.acc(a, &da);
                    }
                }

                Op::Sigmoid { a } => {
                    if self.nodes[a].requires_grad {
                        let da = zip_map(&g, &self.nodes[i].data, |gx, y| gx * y * (S::ONE - y));
                        self.acc(a, &da);
                    }
                }

                Op::Gelu { a } => {
                    if self.nodes[a].requires_grad {
                        let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
                        let kc = S::from_f64(GELU_COEF);
                        let three_k = S::from_f64(3.0 * GELU_COEF);
                        let half = S::from_f64(0.5);
                        let da = zip_map(&g, &self.nodes[a].data, |gx, x| {
                            let inner = c * (x + kc * x * x * x);
                            let th = inner.tanh();
                            let sech2 = S::ONE - th * th;
                            let d_inner = c * (S::ONE + three_k * x * x);
                            gx * (half * (S::ONE + th) + half * x * sech2 * d_inner)
                        });
                        self.acc(a, &da);
                    }
                }

                Op::SoftmaxRows { a } => {
                    if self.nodes[a].requires_grad {
                        let [m, n] = self.nodes[i].shape;
                        let y = &self.nodes[i].data;
                        let mut da = vec![S::ZERO; m * n];
                        for r in 0..m {
                            let mut dot = S::ZERO;
                            for j in 0..n {
                                dot += g[r * n + j] * y[r * n + j];
                            }
                            for j in 0..n {
                                da[r * n + j] = y[r * n + j] * (g[r * n + j] - dot);
                            }
                        }
                        self.acc(a, &da);
                    }
                }

                Op::LayerNorm { a, gain, bias } => {
                    let [m, d] = self.nodes[a].shape;
                    let eps = S::from_f64(LAYERNORM_EPS);
                    let inv_d = S::ONE / S::from_f64(d as f64);
                    let src = self.nodes[a].data.clone();
                    let gv = self.nodes[gain].data.clone();
                    let mut da = vec![S::ZERO; m * d];
                    let mut dgain = vec![S::ZERO; d];
                    let mut dbias = vec![S::ZERO; d];
                    for r in 0..m {
                        let row = &src[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mut mean = S::ZERO;
                        for &x in row {
                            mean += x;
                        }
                        mean = mean * inv_d;
                        let mut var = S::ZERO;
                        for &x in row {
                            let dx = x - mean;
                            var += dx * dx;
                        }
                        var = var * inv_d;
                        let inv_std = S::ONE / (var + eps).sqrt();
                        let xhat: Vec<S> = row.iter().map(|&x| (x - mean) * inv_std).collect();

                        let mut dxhat = vec![S::ZERO; d];
                        let mut sum_dxhat = S::ZERO;
                        let mut sum_dxhat_xhat = S::ZERO;
                        for j in 0..d {
                            dgain[j] += grow[j] * xhat[j];
                            dbias[j] += grow[j];
                            dxhat[j] = grow[j] * gv[j];
                            sum_dxhat += dxhat[j];
                            sum_dxhat_xhat += dxhat[j] * xhat[j];
                        }
                        let df = S::from_f64(d as f64);
                        for j in 0..d {
                            da[r * d + j] = inv_std * inv_d
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    if self.nodes[a].requires_grad {
                        self.acc(a, &da);
                    }
                    if self.nodes[gain].requires_grad {
                        self.acc(gain, &dgain);
                    }
                    if self.nodes[bias].requires_grad {
                        self.acc(bias, &dbias);
                    }
                }

                Op::Mse { a, b } => {
                    let n = self.nodes[a].numel();
                    let scale = g[0] * S::from_f64(2.0 / n as f64);
                    if self.nodes[a].requires_grad {
                        let da = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| {
                            scale * (x - y)
                        });
                        self.acc(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        let db = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| {
                            -scale * (x - y)
                        });
                        self.acc(b, &db);
                    }
                }

                Op::LogSigmoid { a } => {
                    if self.nodes[a].requires_grad {
                        // d/dx ln(sigmoid(x)) = sigmoid(-x)
                        let da = zip_map(&g, &self.nodes[a].data, |gx, x| gx * sigmoid(-x));
                        self.acc(a, &da);
                    }
                }

                Op::L2NormRows { a } => {
                    if self.nodes[a].requires_grad {
                        let [m, d] = self.nodes[a].shape;
                        let src = &self.nodes[a].data;
                        let norms = &self.nodes[i].data;
                        let mut da = vec![S::ZERO; m * d];
                        for r in 0..m {
                            if norms[r] > S::ZERO {
                                let coef = g[r] / norms[r];
                                for j in 0..d {
                                    da[r * d + j] = coef * src[r * d + j];
                                }
                            }
                            // zero rows keep a zero (sub)gradient
                        }
                        self.acc(a, &da);
                    }
                }

                Op::SumAll { a } => {
                    if self.nodes[a].requires_grad {
                        let n = self.nodes[a].numel();
                        let da = vec![g[0]; n];
                        self.acc(a, &da);
                    }
                }

                Op::MeanAll { a } => {
                    if self.nodes[a].requires_grad {
                        let n = self.nodes[a].numel();
                        let da = vec![g[0] / S::from_f64(n as f64); n];
                        self.acc(a, &da);
                    }
                }

                Op::Embed { weight, ids } => {
                    if self.nodes[weight].requires_grad {
                        let d = self.nodes[weight].shape[1];
                        let v = self.nodes[weight].shape[0];
                        let mut dw = vec![S::ZERO; v * d];
                        for (k, &id) in ids.iter().enumerate() {
                            let r = id as usize;
                            for j in 0..d {
                                dw[r * d + j] += g[k * d + j];
                            }
                        }
                        self.acc(weight, &dw);
                    }
                }
            }
        }
        Ok(())
    }

    fn acc(&mut self, id: usize, delta: &[S]) {
        let node = &mut self.nodes[id];
        let grad = node.grad.get_or_insert_with(|| vec![S::ZERO; node.data.len()]);
        for (gi, &di) in grad.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn acc_range(&mut self, id: usize, offset: usize, delta: &[S]) {
        let node = &mut self.nodes[id];
        let grad = node.grad.get_or_insert_with(|| vec![S::ZERO; node.data.len()]);
        for (gi, &di) in grad[offset..offset + delta.len()].iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

fn transpose_raw<S: Scalar>(a: &[S], r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
