//! Minimal reverse-mode automatic differentiation over dense f64 arrays,
//! sized for the decision transformer and the MLP baseline: an append-only
//! graph arena, the primitive ops with hand-written backward rules, a
//! bias-corrected Adam optimizer, and a central-difference gradient checker.
//!
//! Graphs are rebuilt per training step and confined to one worker; node
//! creation order is the topological order, so backward walks the arena in
//! reverse.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op} expects {expect}, got shape {got:?}")]
    BadShape { op: &'static str, expect: &'static str, got: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range {range} in {op}")]
    IndexOutOfRange { op: &'static str, index: usize, range: usize },
}

/// Handle into a [`Graph`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Bmm(TensorId, TensorId),
    Add(TensorId, TensorId),
    AddBias(TensorId, TensorId),
    AddBroadcastMat(TensorId, TensorId),
    Mul(TensorId, TensorId),
    MulBias(TensorId, TensorId),
    MulRows(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId, f64),
    Transpose(TensorId),
    TransposeLast(TensorId),
    Reshape(TensorId),
    ConcatRows(Vec<TensorId>),
    SliceRows(TensorId, usize, usize),
    SoftmaxRows(TensorId),
    LogSoftmaxRows(TensorId),
    LayerNormRows(TensorId),
    Gelu(TensorId),
    Sigmoid(TensorId),
    EmbeddingLookup { table: TensorId, indices: Vec<usize> },
    Mean(TensorId),
    Sum(TensorId),
    CrossEntropy { logits: TensorId, labels: Vec<usize> },
    Mse(TensorId, TensorId),
    BceLogit { logits: TensorId, targets: Vec<f64> },
    GatherRows { input: TensorId, rows: Vec<usize> },
    GatherElems { input: TensorId, idx: Vec<(usize, usize)> },
    WeightedSum { input: TensorId, weights: Vec<f64> },
    Interleave3(TensorId, TensorId, TensorId),
    SplitHeads { input: TensorId, b: usize, t: usize, h: usize },
    MergeHeads { input: TensorId, b: usize, t: usize, h: usize },
    AngularDist { pred: TensorId, gt: Vec<f64> },
    ClampMin(TensorId, f64),
    Log(TensorId),
    Dropout { input: TensorId, mask: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Persistent gradient, populated for requires-grad leaves by backward.
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

const LN_EPS: f64 = 1e-5;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node { shape, values, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> TensorId {
        assert_eq!(numel(&shape), values.len(), "leaf shape/value mismatch");
        self.push(shape, values, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> TensorId {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(vec![1], vec![v], false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.nodes[id.0].values[0]
    }

    /// Accumulated gradient of a requires-grad leaf (after backward).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    fn rows_cols(&self, id: TensorId, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(AutodiffError::BadShape { op, expect: "2-d tensor", got: s.to_vec() });
        }
        Ok((s[0], s[1]))
    }

    // ----- primitive ops ---------------------------------------------------

    /// `[m,k] @ [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let (m, k) = self.rows_cols(a, "matmul")?;
        let (k2, n) = self.rows_cols(b, "matmul")?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; m * n];
        matmul_into(av, bv, &mut out, m, k, n);
        let rg = self.requires(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul(a, b)))
    }

    /// Batched matmul `[b,m,k] @ [b,k,n] -> [b,m,n]`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(AutodiffError::ShapeMismatch { op: "bmm", lhs: sa, rhs: sb });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            matmul_into(
                &self.nodes[a.0].values[i * m * k..(i + 1) * m * k],
                &self.nodes[b.0].values[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.requires(&[a, b]);
        Ok(self.push(vec![bs, m, n], out, rg, Op::Bmm(a, b)))
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    /// `[n,d] + [d]`, broadcast over rows.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, AutodiffError> {
        let (n, d) = self.rows_cols(a, "add_bias")?;
        if self.shape(bias) != [d] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.nodes[a.0].values.clone();
        let bv = &self.nodes[bias.0].values;
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] += bv[c];
            }
        }
        let rg = self.requires(&[a, bias]);
        Ok(self.push(vec![n, d], out, rg, Op::AddBias(a, bias)))
    }

    /// `[b,m,n] + [m,n]`, broadcast over the leading axis (attention masks).
    pub fn add_broadcast_mat(&mut self, a: TensorId, m: TensorId) -> Result<TensorId, AutodiffError> {
        let sa = self.shape(a).to_vec();
        let sm = self.shape(m).to_vec();
        if sa.len() != 3 || sm.len() != 2 || sa[1] != sm[0] || sa[2] != sm[1] {
            return Err(AutodiffError::ShapeMismatch { op: "add_broadcast_mat", lhs: sa, rhs: sm });
        }
        let plane = sm[0] * sm[1];
        let mut out = self.nodes[a.0].values.clone();
        for i in 0..sa[0] {
            for j in 0..plane {
                out[i * plane + j] += self.nodes[m.0].values[j];
            }
        }
        let rg = self.requires(&[a, m]);
        Ok(self.push(sa, out, rg, Op::AddBroadcastMat(a, m)))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Mul(a, b)))
    }

    /// `[n,d] * [d]`, broadcast over rows (layer-norm gain).
    pub fn mul_bias(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let (n, d) = self.rows_cols(a, "mul_bias")?;
        if self.shape(b) != [d] {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bv = self.nodes[b.0].values.clone();
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % d])
            .collect();
        let rg = self.requires(&[a, b]);
        Ok(self.push(vec![n, d], out, rg, Op::MulBias(a, b)))
    }

    /// `[n,d] * [n]`, each row scaled by its own factor (token masking).
    pub fn mul_rows(&mut self, a: TensorId, r: TensorId) -> Result<TensorId, AutodiffError> {
        let (n, d) = self.rows_cols(a, "mul_rows")?;
        if self.shape(r) != [n] {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_rows",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(r).to_vec(),
            });
        }
        let rv = self.nodes[r.0].values.clone();
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .enumerate()
            .map(|(i, x)| x * rv[i / d])
            .collect();
        let rg = self.requires(&[a, r]);
        Ok(self.push(vec![n, d], out, rg, Op::MulRows(a, r)))
    }

    pub fn scale(&mut self, a: TensorId, s: f64) -> TensorId {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, out, rg, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: TensorId, s: f64) -> TensorId {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x + s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, out, rg, Op::AddScalar(a, s))
    }

    /// 2-d transpose.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, AutodiffError> {
        let (m, n) = self.rows_cols(a, "transpose")?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![n, m], out, rg, Op::Transpose(a)))
    }

    /// `[b,m,n] -> [b,n,m]`.
    pub fn transpose_last(&mut self, a: TensorId) -> Result<TensorId, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(AutodiffError::BadShape { op: "transpose_last", expect: "3-d tensor", got: s });
        }
        let (b, m, n) = (s[0], s[1], s[2]);
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; b * m * n];
        for i in 0..b {
            for r in 0..m {
                for c in 0..n {
                    out[i * m * n + c * m + r] = av[i * m * n + r * n + c];
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![b, n, m], out, rg, Op::TransposeLast(a)))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, AutodiffError> {
        if numel(&shape) != self.nodes[a.0].values.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let out = self.nodes[a.0].values.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, out, rg, Op::Reshape(a)))
    }

    /// Concatenation along axis 0 of 2-d tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, AutodiffError> {
        assert!(!parts.is_empty(), "concat of nothing");
        let (_, d) = self.rows_cols(parts[0], "concat_rows")?;
        let mut rows = 0;
        for p in parts {
            let (r, c) = self.rows_cols(*p, "concat_rows")?;
            if c != d {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(*p).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * d);
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        let rg = self.requires(parts);
        Ok(self.push(vec![rows, d], out, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `[start, end)` of a 2-d tensor.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId, AutodiffError> {
        let (n, d) = self.rows_cols(a, "slice_rows")?;
        if start > end || end > n {
            return Err(AutodiffError::IndexOutOfRange { op: "slice_rows", index: end, range: n });
        }
        let out = self.nodes[a.0].values[start * d..end * d].to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![end - start, d], out, rg, Op::SliceRows(a, start, end)))
    }

    /// Row-wise softmax over the last axis of a 2-d tensor.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId, AutodiffError> {
        let (n, d) = self.rows_cols(a, "softmax_rows")?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &av[r * d..(r + 1) * d];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..d {
                let e = (row[c] - max).exp();
                out[r * d + c] = e;
                sum += e;
            }
            for c in 0..d {
                out[r * d + c] /= sum;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![n, d], out, rg, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: TensorId) -> Result<TensorId, AutodiffError> {
        let (n, d) = self.rows_cols(a, "log_softmax_rows")?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &av[r * d..(r + 1) * d];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for c in 0..d {
                out[r * d + c] = row[c] - log_sum;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![n, d], out, rg, Op::LogSoftmaxRows(a)))
    }

    /// Row-wise layer normalization (no affine terms; compose with
    /// `mul_bias`/`add_bias`).
    pub fn layer_norm_rows(&mut self, a: TensorId) -> Result<TensorId, AutodiffError> {
        let (n, d) = self.rows_cols(a, "layer_norm_rows")?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &av[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..d {
                out[r * d + c] = (row[c] - mean) * inv;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![n, d], out, rg, Op::LayerNormRows(a)))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| gelu(*x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, out, rg, Op::Gelu(a))
    }

    pub fn sigmoid_op(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| sigmoid(*x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, out, rg, Op::Sigmoid(a))
    }

    /// Row lookup `table[indices[i], :] -> out[i, :]`.
    pub fn embedding_lookup(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId, AutodiffError> {
        let (v, d) = self.rows_cols(table, "embedding_lookup")?;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(AutodiffError::IndexOutOfRange { op: "embedding_lookup", index: i, range: v });
            }
            out.extend_from_slice(&self.nodes[table.0].values[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            vec![indices.len(), d],
            out,
            rg,
            Op::EmbeddingLookup { table, indices: indices.to_vec() },
        ))
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].values.len() as f64;
        let v = self.nodes[a.0].values.iter().sum::<f64>() / n;
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![v], rg, Op::Mean(a))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let v = self.nodes[a.0].values.iter().sum::<f64>();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![v], rg, Op::Sum(a))
    }

    /// Mean cross entropy of `[n, c]` logits against `n` class labels.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId, AutodiffError> {
        let (n, c) = self.rows_cols(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n, c],
                rhs: vec![labels.len()],
            });
        }
        let av = &self.nodes[logits.0].values;
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(AutodiffError::IndexOutOfRange { op: "cross_entropy", index: label, range: c });
            }
            let row = &av[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += log_sum - row[label];
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![total / n as f64],
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec() },
        ))
    }

    /// Mean squared error between same-shape tensors.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: "mse",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let n = self.nodes[a.0].values.len() as f64;
        let v = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let rg = self.requires(&[a, b]);
        Ok(self.push(vec![1], vec![v], rg, Op::Mse(a, b)))
    }

    /// Mean binary cross entropy from logits against constant 0/1 targets.
    pub fn bce_logit(&mut self, logits: TensorId, targets: &[f64]) -> Result<TensorId, AutodiffError> {
        let n = self.nodes[logits.0].values.len();
        if targets.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce_logit",
                lhs: vec![n],
                rhs: vec![targets.len()],
            });
        }
        let v = self.nodes[logits.0]
            .values
            .iter()
            .zip(targets)
            .map(|(z, y)| z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln())
            .sum::<f64>()
            / n as f64;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(vec![1], vec![v], rg, Op::BceLogit { logits, targets: targets.to_vec() }))
    }

    /// Selected rows of a 2-d tensor (scatter-add on backward).
    pub fn gather_rows(&mut self, input: TensorId, rows: &[usize]) -> Result<TensorId, AutodiffError> {
        let (n, d) = self.rows_cols(input, "gather_rows")?;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(AutodiffError::IndexOutOfRange { op: "gather_rows", index: r, range: n });
            }
            out.extend_from_slice(&self.nodes[input.0].values[r * d..(r + 1) * d]);
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(vec![rows.len(), d], out, rg, Op::GatherRows { input, rows: rows.to_vec() }))
    }

    /// Selected elements `input[r, c]` as a vector.
    pub fn gather_elems(&mut self, input: TensorId, idx: &[(usize, usize)]) -> Result<TensorId, AutodiffError> {
        let (n, d) = self.rows_cols(input, "gather_elems")?;
        let mut out = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= n || c >= d {
                return Err(AutodiffError::IndexOutOfRange { op: "gather_elems", index: r * d + c, range: n * d });
            }
            out.push(self.nodes[input.0].values[r * d + c]);
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(vec![idx.len()], out, rg, Op::GatherElems { input, idx: idx.to_vec() }))
    }

    /// Dot product with a constant weight vector, yielding a scalar.
    pub fn weighted_sum(&mut self, input: TensorId, weights: &[f64]) -> Result<TensorId, AutodiffError> {
        let n = self.nodes[input.0].values.len();
        if weights.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "weighted_sum",
                lhs: vec![n],
                rhs: vec![weights.len()],
            });
        }
        let v: f64 = self.nodes[input.0].values.iter().zip(weights).map(|(x, w)| x * w).sum();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(vec![1], vec![v], rg, Op::WeightedSum { input, weights: weights.to_vec() }))
    }

    /// Interleaves three `[n, d]` tensors row-wise into `[3n, d]`:
    /// rows `3i, 3i+1, 3i+2` come from `a, b, c` respectively.
    pub fn interleave3(&mut self, a: TensorId, b: TensorId, c: TensorId) -> Result<TensorId, AutodiffError> {
        let (n, d) = self.rows_cols(a, "interleave3")?;
        for t in [b, c] {
            if self.shape(t) != [n, d] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "interleave3",
                    lhs: vec![n, d],
                    rhs: self.shape(t).to_vec(),
                });
            }
        }
        let mut out = vec![0.0; 3 * n * d];
        for i in 0..n {
            out[(3 * i) * d..(3 * i + 1) * d]
                .copy_from_slice(&self.nodes[a.0].values[i * d..(i + 1) * d]);
            out[(3 * i + 1) * d..(3 * i + 2) * d]
                .copy_from_slice(&self.nodes[b.0].values[i * d..(i + 1) * d]);
            out[(3 * i + 2) * d..(3 * i + 3) * d]
                .copy_from_slice(&self.nodes[c.0].values[i * d..(i + 1) * d]);
        }
        let rg = self.requires(&[a, b, c]);
        Ok(self.push(vec![3 * n, d], out, rg, Op::Interleave3(a, b, c)))
    }

    /// `[b*t, h*dh] -> [b*h, t, dh]` head split for attention.
    pub fn split_heads(&mut self, input: TensorId, b: usize, t: usize, h: usize) -> Result<TensorId, AutodiffError> {
        let (rows, cols) = self.rows_cols(input, "split_heads")?;
        if rows != b * t || cols % h != 0 {
            return Err(AutodiffError::BadShape {
                op: "split_heads",
                expect: "rows = b*t and cols divisible by heads",
                got: vec![rows, cols],
            });
        }
        let dh = cols / h;
        let iv = &self.nodes[input.0].values;
        let mut out = vec![0.0; rows * cols];
        for bi in 0..b {
            for ti in 0..t {
                for hi in 0..h {
                    let src = (bi * t + ti) * cols + hi * dh;
                    let dst = ((bi * h + hi) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&iv[src..src + dh]);
                }
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(vec![b * h, t, dh], out, rg, Op::SplitHeads { input, b, t, h }))
    }

    /// Inverse of [`Graph::split_heads`]: `[b*h, t, dh] -> [b*t, h*dh]`.
    pub fn merge_heads(&mut self, input: TensorId, b: usize, t: usize, h: usize) -> Result<TensorId, AutodiffError> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || s[0] != b * h || s[1] != t {
            return Err(AutodiffError::BadShape {
                op: "merge_heads",
                expect: "[b*h, t, dh]",
                got: s,
            });
        }
        let dh = s[2];
        let cols = h * dh;
        let iv = &self.nodes[input.0].values;
        let mut out = vec![0.0; b * t * cols];
        for bi in 0..b {
            for ti in 0..t {
                for hi in 0..h {
                    let src = ((bi * h + hi) * t + ti) * dh;
                    let dst = (bi * t + ti) * cols + hi * dh;
                    out[dst..dst + dh].copy_from_slice(&iv[src..src + dh]);
                }
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(vec![b * t, cols], out, rg, Op::MergeHeads { input, b, t, h }))
    }

    /// Geodesic angle between predicted `[n,2]` (phi, theta) rows and
    /// constant ground-truth angles, as a `[n]` vector.
    pub fn angular_dist(&mut self, pred: TensorId, gt: &[f64]) -> Result<TensorId, AutodiffError> {
        let (n, d) = self.rows_cols(pred, "angular_dist")?;
        if d != 2 || gt.len() != n * 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "angular_dist",
                lhs: vec![n, d],
                rhs: vec![gt.len() / 2, 2],
            });
        }
        let pv = &self.nodes[pred.0].values;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let (pp, tp) = (pv[i * 2], pv[i * 2 + 1]);
            let (pg, tg) = (gt[i * 2], gt[i * 2 + 1]);
            let c = tp.sin() * tg.sin() * (pp - pg).cos() + tp.cos() * tg.cos();
            out[i] = c.clamp(-1.0, 1.0).acos();
        }
        let rg = self.nodes[pred.0].requires_grad;
        Ok(self.push(vec![n], out, rg, Op::AngularDist { pred, gt: gt.to_vec() }))
    }

    /// Elementwise `max(x, c)`; zero gradient at and below the floor.
    pub fn clamp_min(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.max(c)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, out, rg, Op::ClampMin(a, c))
    }

    /// Elementwise natural log.
    pub fn log(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, out, rg, Op::Log(a))
    }

    /// Inverted dropout with a mask drawn once at graph build time.
    pub fn dropout<R: Rng>(&mut self, a: TensorId, rate: f64, rng: &mut R) -> TensorId {
        assert!((0.0..1.0).contains(&rate), "dropout rate in [0,1)");
        if rate == 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, out, rg, Op::Dropout { input: a, mask })
    }

    // ----- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Gradients of requires-grad
    /// leaves accumulate across calls; intermediate gradients are
    /// per-call scratch.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), AutodiffError> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                let slot = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, v) in slot.iter_mut().zip(&g) {
                    *s += v;
                }
            }
        }
        Ok(())
    }

    fn accum(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: TensorId, update: impl FnOnce(&mut [f64])) {
        if !nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].values.len()]);
        update(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                Self::accum(grads, nodes, *a, |da| {
                    // da += g @ b^T
                    for r in 0..m {
                        for c in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[r * n + j] * nodes[b.0].values[c * n + j];
                            }
                            da[r * k + c] += acc;
                        }
                    }
                });
                Self::accum(grads, nodes, *b, |db| {
                    // db += a^T @ g
                    for r in 0..k {
                        for c in 0..n {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += nodes[a.0].values[j * k + r] * g[j * n + c];
                            }
                            db[r * n + c] += acc;
                        }
                    }
                });
            }
            Op::Bmm(a, b) => {
                let (bs, m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1], nodes[a.0].shape[2]);
                let n = nodes[b.0].shape[2];
                Self::accum(grads, nodes, *a, |da| {
                    for bi in 0..bs {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bv = &nodes[b.0].values[bi * k * n..(bi + 1) * k * n];
                        let dab = &mut da[bi * m * k..(bi + 1) * m * k];
                        for r in 0..m {
                            for c in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += gb[r * n + j] * bv[c * n + j];
                                }
                                dab[r * k + c] += acc;
                            }
                        }
                    }
                });
                Self::accum(grads, nodes, *b, |db| {
                    for bi in 0..bs {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let av = &nodes[a.0].values[bi * m * k..(bi + 1) * m * k];
                        let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                        for r in 0..k {
                            for c in 0..n {
                                let mut acc = 0.0;
                                for j in 0..m {
                                    acc += av[j * k + r] * gb[j * n + c];
                                }
                                dbb[r * n + c] += acc;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                Self::accum(grads, nodes, *a, |da| for (d, v) in da.iter_mut().zip(g) { *d += v });
                Self::accum(grads, nodes, *b, |db| for (d, v) in db.iter_mut().zip(g) { *d += v });
            }
            Op::AddBias(a, bias) => {
                let d = nodes[bias.0].values.len();
                Self::accum(grads, nodes, *a, |da| for (x, v) in da.iter_mut().zip(g) { *x += v });
                Self::accum(grads, nodes, *bias, |db| {
                    for (j, v) in g.iter().enumerate() {
                        db[j % d] += v;
                    }
                });
            }
            Op::AddBroadcastMat(a, m) => {
                let plane = nodes[m.0].values.len();
                Self::accum(grads, nodes, *a, |da| for (x, v) in da.iter_mut().zip(g) { *x += v });
                Self::accum(grads, nodes, *m, |dm| {
                    for (j, v) in g.iter().enumerate() {
                        dm[j % plane] += v;
                    }
                });
            }
            Op::Mul(a, b) => {
                Self::accum(grads, nodes, *a, |da| {
                    for (j, v) in g.iter().enumerate() {
                        da[j] += v * nodes[b.0].values[j];
                    }
                });
                Self::accum(grads, nodes, *b, |db| {
                    for (j, v) in g.iter().enumerate() {
                        db[j] += v * nodes[a.0].values[j];
                    }
                });
            }
            Op::MulBias(a, b) => {
                let d = nodes[b.0].values.len();
                Self::accum(grads, nodes, *a, |da| {
                    for (j, v) in g.iter().enumerate() {
                        da[j] += v * nodes[b.0].values[j % d];
                    }
                });
                Self::accum(grads, nodes, *b, |db| {
                    for (j, v) in g.iter().enumerate() {
                        db[j % d] += v * nodes[a.0].values[j];
                    }
                });
            }
            Op::MulRows(a, r) => {
                let d = nodes[a.0].shape[1];
                Self::accum(grads, nodes, *a, |da| {
                    for (j, v) in g.iter().enumerate() {
                        da[j] += v * nodes[r.0].values[j / d];
                    }
                });
                Self::accum(grads, nodes, *r, |dr| {
                    for (j, v) in g.iter().enumerate() {
                        dr[j / d] += v * nodes[a.0].values[j];
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                Self::accum(grads, nodes, *a, |da| for (d, v) in da.iter_mut().zip(g) { *d += s * v });
            }
            Op::AddScalar(a, _) => {
                Self::accum(grads, nodes, *a, |da| for (d, v) in da.iter_mut().zip(g) { *d += v });
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                Self::accum(grads, nodes, *a, |da| {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::TransposeLast(a) => {
                let (b, m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1], nodes[a.0].shape[2]);
                Self::accum(grads, nodes, *a, |da| {
                    for i in 0..b {
                        for r in 0..m {
                            for c in 0..n {
                                da[i * m * n + r * n + c] += g[i * m * n + c * m + r];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                Self::accum(grads, nodes, *a, |da| for (d, v) in da.iter_mut().zip(g) { *d += v });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].values.len();
                    let slice = &g[offset..offset + len];
                    Self::accum(grads, nodes, *p, |dp| {
                        for (d, v) in dp.iter_mut().zip(slice) {
                            *d += v;
                        }
                    });
                    offset += len;
                }
            }
            Op::SliceRows(a, start, _end) => {
                let d = nodes[a.0].shape[1];
                let start = *start;
                Self::accum(grads, nodes, *a, |da| {
                    for (j, v) in g.iter().enumerate() {
                        da[start * d + j] += v;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (n, d) = (nodes[i].shape[0], nodes[i].shape[1]);
                let y = &nodes[i].values;
                Self::accum(grads, nodes, *a, |da| {
                    for r in 0..n {
                        let dot: f64 = (0..d).map(|c| g[r * d + c] * y[r * d + c]).sum();
                        for c in 0..d {
                            da[r * d + c] += y[r * d + c] * (g[r * d + c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let (n, d) = (nodes[i].shape[0], nodes[i].shape[1]);
                let y = &nodes[i].values; // log-probabilities
                Self::accum(grads, nodes, *a, |da| {
                    for r in 0..n {
                        let gsum: f64 = (0..d).map(|c| g[r * d + c]).sum();
                        for c in 0..d {
                            da[r * d + c] += g[r * d + c] - y[r * d + c].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNormRows(a) => {
                let (n, d) = (nodes[i].shape[0], nodes[i].shape[1]);
                let x = &nodes[a.0].values;
                let y = &nodes[i].values;
                Self::accum(grads, nodes, *a, |da| {
                    for r in 0..n {
                        let row = &x[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let g_row = &g[r * d..(r + 1) * d];
                        let y_row = &y[r * d..(r + 1) * d];
                        let g_mean: f64 = g_row.iter().sum::<f64>() / d as f64;
                        let gy_mean: f64 =
                            g_row.iter().zip(y_row).map(|(gv, yv)| gv * yv).sum::<f64>() / d as f64;
                        for c in 0..d {
                            da[r * d + c] += inv * (g_row[c] - g_mean - y_row[c] * gy_mean);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                Self::accum(grads, nodes, *a, |da| {
                    for (j, v) in g.iter().enumerate() {
                        da[j] += v * gelu_grad(nodes[a.0].values[j]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &nodes[i].values;
                Self::accum(grads, nodes, *a, |da| {
                    for (j, v) in g.iter().enumerate() {
                        da[j] += v * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::EmbeddingLookup { table, indices } => {
                let d = nodes[table.0].shape[1];
                Self::accum(grads, nodes, *table, |dt| {
                    for (row, &idx) in indices.iter().enumerate() {
                        for c in 0..d {
                            dt[idx * d + c] += g[row * d + c];
                        }
                    }
                });
            }
            Op::Mean(a) => {
                let n = nodes[a.0].values.len() as f64;
                let gv = g[0] / n;
                Self::accum(grads, nodes, *a, |da| for d in da.iter_mut() { *d += gv });
            }
            Op::Sum(a) => {
                let gv = g[0];
                Self::accum(grads, nodes, *a, |da| for d in da.iter_mut() { *d += gv });
            }
            Op::CrossEntropy { logits, labels } => {
                let (n, c) = (nodes[logits.0].shape[0], nodes[logits.0].shape[1]);
                let x = &nodes[logits.0].values;
                let gv = g[0] / n as f64;
                Self::accum(grads, nodes, *logits, |dl| {
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &x[r * c..(r + 1) * c];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - max).exp() / sum;
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dl[r * c + j] += gv * (p - onehot);
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let n = nodes[a.0].values.len() as f64;
                let gv = g[0] * 2.0 / n;
                Self::accum(grads, nodes, *a, |da| {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += gv * (nodes[a.0].values[j] - nodes[b.0].values[j]);
                    }
                });
                Self::accum(grads, nodes, *b, |db| {
                    for (j, d) in db.iter_mut().enumerate() {
                        *d -= gv * (nodes[a.0].values[j] - nodes[b.0].values[j]);
                    }
                });
            }
            Op::BceLogit { logits, targets } => {
                let n = nodes[logits.0].values.len() as f64;
                let gv = g[0] / n;
                Self::accum(grads, nodes, *logits, |dl| {
                    for (j, d) in dl.iter_mut().enumerate() {
                        *d += gv * (sigmoid(nodes[logits.0].values[j]) - targets[j]);
                    }
                });
            }
            Op::GatherRows { input, rows } => {
                let d = nodes[input.0].shape[1];
                Self::accum(grads, nodes, *input, |di| {
                    for (row, &src) in rows.iter().enumerate() {
                        for c in 0..d {
                            di[src * d + c] += g[row * d + c];
                        }
                    }
                });
            }
            Op::GatherElems { input, idx } => {
                let d = nodes[input.0].shape[1];
                Self::accum(grads, nodes, *input, |di| {
                    for (j, &(r, c)) in idx.iter().enumerate() {
                        di[r * d + c] += g[j];
                    }
                });
            }
            Op::WeightedSum { input, weights } => {
                let gv = g[0];
                Self::accum(grads, nodes, *input, |di| {
                    for (d, w) in di.iter_mut().zip(weights) {
                        *d += gv * w;
                    }
                });
            }
            Op::Interleave3(a, b, c) => {
                let d = nodes[a.0].shape[1];
                let n = nodes[a.0].shape[0];
                for (slot, t) in [(0usize, a), (1, b), (2, c)] {
                    Self::accum(grads, nodes, *t, |dt| {
                        for r in 0..n {
                            for col in 0..d {
                                dt[r * d + col] += g[(3 * r + slot) * d + col];
                            }
                        }
                    });
                }
            }
            Op::SplitHeads { input, b, t, h } => {
                let cols = nodes[input.0].shape[1];
                let dh = cols / h;
                let (b, t, h) = (*b, *t, *h);
                Self::accum(grads, nodes, *input, |di| {
                    for bi in 0..b {
                        for ti in 0..t {
                            for hi in 0..h {
                                let dst = (bi * t + ti) * cols + hi * dh;
                                let src = ((bi * h + hi) * t + ti) * dh;
                                for c in 0..dh {
                                    di[dst + c] += g[src + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { input, b, t, h } => {
                let dh = nodes[input.0].shape[2];
                let cols = h * dh;
                let (b, t, h) = (*b, *t, *h);
                Self::accum(grads, nodes, *input, |di| {
                    for bi in 0..b {
                        for ti in 0..t {
                            for hi in 0..h {
                                let src = (bi * t + ti) * cols + hi * dh;
                                let dst = ((bi * h + hi) * t + ti) * dh;
                                for c in 0..dh {
                                    di[dst + c] += g[src + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::AngularDist { pred, gt } => {
                let n = nodes[i].values.len();
                let pv = &nodes[pred.0].values;
                Self::accum(grads, nodes, *pred, |dp| {
                    for j in 0..n {
                        let (pp, tp) = (pv[j * 2], pv[j * 2 + 1]);
                        let (pg, tg) = (gt[j * 2], gt[j * 2 + 1]);
                        let c = tp.sin() * tg.sin() * (pp - pg).cos() + tp.cos() * tg.cos();
                        let denom = (1.0 - c * c).max(1e-12).sqrt();
                        let dc_dphi = -tp.sin() * tg.sin() * (pp - pg).sin();
                        let dc_dtheta = tp.cos() * tg.sin() * (pp - pg).cos() - tp.sin() * tg.cos();
                        dp[j * 2] += g[j] * (-dc_dphi / denom);
                        dp[j * 2 + 1] += g[j] * (-dc_dtheta / denom);
                    }
                });
            }
            Op::ClampMin(a, c) => {
                let c = *c;
                Self::accum(grads, nodes, *a, |da| {
                    for (j, v) in g.iter().enumerate() {
                        if nodes[a.0].values[j] > c {
                            da[j] += v;
                        }
                    }
                });
            }
            Op::Log(a) => {
                Self::accum(grads, nodes, *a, |da| {
                    for (j, v) in g.iter().enumerate() {
                        da[j] += v / nodes[a.0].values[j];
                    }
                });
            }
            Op::Dropout { input, mask } => {
                Self::accum(grads, nodes, *input, |di| {
                    for (j, v) in g.iter().enumerate() {
                        di[j] += v * mask[j];
                    }
                });
            }
        }
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // i-k-j loop order keeps the inner loop contiguous in b and out.
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

// ----- optimizer ------------------------------------------------------------

/// Bias-corrected Adam over a fixed list of parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_lens: &[usize], lr: f64) -> Self {
        AdamState {
            m: param_lens.iter().map(|n| vec![0.0; *n]).collect(),
            v: param_lens.iter().map(|n| vec![0.0; *n]).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update across all parameter arrays; `lr_scale` supports warmup.
pub fn adam_step(
    params: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr_scale: f64,
) -> Result<(), AutodiffError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let lr = state.lr * lr_scale;
    for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![p.len()],
                rhs: vec![g.len()],
            });
        }
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        for j in 0..p.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

// ----- gradient checking ------------------------------------------------------

/// Max relative error between the backward gradient and central finite
/// differences of a scalar-valued graph function at `x`.
pub fn grad_check<F>(f: F, x: &[f64], h: f64) -> f64
where
    F: Fn(&mut Graph, TensorId) -> TensorId,
{
    let mut g = Graph::new();
    let leaf = g.leaf(vec![x.len()], x.to_vec(), true);
    let loss = f(&mut g, leaf);
    g.backward(loss).expect("scalar loss");
    let analytic = g.grad(leaf).expect("leaf gradient").to_vec();

    let eval = |xs: &[f64]| -> f64 {
        let mut g = Graph::new();
        let leaf = g.leaf(vec![xs.len()], xs.to_vec(), false);
        let loss = f(&mut g, leaf);
        g.scalar_value(loss)
    };

    let mut max_rel = 0.0f64;
    let mut xs = x.to_vec();
    for i in 0..xs.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = eval(&xs);
        xs[i] = orig - h;
        let fm = eval(&xs);
        xs[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-10);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    max_rel
}
