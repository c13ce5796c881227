//! The define-by-run computation graph.
//!
//! Operations execute eagerly and append a node recording their inputs; the
//! backward pass walks the node list in reverse (which is a valid reverse
//! topological order because inputs always precede outputs) and accumulates
//! gradients with `+=`, so shared subexpressions sum their contributions.
//!
//! Shape mismatches are programming errors and panic; data-dependent failures
//! (non-scalar loss, repeated backward, empty cross-entropy mean) are `Err`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Tensor, IGNORE_TARGET};
use crate::error::NumericsError;

/// Identity of a value within one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// How cross-entropy reduces over rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over non-ignored rows. Errors when every row is ignored.
    Mean,
    /// Sum over non-ignored rows; zero rows give loss 0.
    Sum,
}

const GELU_COEF: f64 = 0.044715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (sqrt_2_over_pi() * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = sqrt_2_over_pi();
    let inner = c * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = c * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId, row_broadcast: bool },
    Mul { a: NodeId, b: NodeId, row_broadcast: bool },
    Scale { a: NodeId, factor: f64 },
    Gelu { a: NodeId },
    Tanh { a: NodeId },
    GatherRows { a: NodeId, rows: Vec<usize> },
    SliceCols { a: NodeId, start: usize, width: usize },
    ConcatCols { parts: Vec<NodeId> },
    SoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    CrossEntropy { logits: NodeId, targets: Vec<u32>, reduction: Reduction },
    Sum { a: NodeId },
    Dropout { a: NodeId, keep_scale: Vec<f64> },
}

struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    grad: Vec<f64>,
    op: Op,
}

/// Ordered record of operations with storage for values and gradients.
/// Single-threaded; build one per training step (or per batch chunk).
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_done: false }
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { values, shape, grad: Vec::new(), op });
        id
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the loss w.r.t. this node. Panics before [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> &[f64] {
        assert!(self.backward_done, "gradient read before backward");
        &self.nodes[id.0].grad
    }

    fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.0].shape[0]
    }

    fn cols(&self, id: NodeId) -> usize {
        let s = &self.nodes[id.0].shape;
        assert_eq!(s.len(), 2, "expected 2-d node, got shape {s:?}");
        s[1]
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.values().to_vec(), t.shape().to_vec(), Op::Leaf)
    }

    pub fn leaf_owned(&mut self, t: Tensor) -> NodeId {
        let Tensor { shape, values } = t;
        self.push(values, shape, Op::Leaf)
    }

    // ── Forward operations ──────────────────────────────────────────

    /// Matrix product `[m×k] × [k×n] -> [m×n]`. Panics on inner-dimension mismatch.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = (self.rows(a), self.cols(a));
        let (kb, n) = (self.rows(b), self.cols(b));
        assert_eq!(ka, kb, "matmul inner dimensions disagree: {ka} vs {kb}");
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..ka {
                let aip = av[i * ka + p];
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        self.push(out, vec![m, n], Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        self.push(out, vec![c, r], Op::Transpose { a })
    }

    /// Elementwise sum. `b` may be a `[cols]` vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Add { a, b, row_broadcast: false }, |x, y| x + y)
    }

    /// Elementwise product, same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Mul { a, b, row_broadcast: false }, |x, y| x * y)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: fn(f64, f64) -> f64) -> NodeId {
        let ashape = self.nodes[a.0].shape.clone();
        let bshape = self.nodes[b.0].shape.clone();
        let (out, row_broadcast) = if ashape == bshape {
            let o = self.nodes[a.0]
                .values
                .iter()
                .zip(&self.nodes[b.0].values)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (o, false)
        } else if ashape.len() == 2 && bshape == [ashape[1]] {
            let c = ashape[1];
            let av = &self.nodes[a.0].values;
            let bv = &self.nodes[b.0].values;
            let o = av.iter().enumerate().map(|(i, &x)| f(x, bv[i % c])).collect();
            (o, true)
        } else {
            panic!("incompatible shapes {ashape:?} and {bshape:?}");
        };
        let op = match op {
            Op::Add { a, b, .. } => Op::Add { a, b, row_broadcast },
            Op::Mul { a, b, .. } => Op::Mul { a, b, row_broadcast },
            _ => unreachable!(),
        };
        self.push(out, ashape, op)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.nodes[a.0].values.iter().map(|&x| x * factor).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::Scale { a, factor })
    }

    /// GELU with the tanh approximation: `0.5·x·(1 + tanh(√(2/π)(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].values.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::Gelu { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].values.iter().map(|&x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::Tanh { a })
    }

    /// Select rows of a 2-d node; used for embedding lookup and position
    /// selection. Rows may repeat; gradients scatter-add back.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            assert!(row < r, "gather row {row} out of range 0..{r}");
            out.extend_from_slice(&av[row * c..(row + 1) * c]);
        }
        self.push(out, vec![rows.len(), c], Op::GatherRows { a, rows: rows.to_vec() })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert!(start + width <= c, "column slice {start}..{} out of range 0..{c}", start + width);
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + width]);
        }
        self.push(out, vec![r, width], Op::SliceCols { a, start, width })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.rows(parts[0]);
        let widths: Vec<usize> = parts.iter().map(|&p| self.cols(p)).collect();
        for &p in parts {
            assert_eq!(self.rows(p), r, "concat_cols parts must share row count");
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = &self.nodes[p.0].values;
                out.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        self.push(out, vec![r, total], Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Row-wise softmax with max-subtraction. `col_mask[j] == false` forces
    /// probability 0 in column j (the attention-padding mask); each row
    /// normalizes over the unmasked columns, which must be non-empty.
    pub fn softmax_rows(&mut self, a: NodeId, col_mask: Option<&[bool]>) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        if let Some(m) = col_mask {
            assert_eq!(m.len(), c, "column mask length must equal column count");
            assert!(m.iter().any(|&x| x), "softmax over fully masked row");
        }
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mut maxv = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if col_mask.map_or(true, |m| m[j]) {
                    maxv = maxv.max(x);
                }
            }
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if col_mask.map_or(true, |m| m[j]) {
                    let e = (x - maxv).exp();
                    out[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        self.push(out, vec![r, c], Op::SoftmaxRows { a })
    }

    /// Per-row normalization to zero mean, unit variance, then affine
    /// transform by `gain` and `bias` (both `[cols]`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        assert!(c > 0, "layer_norm over zero-width rows");
        assert_eq!(self.nodes[gain.0].shape, [c], "gain must be [cols]");
        assert_eq!(self.nodes[bias.0].shape, [c], "bias must be [cols]");
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gain.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        self.push(out, vec![r, c], Op::LayerNorm { x, gain, bias, eps })
    }

    /// Mean (or sum) negative log-likelihood of `targets` under row-wise
    /// softmax of `logits`, stabilized by max-subtraction. Rows whose target
    /// is [`IGNORE_TARGET`] are excluded.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        reduction: Reduction,
    ) -> Result<NodeId, NumericsError> {
        let (n, v) = (self.rows(logits), self.cols(logits));
        assert_eq!(targets.len(), n, "one target per logit row");
        let lv = &self.nodes[logits.0].values;
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE_TARGET {
                continue;
            }
            assert!((t as usize) < v, "target {t} out of range for {v} classes");
            let row = &lv[i * v..(i + 1) * v];
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - maxv).exp()).sum::<f64>().ln() + maxv;
            total += lse - row[t as usize];
            count += 1;
        }
        let loss = match reduction {
            Reduction::Mean => {
                if count == 0 {
                    return Err(NumericsError::AllRowsIgnored);
                }
                total / count as f64
            }
            Reduction::Sum => total,
        };
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy { logits, targets: targets.to_vec(), reduction },
        ))
    }

    /// Full reduction to a scalar `[1]`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        self.push(vec![s], vec![1], Op::Sum { a })
    }

    /// Inverted dropout: keeps each element with probability `1 - rate`,
    /// scaling kept elements by `1/(1-rate)`. `rate == 0` is the identity
    /// and records nothing.
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        if rate == 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let keep_scale: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 })
            .collect();
        let out = self.nodes[a.0]
            .values
            .iter()
            .zip(&keep_scale)
            .map(|(&x, &k)| x * k)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::Dropout { a, keep_scale })
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populate gradients of every node w.r.t. the scalar `loss`
    /// (`∂loss/∂loss = 1`). Errors on a non-scalar loss and on a second
    /// call without rebuilding the graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        if self.backward_done {
            return Err(NumericsError::BackwardAlreadyRun);
        }
        if self.nodes[loss.0].values.len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        for node in &mut self.nodes {
            node.grad = vec![0.0; node.values.len()];
        }
        self.nodes[loss.0].grad[0] = 1.0;
        self.backward_done = true;

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let grad = std::mem::take(&mut self.nodes[i].grad);
            self.backprop_node(i, &op, &grad);
            self.nodes[i].grad = grad;
        }
        Ok(())
    }

    fn backprop_node(&mut self, node: usize, op: &Op, grad: &[f64]) {
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.cols(*b);
                // dA[i,p] += Σ_j G[i,j]·B[p,j]
                let bv = self.nodes[b.0].values.clone();
                {
                    let da = &mut self.nodes[a.0].grad;
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grad[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                }
                // dB[p,j] += Σ_i A[i,p]·G[i,j]
                let av = self.nodes[a.0].values.clone();
                let db = &mut self.nodes[b.0].grad;
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * grad[i * n + j];
                        }
                    }
                }
            }

            Op::Transpose { a } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                let da = &mut self.nodes[a.0].grad;
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += grad[j * r + i];
                    }
                }
            }

            Op::Add { a, b, row_broadcast } => {
                for (g, d) in grad.iter().zip(self.nodes[a.0].grad.iter_mut()) {
                    *d += g;
                }
                if *row_broadcast {
                    let c = self.nodes[b.0].values.len();
                    let db = &mut self.nodes[b.0].grad;
                    for (i, g) in grad.iter().enumerate() {
                        db[i % c] += g;
                    }
                } else {
                    for (g, d) in grad.iter().zip(self.nodes[b.0].grad.iter_mut()) {
                        *d += g;
                    }
                }
            }

            Op::Mul { a, b, row_broadcast } => {
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                if *row_broadcast {
                    let c = bv.len();
                    for (i, g) in grad.iter().enumerate() {
                        self.nodes[a.0].grad[i] += g * bv[i % c];
                    }
                    for (i, g) in grad.iter().enumerate() {
                        self.nodes[b.0].grad[i % c] += g * av[i];
                    }
                } else {
                    for (i, g) in grad.iter().enumerate() {
                        self.nodes[a.0].grad[i] += g * bv[i];
                        self.nodes[b.0].grad[i] += g * av[i];
                    }
                }
            }

            Op::Scale { a, factor } => {
                for (g, d) in grad.iter().zip(self.nodes[a.0].grad.iter_mut()) {
                    *d += g * factor;
                }
            }

            Op::Gelu { a } => {
                let av = self.nodes[a.0].values.clone();
                for (i, g) in grad.iter().enumerate() {
                    self.nodes[a.0].grad[i] += g * gelu_grad_scalar(av[i]);
                }
            }

            Op::Tanh { a } => {
                let out = self.nodes[node].values.clone();
                for (i, g) in grad.iter().enumerate() {
                    self.nodes[a.0].grad[i] += g * (1.0 - out[i] * out[i]);
                }
            }

            Op::GatherRows { a, rows } => {
                let c = self.cols(*a);
                let da = &mut self.nodes[a.0].grad;
                for (i, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        da[row * c + j] += grad[i * c + j];
                    }
                }
            }

            Op::SliceCols { a, start, width } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                let da = &mut self.nodes[a.0].grad;
                for i in 0..r {
                    for j in 0..*width {
                        da[i * c + start + j] += grad[i * width + j];
                    }
                }
            }

            Op::ConcatCols { parts } => {
                let r = self.rows(parts[0]);
                let total: usize = parts.iter().map(|&p| self.cols(p)).collect::<Vec<_>>().iter().sum();
                let mut offset = 0;
                for &p in parts {
                    let w = self.cols(p);
                    let dp = &mut self.nodes[p.0].grad;
                    for i in 0..r {
                        for j in 0..w {
                            dp[i * w + j] += grad[i * total + offset + j];
                        }
                    }
                    offset += w;
                }
            }

            Op::SoftmaxRows { a } => {
                // dx_j = p_j·(g_j − Σ_k g_k·p_k); masked columns have p == 0.
                let (r, c) = {
                    let s = &self.nodes[node].shape;
                    (s[0], s[1])
                };
                let probs = self.nodes[node].values.clone();
                let da = &mut self.nodes[a.0].grad;
                for i in 0..r {
                    let p = &probs[i * c..(i + 1) * c];
                    let g = &grad[i * c..(i + 1) * c];
                    let dot: f64 = p.iter().zip(g).map(|(&pi, &gi)| pi * gi).sum();
                    for j in 0..c {
                        da[i * c + j] += p[j] * (g[j] - dot);
                    }
                }
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let (r, c) = (self.rows(*x), self.cols(*x));
                let xv = self.nodes[x.0].values.clone();
                let gv = self.nodes[gain.0].values.clone();
                let cf = c as f64;
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let g = &grad[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / cf;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();

                    for j in 0..c {
                        self.nodes[gain.0].grad[j] += g[j] * xhat[j];
                        self.nodes[bias.0].grad[j] += g[j];
                    }
                    let dxhat: Vec<f64> = (0..c).map(|j| g[j] * gv[j]).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum();
                    let dx = &mut self.nodes[x.0].grad;
                    for j in 0..c {
                        dx[i * c + j] +=
                            inv_std / cf * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
            }

            Op::CrossEntropy { logits, targets, reduction } => {
                let (n, v) = (self.rows(*logits), self.cols(*logits));
                let lv = self.nodes[logits.0].values.clone();
                let count = targets.iter().filter(|&&t| t != IGNORE_TARGET).count();
                let norm = match reduction {
                    Reduction::Mean => 1.0 / count as f64,
                    Reduction::Sum => 1.0,
                };
                let g0 = grad[0] * norm;
                let dl = &mut self.nodes[logits.0].grad;
                for i in 0..n {
                    let t = targets[i];
                    if t == IGNORE_TARGET {
                        continue;
                    }
                    let row = &lv[i * v..(i + 1) * v];
                    let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&x| (x - maxv).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for j in 0..v {
                        let p = exps[j] / sum;
                        let indicator = if j == t as usize { 1.0 } else { 0.0 };
                        dl[i * v + j] += g0 * (p - indicator);
                    }
                }
            }

            Op::Sum { a } => {
                let g = grad[0];
                for d in self.nodes[a.0].grad.iter_mut() {
                    *d += g;
                }
            }

            Op::Dropout { a, keep_scale } => {
                for (i, g) in grad.iter().enumerate() {
                    self.nodes[a.0].grad[i] += g * keep_scale[i];
                }
            }
        }
    }
}
