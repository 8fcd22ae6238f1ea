//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Calling
//! [`Tape::backward`] on a scalar node replays the record in reverse and
//! returns gradients for the trainable leaves only; frozen leaves are never
//! touched. A tape is built fresh for each training step and is single
//! threaded; independent tapes may run on different threads concurrently.
//!
//! Values are f32. Reductions (softmax denominators, layer-norm statistics,
//! log-sum-exp in the cross-entropy) accumulate in f64 before rounding back,
//! which keeps finite-difference gradient checks tight at desk scale.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Index of a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded primitive applications. Ids refer to earlier nodes on the tape.
#[derive(Debug, Clone)]
enum Op {
    Leaf {
        trainable: bool,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Row-broadcast add: [m x n] + [n].
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f32,
    },
    RowSoftmax {
        a: NodeId,
        mask: Option<Vec<bool>>,
    },
    RowL1Normalize {
        a: NodeId,
        mask: Option<Vec<bool>>,
    },
    LayerNorm {
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f32,
    },
    Gelu {
        a: NodeId,
    },
    GatherRows {
        a: NodeId,
        indices: Vec<usize>,
    },
    /// Copy `base`, replacing row `positions[i]` with row `i` of `rows`.
    OverwriteRows {
        base: NodeId,
        rows: NodeId,
        positions: Vec<usize>,
    },
    SliceCols {
        a: NodeId,
        start: usize,
        end: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    SumAll {
        a: NodeId,
    },
    /// Place `units[i]` at `edges[i]` of a zero matrix with `cols` columns.
    ScatterToMatrix {
        units: NodeId,
        cols: usize,
        edges: Vec<(usize, usize)>,
    },
    CrossEntropyLogits {
        logits: NodeId,
        target: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by trainable leaf, as returned by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(&id.0)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.by_node.contains_key(&id.0)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

/// The √(2/π) constant of the tanh-approximation GELU.
pub const GELU_SQRT_2_OVER_PI: f32 = 0.797_884_6;
/// Cubic coefficient of the tanh-approximation GELU.
pub const GELU_CUBIC: f32 = 0.044_715;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node. Panics on a foreign id (programming error).
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn check(&self, id: NodeId, op: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "{op}: node {} is not on this tape (len {})",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(id)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Registers a leaf. Trainability follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        let trainable = t.requires_grad();
        self.push(t.clone(), Op::Leaf { trainable }, trainable)
    }

    /// Registers a frozen constant leaf regardless of the grad flag.
    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(t, Op::Leaf { trainable: false }, false)
    }

    /// Standard matrix product. 1-D operands are treated as row vectors;
    /// the output is always 2-D.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_vec(vec![m, n], out)?,
            Op::MatMul { a, b },
            needs,
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "transpose")?;
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::from_vec(vec![n, m], out)?, Op::Transpose { a }, needs)
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f32> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_vec(ta.shape().to_vec(), out)?,
            Op::Add { a, b },
            needs,
        )
    }

    /// Adds a length-n bias vector to every row of an [m x n] tensor.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(a, "add_bias")?;
        self.check(bias, "add_bias")?;
        let (ta, tb) = (self.value(a), self.value(bias));
        let (m, n) = (ta.rows(), ta.cols());
        if tb.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = ta.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += tb.data()[j];
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        self.push(
            Tensor::from_vec(ta.shape().to_vec(), out)?,
            Op::AddBias { a, bias },
            needs,
        )
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> Result<NodeId> {
        self.check(a, "scale")?;
        let ta = self.value(a);
        let out: Vec<f32> = ta.data().iter().map(|x| x * factor).collect();
        let needs = self.needs(a);
        self.push(
            Tensor::from_vec(ta.shape().to_vec(), out)?,
            Op::Scale { a, factor },
            needs,
        )
    }

    /// Row-wise softmax, stabilized by row-max subtraction, denominators
    /// accumulated in f64. Masked entries are exactly zero; every row must
    /// keep at least one unmasked entry.
    pub fn row_softmax(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        self.check(a, "row_softmax")?;
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mask = validate_mask(mask, m, n, "row_softmax")?;
        let out = row_softmax_raw(ta.data(), m, n, mask.as_deref())?;
        let needs = self.needs(a);
        self.push(
            Tensor::from_vec(ta.shape().to_vec(), out)?,
            Op::RowSoftmax { a, mask },
            needs,
        )
    }

    /// Row-wise L1 normalization over the unmasked support. Entries must be
    /// nonnegative; an all-zero row is degenerate.
    pub fn row_l1_normalize(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        self.check(a, "row_l1_normalize")?;
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mask = validate_mask(mask, m, n, "row_l1_normalize")?;
        let out = row_l1_raw(ta.data(), m, n, mask.as_deref())?;
        let needs = self.needs(a);
        self.push(
            Tensor::from_vec(ta.shape().to_vec(), out)?,
            Op::RowL1Normalize { a, mask },
            needs,
        )
    }

    /// Layer normalization over the last axis followed by the affine
    /// transform `gain * x_hat + bias`. Statistics accumulate in f64.
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId, eps: f32) -> Result<NodeId> {
        self.check(a, "layer_norm")?;
        self.check(gain, "layer_norm")?;
        self.check(bias, "layer_norm")?;
        if eps <= 0.0 {
            return Err(Error::InvalidTensor("layer_norm eps must be positive".into()));
        }
        let (ta, tg, tb) = (self.value(a), self.value(gain), self.value(bias));
        let (m, n) = (ta.rows(), ta.cols());
        if tg.numel() != n || tb.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: ta.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let (mean, sigma) = layer_norm_stats(row, eps);
            for j in 0..n {
                let xhat = (row[j] as f64 - mean) / sigma;
                out[i * n + j] = (xhat * tg.data()[j] as f64 + tb.data()[j] as f64) as f32;
            }
        }
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        self.push(
            Tensor::from_vec(ta.shape().to_vec(), out)?,
            Op::LayerNorm { a, gain, bias, eps },
            needs,
        )
    }

    /// Elementwise GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "gelu")?;
        let ta = self.value(a);
        let out: Vec<f32> = ta.data().iter().map(|&x| gelu_scalar(x)).collect();
        let needs = self.needs(a);
        self.push(Tensor::from_vec(ta.shape().to_vec(), out)?, Op::Gelu { a }, needs)
    }

    /// Gathers rows of a matrix in the given order (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check(a, "gather_rows")?;
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidTensor(format!(
                "gather_rows: index {bad} out of range for {m} rows"
            )));
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&ta.data()[i * n..(i + 1) * n]);
        }
        let needs = self.needs(a);
        self.push(
            Tensor::from_vec(vec![indices.len(), n], out)?,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            needs,
        )
    }

    /// Copies `base` and replaces row `positions[i]` with row i of `rows`.
    /// Positions must be distinct and in range.
    pub fn overwrite_rows(&mut self, base: NodeId, rows: NodeId, positions: &[usize]) -> Result<NodeId> {
        self.check(base, "overwrite_rows")?;
        self.check(rows, "overwrite_rows")?;
        let (tb, tr) = (self.value(base), self.value(rows));
        let (m, n) = (tb.rows(), tb.cols());
        if tr.cols() != n || tr.rows() != positions.len() {
            return Err(Error::ShapeMismatch {
                op: "overwrite_rows",
                lhs: tb.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let mut seen = vec![false; m];
        for &p in positions {
            if p >= m {
                return Err(Error::InvalidTensor(format!(
                    "overwrite_rows: position {p} out of range for {m} rows"
                )));
            }
            if seen[p] {
                return Err(Error::InvalidTensor(format!(
                    "overwrite_rows: duplicate position {p}"
                )));
            }
            seen[p] = true;
        }
        let mut out = tb.data().to_vec();
        for (i, &p) in positions.iter().enumerate() {
            out[p * n..(p + 1) * n].copy_from_slice(&tr.data()[i * n..(i + 1) * n]);
        }
        let needs = self.needs(base) || self.needs(rows);
        self.push(
            Tensor::from_vec(tb.shape().to_vec(), out)?,
            Op::OverwriteRows {
                base,
                rows,
                positions: positions.to_vec(),
            },
            needs,
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.check(a, "slice_cols")?;
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if start >= end || end > n {
            return Err(Error::InvalidTensor(format!(
                "slice_cols: range {start}..{end} invalid for {n} columns"
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&ta.data()[i * n + start..i * n + end]);
        }
        let needs = self.needs(a);
        self.push(
            Tensor::from_vec(vec![m, w], out)?,
            Op::SliceCols { a, start, end },
            needs,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidTensor("concat_cols: no parts".into()));
        }
        for &p in parts {
            self.check(p, "concat_cols")?;
        }
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::from_vec(vec![m, total], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "sum_all")?;
        let ta = self.value(a);
        let s: f64 = ta.data().iter().map(|&x| x as f64).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s as f32), Op::SumAll { a }, needs)
    }

    /// Scatters a 1-D vector of edge units into a zero matrix. Entry i goes
    /// to position `edges[i]`; everything else is a structural zero.
    pub fn scatter_to_matrix(
        &mut self,
        units: NodeId,
        rows: usize,
        cols: usize,
        edges: &[(usize, usize)],
    ) -> Result<NodeId> {
        self.check(units, "scatter_to_matrix")?;
        let tu = self.value(units);
        if tu.numel() != edges.len() {
            return Err(Error::InvalidTensor(format!(
                "scatter_to_matrix: {} units vs {} edges",
                tu.numel(),
                edges.len()
            )));
        }
        let mut out = vec![0.0f32; rows * cols];
        for (i, &(r, c)) in edges.iter().enumerate() {
            if r >= rows || c >= cols {
                return Err(Error::InvalidTensor(format!(
                    "scatter_to_matrix: edge ({r},{c}) outside {rows}x{cols}"
                )));
            }
            out[r * cols + c] = tu.data()[i];
        }
        let needs = self.needs(units);
        self.push(
            Tensor::from_vec(vec![rows, cols], out)?,
            Op::ScatterToMatrix {
                units,
                cols,
                edges: edges.to_vec(),
            },
            needs,
        )
    }

    /// Cross-entropy of a logit vector against a class index, computed on
    /// the numerically stable log-sum-exp path (f64 accumulation).
    pub fn cross_entropy_logits(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        self.check(logits, "cross_entropy_logits")?;
        let tl = self.value(logits);
        if tl.rows().min(tl.cols()) != 1 {
            return Err(Error::InvalidTensor(format!(
                "cross_entropy_logits: expected a vector, got {:?}",
                tl.shape()
            )));
        }
        let n = tl.numel();
        if target >= n {
            return Err(Error::InvalidTensor(format!(
                "cross_entropy_logits: target {target} out of range for {n} classes"
            )));
        }
        let x = tl.data();
        let max = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = x.iter().map(|&v| ((v as f64) - max).exp()).sum();
        let loss = (max + sum.ln()) - x[target] as f64;
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropyLogits { logits, target },
            needs,
        )
    }

    /// Reverse pass from a scalar loss. Returns a gradient table holding an
    /// entry for every trainable leaf on the tape (zeros if the leaf does not
    /// influence the loss); frozen leaves receive no entry.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss, "backward")?;
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Tape(format!(
                "backward: loss must be scalar, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut table = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { trainable: true } = node.op {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                let t = Tensor::from_vec(node.value.shape().to_vec(), data)?;
                table.by_node.insert(i, t);
            }
        }
        Ok(table)
    }

    fn deposit(&self, grads: &mut [Option<Vec<f32>>], id: NodeId, contrib: &[f32]) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backward_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[idx];
        if !node.needs_grad {
            return Ok(());
        }
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if self.needs(*a) {
                    // dA = dC . B^T
                    let bt = transpose_raw(tb.data(), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.deposit(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T . dC
                    let at = transpose_raw(ta.data(), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.deposit(grads, *b, &db);
                }
            }
            Op::Transpose { a } => {
                let ta = self.value(*a);
                let (m, n) = (ta.rows(), ta.cols());
                // output was [n x m]; transpose the gradient back
                let da = transpose_raw(g, n, m);
                self.deposit(grads, *a, &da);
            }
            Op::Add { a, b } => {
                self.deposit(grads, *a, g);
                self.deposit(grads, *b, g);
            }
            Op::AddBias { a, bias } => {
                self.deposit(grads, *a, g);
                if self.needs(*bias) {
                    let ta = self.value(*a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut db = vec![0.0f32; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    self.deposit(grads, *bias, &db);
                }
            }
            Op::Scale { a, factor } => {
                let da: Vec<f32> = g.iter().map(|x| x * factor).collect();
                self.deposit(grads, *a, &da);
            }
            Op::RowSoftmax { a, mask } => {
                let y = node.value.data();
                let ta = self.value(*a);
                let (m, n) = (ta.rows(), ta.cols());
                let mut da = vec![0.0f32; m * n];
                for i in 0..m {
                    let mut dot = 0.0f64;
                    for j in 0..n {
                        if mask_at(mask, i, j, n) {
                            dot += g[i * n + j] as f64 * y[i * n + j] as f64;
                        }
                    }
                    for j in 0..n {
                        if mask_at(mask, i, j, n) {
                            da[i * n + j] =
                                (y[i * n + j] as f64 * (g[i * n + j] as f64 - dot)) as f32;
                        }
                    }
                }
                self.deposit(grads, *a, &da);
            }
            Op::RowL1Normalize { a, mask } => {
                let y = node.value.data();
                let ta = self.value(*a);
                let (m, n) = (ta.rows(), ta.cols());
                let mut da = vec![0.0f32; m * n];
                for i in 0..m {
                    let mut sum = 0.0f64;
                    let mut dot = 0.0f64;
                    for j in 0..n {
                        if mask_at(mask, i, j, n) {
                            sum += ta.data()[i * n + j] as f64;
                            dot += g[i * n + j] as f64 * y[i * n + j] as f64;
                        }
                    }
                    for j in 0..n {
                        if mask_at(mask, i, j, n) {
                            da[i * n + j] = ((g[i * n + j] as f64 - dot) / sum) as f32;
                        }
                    }
                }
                self.deposit(grads, *a, &da);
            }
            Op::LayerNorm { a, gain, bias, eps } => {
                let ta = self.value(*a);
                let tg = self.value(*gain);
                let (m, n) = (ta.rows(), ta.cols());
                let mut da = vec![0.0f32; m * n];
                let mut dg = vec![0.0f64; n];
                let mut db = vec![0.0f64; n];
                for i in 0..m {
                    let row = &ta.data()[i * n..(i + 1) * n];
                    let (mean, sigma) = layer_norm_stats(row, *eps);
                    let mut mean_dxhat = 0.0f64;
                    let mut mean_dxhat_xhat = 0.0f64;
                    let mut xhat = vec![0.0f64; n];
                    let mut dxhat = vec![0.0f64; n];
                    for j in 0..n {
                        xhat[j] = (row[j] as f64 - mean) / sigma;
                        dxhat[j] = g[i * n + j] as f64 * tg.data()[j] as f64;
                        dg[j] += g[i * n + j] as f64 * xhat[j];
                        db[j] += g[i * n + j] as f64;
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    for j in 0..n {
                        da[i * n + j] =
                            ((dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / sigma) as f32;
                    }
                }
                self.deposit(grads, *a, &da);
                if self.needs(*gain) {
                    let dg32: Vec<f32> = dg.iter().map(|&x| x as f32).collect();
                    self.deposit(grads, *gain, &dg32);
                }
                if self.needs(*bias) {
                    let db32: Vec<f32> = db.iter().map(|&x| x as f32).collect();
                    self.deposit(grads, *bias, &db32);
                }
            }
            Op::Gelu { a } => {
                let ta = self.value(*a);
                let da: Vec<f32> = ta
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| gelu_grad_scalar(x) * gy)
                    .collect();
                self.deposit(grads, *a, &da);
            }
            Op::GatherRows { a, indices } => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0f32; m * n];
                    for (pos, &i) in indices.iter().enumerate() {
                        for j in 0..n {
                            da[i * n + j] += g[pos * n + j];
                        }
                    }
                    self.deposit(grads, *a, &da);
                }
            }
            Op::OverwriteRows {
                base,
                rows,
                positions,
            } => {
                let n = self.value(*base).cols();
                if self.needs(*base) {
                    let mut db = g.to_vec();
                    for &p in positions {
                        db[p * n..(p + 1) * n].fill(0.0);
                    }
                    self.deposit(grads, *base, &db);
                }
                if self.needs(*rows) {
                    let mut dr = vec![0.0f32; positions.len() * n];
                    for (i, &p) in positions.iter().enumerate() {
                        dr[i * n..(i + 1) * n].copy_from_slice(&g[p * n..(p + 1) * n]);
                    }
                    self.deposit(grads, *rows, &dr);
                }
            }
            Op::SliceCols { a, start, end } => {
                let ta = self.value(*a);
                let (m, n) = (ta.rows(), ta.cols());
                let w = end - start;
                let mut da = vec![0.0f32; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.deposit(grads, *a, &da);
            }
            Op::ConcatCols { parts } => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0usize;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = vec![0.0f32; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.deposit(grads, p, &dp);
                    }
                    offset += w;
                }
            }
            Op::SumAll { a } => {
                let ta = self.value(*a);
                let da = vec![g[0]; ta.numel()];
                self.deposit(grads, *a, &da);
            }
            Op::ScatterToMatrix { units, cols, edges } => {
                if self.needs(*units) {
                    let du: Vec<f32> = edges.iter().map(|&(r, c)| g[r * cols + c]).collect();
                    self.deposit(grads, *units, &du);
                }
            }
            Op::CrossEntropyLogits { logits, target } => {
                let tl = self.value(*logits);
                let x = tl.data();
                let n = x.len();
                let max = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let sum: f64 = x.iter().map(|&v| ((v as f64) - max).exp()).sum();
                let mut dl = vec![0.0f32; n];
                for j in 0..n {
                    let p = ((x[j] as f64) - max).exp() / sum;
                    let delta = if j == *target { 1.0 } else { 0.0 };
                    dl[j] = ((p - delta) * g[0] as f64) as f32;
                }
                self.deposit(grads, *logits, &dl);
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::AddBias { .. } => "add_bias",
        Op::Scale { .. } => "scale",
        Op::RowSoftmax { .. } => "row_softmax",
        Op::RowL1Normalize { .. } => "row_l1_normalize",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu { .. } => "gelu",
        Op::GatherRows { .. } => "gather_rows",
        Op::OverwriteRows { .. } => "overwrite_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SumAll { .. } => "sum_all",
        Op::ScatterToMatrix { .. } => "scatter_to_matrix",
        Op::CrossEntropyLogits { .. } => "cross_entropy_logits",
    }
}

fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn validate_mask(
    mask: Option<&[bool]>,
    m: usize,
    n: usize,
    op: &'static str,
) -> Result<Option<Vec<bool>>> {
    match mask {
        None => Ok(None),
        Some(mk) => {
            if mk.len() != m * n {
                return Err(Error::InvalidTensor(format!(
                    "{op}: mask length {} does not match {m}x{n}",
                    mk.len()
                )));
            }
            Ok(Some(mk.to_vec()))
        }
    }
}

fn mask_at(mask: &Option<Vec<bool>>, i: usize, j: usize, n: usize) -> bool {
    mask.as_ref().is_none_or(|m| m[i * n + j])
}

fn row_softmax_raw(x: &[f32], m: usize, n: usize, mask: Option<&[bool]>) -> Result<Vec<f32>> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let live = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
        let mut max = f32::NEG_INFINITY;
        for j in 0..n {
            if live(j) {
                max = max.max(x[i * n + j]);
            }
        }
        if max == f32::NEG_INFINITY {
            return Err(Error::DegenerateRow {
                op: "row_softmax",
                row: i,
                detail: "every entry is masked".into(),
            });
        }
        let mut sum = 0.0f64;
        for j in 0..n {
            if live(j) {
                sum += ((x[i * n + j] - max) as f64).exp();
            }
        }
        for j in 0..n {
            if live(j) {
                out[i * n + j] = (((x[i * n + j] - max) as f64).exp() / sum) as f32;
            }
        }
    }
    Ok(out)
}

fn row_l1_raw(x: &[f32], m: usize, n: usize, mask: Option<&[bool]>) -> Result<Vec<f32>> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let live = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
        let mut sum = 0.0f64;
        let mut any = false;
        for j in 0..n {
            if live(j) {
                any = true;
                let v = x[i * n + j];
                if v < 0.0 {
                    return Err(Error::DegenerateRow {
                        op: "row_l1_normalize",
                        row: i,
                        detail: format!("negative entry {v} is not admissible"),
                    });
                }
                sum += v as f64;
            }
        }
        if !any || sum == 0.0 {
            return Err(Error::DegenerateRow {
                op: "row_l1_normalize",
                row: i,
                detail: "row has no positive mass".into(),
            });
        }
        for j in 0..n {
            if live(j) {
                out[i * n + j] = ((x[i * n + j] as f64) / sum) as f32;
            }
        }
    }
    Ok(out)
}

fn layer_norm_stats(row: &[f32], eps: f32) -> (f64, f64) {
    let n = row.len() as f64;
    let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = row
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, (var + eps as f64).sqrt())
}

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let a = tape.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row() {
        let mut tape = Tape::new();
        let sel = tape.constant(t(vec![1, 2], vec![1.0, 0.0])).unwrap();
        let v = tape.constant(t(vec![2, 1], vec![5.5, -2.0])).unwrap();
        let c = tape.matmul(sel, v).unwrap();
        assert_eq!(tape.value(c).data(), &[5.5]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![4, 2])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_row() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![1, 3], vec![0.0, 0.0, 0.0])).unwrap();
        let y = tape.row_softmax(a, None).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let mut tape = Tape::new();
        let a = tape
            .constant(t(vec![1, 2], vec![2.0f32.ln(), 0.0]))
            .unwrap();
        let y = tape.row_softmax(a, Some(&[true, true])).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_masked_row_matches_oracle() {
        // oracle: exponentiate only the unmasked entries and normalize
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![1, 3], vec![5.0, 9.0, 7.0])).unwrap();
        let y = tape.row_softmax(a, Some(&[true, false, true])).unwrap();
        let d = tape.value(y).data();
        let e5 = (5.0f64 - 7.0).exp();
        let e7 = 1.0f64;
        assert!((d[0] as f64 - e5 / (e5 + e7)).abs() < 1e-6);
        assert_eq!(d[1], 0.0);
        assert!((d[2] as f64 - e7 / (e5 + e7)).abs() < 1e-6);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_fully_masked_row_is_degenerate() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![1, 2], vec![1.0, 2.0])).unwrap();
        let err = tape.row_softmax(a, Some(&[false, false])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { .. }));
    }

    #[test]
    fn l1_normalize_rejects_zero_row_and_negatives() {
        let mut tape = Tape::new();
        let z = tape.constant(t(vec![1, 2], vec![0.0, 0.0])).unwrap();
        assert!(matches!(
            tape.row_l1_normalize(z, None).unwrap_err(),
            Error::DegenerateRow { .. }
        ));
        let neg = tape.constant(t(vec![1, 2], vec![1.0, -1.0])).unwrap();
        assert!(matches!(
            tape.row_l1_normalize(neg, None).unwrap_err(),
            Error::DegenerateRow { .. }
        ));
        let ok = tape.constant(t(vec![1, 2], vec![1.0, 3.0])).unwrap();
        let y = tape.row_l1_normalize(ok, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, 0.75]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![1, 4], vec![3.0; 4])).unwrap();
        let g1 = tape.constant(Tensor::filled(vec![4], 1.0)).unwrap();
        let b0 = tape.constant(Tensor::zeros(vec![4])).unwrap();
        let y = tape.layer_norm(a, g1, b0, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_unit_variance_pair() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![1, 2], vec![1.0, -1.0])).unwrap();
        let g1 = tape.constant(Tensor::filled(vec![2], 1.0)).unwrap();
        let b0 = tape.constant(Tensor::zeros(vec![2])).unwrap();
        let y = tape.layer_norm(a, g1, b0, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-5);
        assert!((d[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-4);
        // antisymmetric-ish tail: large negative goes to ~0
        assert!(gelu_scalar(-10.0).abs() < 1e-4);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = Tensor::from_vec(vec![2, 3], vec![0.5; 6]).unwrap().with_grad();
        let w_id = tape.leaf(&w).unwrap();
        let s = tape.sum_all(w_id).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w_id).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn frozen_leaf_gets_no_entry_and_is_unchanged() {
        let mut tape = Tape::new();
        let w = Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0])
            .unwrap()
            .with_grad();
        let v = Tensor::from_vec(vec![3, 1], vec![4.0, 5.0, 6.0]).unwrap();
        let w_id = tape.leaf(&w).unwrap();
        let v_id = tape.leaf(&v).unwrap();
        let dot = tape.matmul(w_id, v_id).unwrap();
        let s = tape.sum_all(dot).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.contains(w_id));
        assert!(!grads.contains(v_id));
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get(w_id).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(tape.value(v_id).data(), v.data());
    }

    #[test]
    fn fanout_accumulates_gradients() {
        let mut tape = Tape::new();
        let w = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap().with_grad();
        let w_id = tape.leaf(&w).unwrap();
        let doubled = tape.add(w_id, w_id).unwrap();
        let s = tape.sum_all(doubled).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w_id).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn untouched_trainable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let u = Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap().with_grad();
        let w_id = tape.leaf(&w).unwrap();
        let u_id = tape.leaf(&u).unwrap();
        let s = tape.sum_all(w_id).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(u_id).unwrap().data(), &[0.0; 3]);
        assert_eq!(grads.get(w_id).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_foreign_node_and_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 2])).unwrap();
        let err = tape.backward(NodeId(99)).unwrap_err();
        assert!(matches!(err, Error::Tape(_)));
        let err = tape.backward(a).unwrap_err();
        assert!(matches!(err, Error::Tape(_)));
    }

    #[test]
    fn cross_entropy_uniform_and_gradient() {
        let mut tape = Tape::new();
        let logits = Tensor::from_vec(vec![1, 4], vec![0.0; 4]).unwrap().with_grad();
        let id = tape.leaf(&logits).unwrap();
        let loss = tape.cross_entropy_logits(id, 2).unwrap();
        let lv = tape.value(loss).data()[0];
        assert!((lv - (4.0f32).ln()).abs() < 1e-6);
        // gradient is softmax - onehot
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(id).unwrap().data();
        for (j, &gj) in g.iter().enumerate() {
            let want = if j == 2 { 0.25 - 1.0 } else { 0.25 };
            assert!((gj - want).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_extreme_logits_near_zero_loss() {
        let mut tape = Tape::new();
        let id = tape
            .constant(t(vec![1, 3], vec![50.0, -50.0, -50.0]))
            .unwrap();
        let loss = tape.cross_entropy_logits(id, 0).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-3);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || -> Vec<f32> {
            let mut tape = Tape::new();
            let a = tape
                .constant(t(vec![2, 2], vec![0.3, -1.2, 2.4, 0.07]))
                .unwrap();
            let b = tape
                .constant(t(vec![2, 2], vec![1.7, 0.2, -0.9, 0.5]))
                .unwrap();
            let c = tape.matmul(a, b).unwrap();
            let s = tape.row_softmax(c, None).unwrap();
            let g = tape.gelu(s).unwrap();
            tape.value(g).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn scatter_to_matrix_places_units_on_edges() {
        let mut tape = Tape::new();
        let u = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
        let u_id = tape.leaf(&u).unwrap();
        let m = tape
            .scatter_to_matrix(u_id, 2, 3, &[(0, 0), (0, 2), (1, 1)])
            .unwrap();
        assert_eq!(
            tape.value(m).data(),
            &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]
        );
        let s = tape.sum_all(m).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(u_id).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gather_overwrite_slice_concat_shapes() {
        let mut tape = Tape::new();
        let table = tape
            .constant(t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        let picked = tape.gather_rows(table, &[2, 0]).unwrap();
        assert_eq!(tape.value(picked).data(), &[5.0, 6.0, 1.0, 2.0]);

        let repl = tape.constant(t(vec![1, 2], vec![9.0, 9.0])).unwrap();
        let over = tape.overwrite_rows(picked, repl, &[1]).unwrap();
        assert_eq!(tape.value(over).data(), &[5.0, 6.0, 9.0, 9.0]);

        let left = tape.slice_cols(over, 0, 1).unwrap();
        let right = tape.slice_cols(over, 1, 2).unwrap();
        let back = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(over).data());
    }
}
