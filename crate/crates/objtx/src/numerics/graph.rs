//! Reverse-mode autodiff over a dynamically built tape.
//!
//! Values are computed eagerly as nodes are appended, so the tape is always
//! topologically ordered and `backward` is a single reverse sweep. Gradients
//! accumulate per node and drain into per-parameter buckets at the leaves.

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::registry::{ParamId, ParamRegistry};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::rng::SubRng;

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Per-parameter gradients, indexed by `ParamId`. `None` means the
/// parameter never appeared in the graph.
pub type Gradients<S> = Vec<Option<Tensor<S>>>;

enum Op {
    Leaf { param: Option<ParamId> },
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow { x: NodeId, row: NodeId },
    Scale(NodeId, f64),
    Transpose(NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    SoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Dropout { x: NodeId, keep: Vec<bool>, scale: f64 },
    GatherRows { x: NodeId, idx: Vec<usize> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SumAll(NodeId),
    Pick { x: NodeId, r: usize, c: usize },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
}

/// Autodiff tape. All tensors flowing through graph ops are rank-2.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.value(id).numel(), 1);
        self.value(id).data()[0].to_f64()
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn rank2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let t = self.value(id);
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "{what} must be rank-2, got {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    // ── Node constructors ──────────────────────────────────────────────

    /// Constant input; gradients do not flow into it.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Leaf bound to a registry parameter. The current value is copied in;
    /// `backward` accumulates this leaf's gradient under `id`. A parameter
    /// may be mounted several times in one graph (gradients sum).
    pub fn param(&mut self, registry: &ParamRegistry<S>, id: ParamId) -> NodeId {
        let mut value = registry.value(id).clone();
        // Rank-1 parameters (bias vectors, LN scale/shift) mount as a row.
        if value.rank() == 1 {
            let n = value.numel();
            value = Tensor::from_vec(&[1, n], value.into_data()).expect("static shape");
        }
        self.push(value, Op::Leaf { param: Some(id) }, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise (Hadamard) product of same-shape nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Broadcast-add a 1 x n row to every row of an m x n node.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2(x, "add_row operand")?;
        let (rm, rn) = self.rank2(row, "add_row row")?;
        if rm != 1 || rn != n {
            return Err(Error::Shape(format!(
                "add_row row must be 1x{n}, got {rm}x{rn}"
            )));
        }
        let mut value = self.value(x).clone();
        for i in 0..m {
            for j in 0..n {
                let v = value.at2(i, j) + self.value(row).at2(0, j);
                value.set2(i, j, v);
            }
        }
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(value, Op::AddRow { x, row }, ng))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let cs = S::from_f64(c);
        let value = self.value(x).map(|v| v * cs);
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, c), ng)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2(x, "transpose operand")?;
        let src = self.value(x);
        let mut out = Tensor::zeros(&[n, m])?;
        for i in 0..m {
            for j in 0..n {
                out.set2(j, i, src.at2(i, j));
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = ops::gelu(self.value(x));
        let ng = self.needs(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self
            .value(x)
            .map(|v| S::from_f64(ops::softplus_scalar(v.to_f64())));
        let ng = self.needs(x);
        self.push(value, Op::Softplus(x), ng)
    }

    /// Row-wise softmax of a rank-2 node.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.rank2(x, "softmax operand")?;
        let value = ops::softmax(self.value(x), 1)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::SoftmaxRows(x), ng))
    }

    /// Row-wise log-sum-exp: m x n -> m x 1, max-subtracted.
    pub fn logsumexp_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2(x, "logsumexp operand")?;
        let mut out = Tensor::zeros(&[m, 1])?;
        for i in 0..m {
            let row = self.value(x).row(i);
            let mut mx = f64::NEG_INFINITY;
            for v in row {
                mx = mx.max(v.to_f64());
            }
            let mut s = 0.0;
            for v in row {
                s += (v.to_f64() - mx).exp();
            }
            let _ = n;
            out.set2(i, 0, S::from_f64(mx + s.ln()));
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::LogSumExpRows(x), ng))
    }

    /// Row-wise layer norm; `gamma`/`beta` are 1 x n nodes.
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (_, n) = self.rank2(x, "layer_norm operand")?;
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.numel() != n || b.numel() != n {
            return Err(Error::Shape(format!(
                "layer_norm scale/shift need {n} elements, got {} and {}",
                g.numel(),
                b.numel()
            )));
        }
        let g1 = Tensor::from_vec(&[n], g.data().to_vec())?;
        let b1 = Tensor::from_vec(&[n], b.data().to_vec())?;
        let value = ops::layer_norm(self.value(x), &g1, &b1, eps)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, Op::LayerNormRows { x, gamma, beta, eps }, ng))
    }

    /// Inverted dropout on every element. Identity in eval mode or at rate
    /// zero; otherwise draws the keep mask from `rng`.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        mode: ops::Mode,
        rng: &mut SubRng,
    ) -> Result<NodeId> {
        let numel = self.value(x).numel();
        let (keep, scale) = ops::dropout_mask(numel, rate, mode, rng)?;
        if scale == 1.0 {
            return Ok(x); // identity; no node needed
        }
        let sc = S::from_f64(scale);
        let src = self.value(x);
        let mut data = Vec::with_capacity(numel);
        for (i, &v) in src.data().iter().enumerate() {
            data.push(if keep[i] { v * sc } else { S::ZERO });
        }
        let value = Tensor::from_vec(src.shape(), data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Dropout { x, keep, scale }, ng))
    }

    /// Select rows of an m x n node by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = self.rank2(x, "gather_rows operand")?;
        if idx.is_empty() {
            return Err(Error::Usage("gather_rows needs at least one index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Shape(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let mut out = Tensor::zeros(&[idx.len(), n])?;
        for (o, &i) in idx.iter().enumerate() {
            let row = self.value(x).row(i).to_vec();
            out.row_mut(o).copy_from_slice(&row);
        }
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Columns `start .. start + len` of a rank-2 node.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.rank2(x, "slice_cols operand")?;
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let mut out = Tensor::zeros(&[m, len])?;
        for i in 0..m {
            let row = &self.value(x).row(i)[start..start + len];
            let row = row.to_vec();
            out.row_mut(i).copy_from_slice(&row);
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start, len }, ng))
    }

    /// Stack rank-2 nodes vertically (same column count).
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows needs at least one part".into()));
        }
        let (_, n) = self.rank2(parts[0], "concat_rows part")?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.rank2(p, "concat_rows part")?;
            if pn != n {
                return Err(Error::Shape(format!(
                    "concat_rows column mismatch: {n} vs {pn}"
                )));
            }
            rows += pm;
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(&[rows, n], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Stack rank-2 nodes horizontally (same row count).
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols needs at least one part".into()));
        }
        let (m, _) = self.rank2(parts[0], "concat_cols part")?;
        let mut cols = 0;
        for &p in parts {
            let (pm, pn) = self.rank2(p, "concat_cols part")?;
            if pm != m {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {m} vs {pm}"
                )));
            }
            cols += pn;
        }
        let mut out = Tensor::zeros(&[m, cols])?;
        for i in 0..m {
            let mut at = 0;
            for &p in parts {
                let pn = self.value(p).cols();
                let row = self.value(p).row(i).to_vec();
                out.row_mut(i)[at..at + pn].copy_from_slice(&row);
                at += pn;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Sum of all elements -> 1x1.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = 0.0;
        for v in self.value(x).data() {
            s += v.to_f64();
        }
        let ng = self.needs(x);
        self.push(Tensor::scalar(S::from_f64(s)), Op::SumAll(x), ng)
    }

    /// Single element (r, c) of a rank-2 node -> 1x1.
    pub fn pick(&mut self, x: NodeId, r: usize, c: usize) -> Result<NodeId> {
        let (m, n) = self.rank2(x, "pick operand")?;
        if r >= m || c >= n {
            return Err(Error::Shape(format!(
                "pick ({r}, {c}) out of range for {m}x{n}"
            )));
        }
        let v = self.value(x).at2(r, c);
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, r, c }, ng))
    }

    /// Mean of several 1x1 nodes (batch loss aggregation).
    pub fn mean_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("mean_scalars needs at least one part".into()));
        }
        let stacked = self.concat_rows(parts)?;
        let total = self.sum_all(stacked);
        Ok(self.scale(total, 1.0 / parts.len() as f64))
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a 1x1 loss node. Returns per-parameter gradients
    /// aligned with `registry` (entries absent from the graph are `None`).
    pub fn backward(
        &self,
        loss: NodeId,
        registry: &ParamRegistry<S>,
    ) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.needs(loss) {
            return Err(Error::Usage(
                "loss does not depend on any parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::ONE));
        let mut by_param: Gradients<S> = vec![None; registry.len()];

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        // Rank-1 params were mounted as 1 x n rows; store the
                        // gradient in the parameter's own shape.
                        let shape = registry.value(*pid).shape().to_vec();
                        let gt = Tensor::from_vec(&shape, g.data().to_vec())?;
                        match &mut by_param[pid.0] {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(gt.data()) {
                                    *a += *b;
                                }
                            }
                            slot => *slot = Some(gt),
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                    let n = self.value(*b).cols();
                    if self.needs(*a) {
                        let da = Self::grad_slot(&mut grads, a.0, self.value(*a).shape())?;
                        // dA += G * B^T
                        S::gemm(
                            m,
                            n,
                            k,
                            S::ONE,
                            g.data(),
                            n as isize,
                            1,
                            self.nodes[b.0].value.data(),
                            1,
                            n as isize,
                            S::ONE,
                            da.data_mut(),
                            k as isize,
                            1,
                        );
                    }
                    if self.needs(*b) {
                        let db = Self::grad_slot(&mut grads, b.0, self.value(*b).shape())?;
                        // dB += A^T * G
                        S::gemm(
                            k,
                            m,
                            n,
                            S::ONE,
                            self.nodes[a.0].value.data(),
                            1,
                            k as isize,
                            g.data(),
                            n as isize,
                            1,
                            S::ONE,
                            db.data_mut(),
                            n as isize,
                            1,
                        );
                    }
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.data(), S::ONE)?;
                    self.accum(&mut grads, *b, g.data(), S::ONE)?;
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, g.data(), S::ONE)?;
                    self.accum(&mut grads, *b, g.data(), -S::ONE)?;
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let prod: Vec<S> = g
                            .data()
                            .iter()
                            .zip(self.value(*b).data())
                            .map(|(&gv, &bv)| gv * bv)
                            .collect();
                        self.accum(&mut grads, *a, &prod, S::ONE)?;
                    }
                    if self.needs(*b) {
                        let prod: Vec<S> = g
                            .data()
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(&gv, &av)| gv * av)
                            .collect();
                        self.accum(&mut grads, *b, &prod, S::ONE)?;
                    }
                }
                Op::AddRow { x, row } => {
                    self.accum(&mut grads, *x, g.data(), S::ONE)?;
                    if self.needs(*row) {
                        let (m, n) = (g.rows(), g.cols());
                        let mut rg = vec![S::ZERO; n];
                        for i in 0..m {
                            for j in 0..n {
                                rg[j] += g.at2(i, j);
                            }
                        }
                        self.accum(&mut grads, *row, &rg, S::ONE)?;
                    }
                }
                Op::Scale(x, c) => {
                    self.accum(&mut grads, *x, g.data(), S::from_f64(*c))?;
                }
                Op::Transpose(x) => {
                    if self.needs(*x) {
                        let (m, n) = (g.rows(), g.cols()); // g matches output n x m
                        let mut gt = vec![S::ZERO; m * n];
                        for i in 0..m {
                            for j in 0..n {
                                gt[j * m + i] = g.at2(i, j);
                            }
                        }
                        self.accum(&mut grads, *x, &gt, S::ONE)?;
                    }
                }
                Op::Gelu(x) => {
                    if self.needs(*x) {
                        let dx: Vec<S> = g
                            .data()
                            .iter()
                            .zip(self.value(*x).data())
                            .map(|(&gv, &xv)| {
                                gv * S::from_f64(ops::gelu_grad_scalar(xv.to_f64()))
                            })
                            .collect();
                        self.accum(&mut grads, *x, &dx, S::ONE)?;
                    }
                }
                Op::Softplus(x) => {
                    if self.needs(*x) {
                        let dx: Vec<S> = g
                            .data()
                            .iter()
                            .zip(self.value(*x).data())
                            .map(|(&gv, &xv)| {
                                gv * S::from_f64(ops::sigmoid_scalar(xv.to_f64()))
                            })
                            .collect();
                        self.accum(&mut grads, *x, &dx, S::ONE)?;
                    }
                }
                Op::SoftmaxRows(x) => {
                    if self.needs(*x) {
                        let y = &self.nodes[i].value;
                        let (m, n) = (y.rows(), y.cols());
                        let mut dx = vec![S::ZERO; m * n];
                        for r in 0..m {
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += g.at2(r, j).to_f64() * y.at2(r, j).to_f64();
                            }
                            for j in 0..n {
                                let v = y.at2(r, j).to_f64()
                                    * (g.at2(r, j).to_f64() - dot);
                                dx[r * n + j] = S::from_f64(v);
                            }
                        }
                        self.accum(&mut grads, *x, &dx, S::ONE)?;
                    }
                }
                Op::LogSumExpRows(x) => {
                    if self.needs(*x) {
                        let xs = self.value(*x);
                        let (m, n) = (xs.rows(), xs.cols());
                        let sm = ops::softmax(xs, 1)?;
                        let mut dx = vec![S::ZERO; m * n];
                        for r in 0..m {
                            let gr = g.at2(r, 0);
                            for j in 0..n {
                                dx[r * n + j] = gr * sm.at2(r, j);
                            }
                        }
                        self.accum(&mut grads, *x, &dx, S::ONE)?;
                    }
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let xs = self.value(*x);
                    let (m, n) = (xs.rows(), xs.cols());
                    let gam = self.value(*gamma);
                    let mut dx = vec![0.0f64; m * n];
                    let mut dgamma = vec![0.0f64; n];
                    let mut dbeta = vec![0.0f64; n];
                    for r in 0..m {
                        let row: Vec<f64> = xs.row(r).iter().map(|v| v.to_f64()).collect();
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0f64; n];
                        for j in 0..n {
                            let gj = g.at2(r, j).to_f64();
                            dgamma[j] += gj * xhat[j];
                            dbeta[j] += gj;
                            dxhat[j] = gj * gam.data()[j].to_f64();
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * xhat[j];
                        }
                        mean_dxhat /= n as f64;
                        mean_dxhat_xhat /= n as f64;
                        for j in 0..n {
                            dx[r * n + j] =
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    if self.needs(*x) {
                        let dx: Vec<S> = dx.into_iter().map(S::from_f64).collect();
                        self.accum(&mut grads, *x, &dx, S::ONE)?;
                    }
                    if self.needs(*gamma) {
                        let dg: Vec<S> = dgamma.into_iter().map(S::from_f64).collect();
                        self.accum(&mut grads, *gamma, &dg, S::ONE)?;
                    }
                    if self.needs(*beta) {
                        let db: Vec<S> = dbeta.into_iter().map(S::from_f64).collect();
                        self.accum(&mut grads, *beta, &db, S::ONE)?;
                    }
                }
                Op::Dropout { x, keep, scale } => {
                    if self.needs(*x) {
                        let sc = S::from_f64(*scale);
                        let dx: Vec<S> = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(e, &gv)| if keep[e] { gv * sc } else { S::ZERO })
                            .collect();
                        self.accum(&mut grads, *x, &dx, S::ONE)?;
                    }
                }
                Op::GatherRows { x, idx } => {
                    if self.needs(*x) {
                        let shape = self.value(*x).shape().to_vec();
                        let n = shape[1];
                        let dx = Self::grad_slot(&mut grads, x.0, &shape)?;
                        for (o, &src) in idx.iter().enumerate() {
                            for j in 0..n {
                                let v = dx.at2(src, j) + g.at2(o, j);
                                dx.set2(src, j, v);
                            }
                        }
                    }
                }
                Op::SliceCols { x, start, len } => {
                    if self.needs(*x) {
                        let shape = self.value(*x).shape().to_vec();
                        let dx = Self::grad_slot(&mut grads, x.0, &shape)?;
                        for r in 0..g.rows() {
                            for j in 0..*len {
                                let v = dx.at2(r, start + j) + g.at2(r, j);
                                dx.set2(r, start + j, v);
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let pm = self.value(p).rows();
                        let pn = self.value(p).cols();
                        if self.needs(p) {
                            let slice = &g.data()[at * pn..(at + pm) * pn];
                            let slice = slice.to_vec();
                            self.accum(&mut grads, p, &slice, S::ONE)?;
                        }
                        at += pm;
                    }
                }
                Op::ConcatCols(parts) => {
                    let m = g.rows();
                    let mut at = 0;
                    for &p in parts {
                        let pn = self.value(p).cols();
                        if self.needs(p) {
                            let mut gp = vec![S::ZERO; m * pn];
                            for r in 0..m {
                                for j in 0..pn {
                                    gp[r * pn + j] = g.at2(r, at + j);
                                }
                            }
                            self.accum(&mut grads, p, &gp, S::ONE)?;
                        }
                        at += pn;
                    }
                }
                Op::SumAll(x) => {
                    if self.needs(*x) {
                        let gv = g.data()[0];
                        let numel = self.value(*x).numel();
                        let dx = vec![gv; numel];
                        self.accum(&mut grads, *x, &dx, S::ONE)?;
                    }
                }
                Op::Pick { x, r, c } => {
                    if self.needs(*x) {
                        let shape = self.value(*x).shape().to_vec();
                        let dx = Self::grad_slot(&mut grads, x.0, &shape)?;
                        let v = dx.at2(*r, *c) + g.data()[0];
                        dx.set2(*r, *c, v);
                    }
                }
            }
        }
        Ok(by_param)
    }

    /// Zero-initialized gradient slot for node `idx`.
    fn grad_slot<'g>(
        grads: &'g mut [Option<Tensor<S>>],
        idx: usize,
        shape: &[usize],
    ) -> Result<&'g mut Tensor<S>> {
        if grads[idx].is_none() {
            grads[idx] = Some(Tensor::zeros(shape)?);
        }
        Ok(grads[idx].as_mut().expect("just filled"))
    }

    /// grads[target] += scale * contribution (elementwise, same layout).
    fn accum(
        &self,
        grads: &mut [Option<Tensor<S>>],
        target: NodeId,
        contribution: &[S],
        scale: S,
    ) -> Result<()> {
        if !self.needs(target) {
            return Ok(());
        }
        let shape = self.value(target).shape().to_vec();
        let slot = Self::grad_slot(grads, target.0, &shape)?;
        debug_assert_eq!(slot.numel(), contribution.len());
        for (a, &b) in slot.data_mut().iter_mut().zip(contribution) {
            *a += b * scale;
        }
        Ok(())
    }
}
