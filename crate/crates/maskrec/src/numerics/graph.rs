//! Reverse-mode autodiff over a recorded op tape.
//!
//! Nodes are appended in forward order, so the tape itself is a
//! topological order and backward is one reverse sweep that visits each
//! node exactly once. Values are f64 end to end; parameters live on the
//! f32 grid (see `tensor`), which keeps checkpoints exact while leaving
//! finite-difference probes enough precision to resolve 1e-4 relative
//! gradient error at h = 1e-3.
//!
//! Decoding-time primitives (argmax, top-k) are not ops here: gradients
//! never flow through inference.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input node; `needs_grad` distinguishes trainable leaves.
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Broadcast-add a [1, n] row to every row of a [m, n] matrix.
    AddRow(NodeId, NodeId),
    /// Broadcast-multiply every row of a [m, n] matrix by a [1, n] row.
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Elementwise multiply by a constant mask (dropout).
    MulMask(NodeId, Vec<f64>),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId),
    Gelu(NodeId),
    /// Select rows of a table by (constant) indices.
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    SumAll(NodeId),
    /// Fused log-softmax + negative log-likelihood of one target index.
    CrossEntropy(NodeId, usize),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradient buffers produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node. Leaves off every path to the
    /// loss get exact zeros.
    pub fn get(&self, id: NodeId, graph: &Graph) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; graph.nodes[id.0].value.len()],
        }
    }
}

// ── f64 kernels (shared with the no-grad inference path) ───────────────

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
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

pub fn softmax_row_in_place(row: &mut [f64]) {
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

pub fn layer_norm_row(row: &[f64], out: &mut [f64]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - mean) * inv;
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

// ── graph construction ─────────────────────────────────────────────────

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool) -> Result<NodeId> {
        debug_assert_eq!(rows * cols, value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("{op:?}").split(['(', ' ']).next().unwrap_or("op").to_string(),
            });
        }
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape_err(op: &'static str, expected: String, a: (usize, usize)) -> Error {
        Error::ShapeMismatch {
            op,
            expected,
            actual: format!("{}x{}", a.0, a.1),
        }
    }

    /// Trainable leaf. Gradients are reported for these.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            Op::Leaf,
            t.rows(),
            t.cols(),
            t.data().to_vec(),
            true,
        )
        .expect("leaf values must be finite")
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(
            Op::Leaf,
            t.rows(),
            t.cols(),
            t.data().to_vec(),
            false,
        )
        .expect("constant values must be finite")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Self::shape_err(
                "matmul",
                format!("inner dims equal, lhs {m}x{k}"),
                (k2, n),
            ));
        }
        let value = matmul(self.value(a), self.value(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), m, n, value, needs)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.push(Op::Transpose(a), n, m, out, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if self.dims(b) != (m, n) {
            return Err(Self::shape_err("add", format!("{m}x{n}"), self.dims(b)));
        }
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), m, n, value, needs)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != n {
            return Err(Self::shape_err("add_row", format!("1x{n}"), (rr, rc)));
        }
        let rv = self.value(row).to_vec();
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv[i % n])
            .collect();
        let needs = self.needs(a) || self.needs(row);
        self.push(Op::AddRow(a, row), m, n, value, needs)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != n {
            return Err(Self::shape_err("mul_row", format!("1x{n}"), (rr, rc)));
        }
        let rv = self.value(row).to_vec();
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * rv[i % n])
            .collect();
        let needs = self.needs(a) || self.needs(row);
        self.push(Op::MulRow(a, row), m, n, value, needs)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let value: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), m, n, value, needs)
    }

    /// Elementwise multiply by a fixed mask (dropout keep/scale mask).
    pub fn mul_mask(&mut self, a: NodeId, mask: &[f64]) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if mask.len() != m * n {
            return Err(Self::shape_err("mul_mask", format!("{m}x{n}"), (1, mask.len())));
        }
        let value: Vec<f64> = self.value(a).iter().zip(mask).map(|(x, y)| x * y).collect();
        let needs = self.needs(a);
        self.push(Op::MulMask(a, mask.to_vec()), m, n, value, needs)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let mut value = self.value(a).to_vec();
        for r in 0..m {
            softmax_row_in_place(&mut value[r * n..(r + 1) * n]);
        }
        let needs = self.needs(a);
        self.push(Op::SoftmaxRows(a), m, n, value, needs)
    }

    pub fn layer_norm_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let v = self.value(a);
        let mut value = vec![0.0; m * n];
        for r in 0..m {
            layer_norm_row(&v[r * n..(r + 1) * n], &mut value[r * n..(r + 1) * n]);
        }
        let needs = self.needs(a);
        self.push(Op::LayerNormRows(a), m, n, value, needs)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let value: Vec<f64> = self.value(a).iter().map(|&x| gelu_scalar(x)).collect();
        let needs = self.needs(a);
        self.push(Op::Gelu(a), m, n, value, needs)
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, n) = self.dims(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for table with {rows} rows"
            )));
        }
        let v = self.value(table);
        let mut value = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            value.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
        let needs = self.needs(table);
        self.push(Op::GatherRows(table, indices.to_vec()), indices.len(), n, value, needs)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of zero parts".into()));
        }
        let n = self.dims(parts[0]).1;
        let mut rows = 0;
        let mut value = Vec::new();
        let mut needs = false;
        for &p in parts {
            let (m, pn) = self.dims(p);
            if pn != n {
                return Err(Self::shape_err("concat_rows", format!("_x{n}"), (m, pn)));
            }
            rows += m;
            value.extend_from_slice(self.value(p));
            needs |= self.needs(p);
        }
        self.push(Op::ConcatRows(parts.to_vec()), rows, n, value, needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of zero parts".into()));
        }
        let m = self.dims(parts[0]).0;
        let mut total_cols = 0;
        let mut needs = false;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Self::shape_err("concat_cols", format!("{m}x_"), (pm, pn)));
            }
            total_cols += pn;
            needs |= self.needs(p);
        }
        let mut value = vec![0.0; m * total_cols];
        let mut col_off = 0;
        for &p in parts {
            let (_, pn) = self.dims(p);
            let pv = self.value(p).to_vec();
            for r in 0..m {
                value[r * total_cols + col_off..r * total_cols + col_off + pn]
                    .copy_from_slice(&pv[r * pn..(r + 1) * pn]);
            }
            col_off += pn;
        }
        self.push(Op::ConcatCols(parts.to_vec()), m, total_cols, value, needs)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if start + len > m {
            return Err(Error::InvalidArgument(format!(
                "slice_rows [{start}, {}) out of range for {m} rows",
                start + len
            )));
        }
        let value = self.value(a)[start * n..(start + len) * n].to_vec();
        let needs = self.needs(a);
        self.push(Op::SliceRows(a, start, len), len, n, value, needs)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if start + len > n {
            return Err(Error::InvalidArgument(format!(
                "slice_cols [{start}, {}) out of range for {n} cols",
                start + len
            )));
        }
        let v = self.value(a);
        let mut value = Vec::with_capacity(m * len);
        for r in 0..m {
            value.extend_from_slice(&v[r * n + start..r * n + start + len]);
        }
        let needs = self.needs(a);
        self.push(Op::SliceCols(a, start, len), m, len, value, needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let value = vec![self.value(a).iter().sum::<f64>()];
        let needs = self.needs(a);
        self.push(Op::SumAll(a), 1, 1, value, needs)
    }

    /// −log softmax(logits)[target] for a [1, V] logits row.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let (m, v) = self.dims(logits);
        if m != 1 {
            return Err(Self::shape_err("cross_entropy", "1xV".into(), (m, v)));
        }
        if target >= v {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: target {target} out of range for {v} classes"
            )));
        }
        let lp = log_softmax_row(self.value(logits));
        let value = vec![-lp[target]];
        let needs = self.needs(logits);
        self.push(Op::CrossEntropy(logits, target), 1, 1, value, needs)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Returns per-node gradient
    /// buffers; trainable leaves unreachable from the loss report zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.rows * ln.cols != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got {}x{}",
                ln.rows, ln.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = node.cols;
                    if self.needs(*a) {
                        // dA = dC · Bᵀ
                        let bv = self.value(*b);
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gv = g[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i * k + p] += gv * bv[p * n + j];
                                }
                            }
                        }
                        accumulate(&mut grads[a.0], &da);
                    }
                    if self.needs(*b) {
                        // dB = Aᵀ · dC
                        let av = self.value(*a);
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let avv = av[i * k + p];
                                if avv == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += avv * g[i * n + j];
                                }
                            }
                        }
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::Transpose(a) => {
                    if self.needs(*a) {
                        let (m, n) = self.dims(*a);
                        let mut da = vec![0.0; m * n];
                        for i in 0..m {
                            for j in 0..n {
                                da[i * n + j] = g[j * m + i];
                            }
                        }
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], &g);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], &g);
                    }
                }
                Op::AddRow(a, row) => {
                    let n = node.cols;
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], &g);
                    }
                    if self.needs(*row) {
                        let mut dr = vec![0.0; n];
                        for (i, gv) in g.iter().enumerate() {
                            dr[i % n] += gv;
                        }
                        accumulate(&mut grads[row.0], &dr);
                    }
                }
                Op::MulRow(a, row) => {
                    let n = node.cols;
                    if self.needs(*a) {
                        let rv = self.value(*row);
                        let da: Vec<f64> =
                            g.iter().enumerate().map(|(i, gv)| gv * rv[i % n]).collect();
                        accumulate(&mut grads[a.0], &da);
                    }
                    if self.needs(*row) {
                        let av = self.value(*a);
                        let mut dr = vec![0.0; n];
                        for (i, gv) in g.iter().enumerate() {
                            dr[i % n] += gv * av[i];
                        }
                        accumulate(&mut grads[row.0], &dr);
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(*a) {
                        let da: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::MulMask(a, mask) => {
                    if self.needs(*a) {
                        let da: Vec<f64> = g.iter().zip(mask).map(|(gv, mv)| gv * mv).collect();
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.needs(*a) {
                        let (m, n) = (node.rows, node.cols);
                        let y = &node.value;
                        let mut da = vec![0.0; m * n];
                        for r in 0..m {
                            let yr = &y[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                            for j in 0..n {
                                da[r * n + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::LayerNormRows(a) => {
                    if self.needs(*a) {
                        let (m, n) = (node.rows, node.cols);
                        let x = self.value(*a);
                        let y = &node.value;
                        let nf = n as f64;
                        let mut da = vec![0.0; m * n];
                        for r in 0..m {
                            let xr = &x[r * n..(r + 1) * n];
                            let yr = &y[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let mean = xr.iter().sum::<f64>() / nf;
                            let var =
                                xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                            let g_mean = gr.iter().sum::<f64>() / nf;
                            let gy_mean =
                                gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum::<f64>() / nf;
                            for j in 0..n {
                                da[r * n + j] = inv * (gr[j] - g_mean - yr[j] * gy_mean);
                            }
                        }
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::Gelu(a) => {
                    if self.needs(*a) {
                        let x = self.value(*a);
                        let da: Vec<f64> = g
                            .iter()
                            .zip(x)
                            .map(|(gv, &xv)| gv * gelu_grad_scalar(xv))
                            .collect();
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::GatherRows(table, indices) => {
                    if self.needs(*table) {
                        let (tr, n) = self.dims(*table);
                        let mut dt = vec![0.0; tr * n];
                        for (r, &i) in indices.iter().enumerate() {
                            for j in 0..n {
                                dt[i * n + j] += g[r * n + j];
                            }
                        }
                        accumulate(&mut grads[table.0], &dt);
                    }
                }
                Op::ConcatRows(parts) => {
                    let n = node.cols;
                    let mut row_off = 0;
                    for &p in parts {
                        let (pm, _) = self.dims(p);
                        if self.needs(p) {
                            let dp = g[row_off * n..(row_off + pm) * n].to_vec();
                            accumulate(&mut grads[p.0], &dp);
                        }
                        row_off += pm;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = (node.rows, node.cols);
                    let mut col_off = 0;
                    for &p in parts {
                        let (_, pn) = self.dims(p);
                        if self.needs(p) {
                            let mut dp = vec![0.0; m * pn];
                            for r in 0..m {
                                dp[r * pn..(r + 1) * pn].copy_from_slice(
                                    &g[r * total + col_off..r * total + col_off + pn],
                                );
                            }
                            accumulate(&mut grads[p.0], &dp);
                        }
                        col_off += pn;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    if self.needs(*a) {
                        let (m, n) = self.dims(*a);
                        let mut da = vec![0.0; m * n];
                        da[start * n..(start + len) * n].copy_from_slice(&g);
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::SliceCols(a, start, len) => {
                    if self.needs(*a) {
                        let (m, n) = self.dims(*a);
                        let mut da = vec![0.0; m * n];
                        for r in 0..m {
                            da[r * n + start..r * n + start + len]
                                .copy_from_slice(&g[r * len..(r + 1) * len]);
                        }
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::SumAll(a) => {
                    if self.needs(*a) {
                        let sz = self.nodes[a.0].value.len();
                        let da = vec![g[0]; sz];
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::CrossEntropy(logits, target) => {
                    if self.needs(*logits) {
                        let lv = self.value(*logits);
                        let mut p = lv.to_vec();
                        softmax_row_in_place(&mut p);
                        p[*target] -= 1.0;
                        for v in &mut p {
                            *v *= g[0];
                        }
                        accumulate(&mut grads[logits.0], &p);
                    }
                }
            }
        }

        // Reachable trainable leaves keep their buffers; everything else
        // reads as zeros through Gradients::get.
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(buf) => {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}
