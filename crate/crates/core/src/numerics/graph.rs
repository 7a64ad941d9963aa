//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so reverse iteration is a valid
//! topological order for backpropagation. A graph is built per forward pass
//! and dropped after `backward`; parameters live outside as [`Tensor`]s and
//! are bound as leaves.

use super::{gelu_grad_scalar, gelu_scalar, NumericsError, Tensor};
use crate::par::{for_chunks, ExecMode};

/// Handle to a graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

/// A fixed linear-plus-offset map on flattened node data, pluggable as a
/// differentiable op. `adjoint` must implement the transpose of the linear
/// part with respect to the standard inner product.
pub trait AffineMap {
    fn out_dims(&self, in_dims: (usize, usize)) -> (usize, usize);
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint(&self, grad_out: &[f64]) -> Vec<f64>;
}

enum Op {
    Leaf,
    Matmul(VarId, VarId),
    /// a · bᵀ
    MatmulNt(VarId, VarId),
    Add(VarId, VarId),
    /// matrix + broadcast row
    AddRow(VarId, VarId),
    Scale(VarId, f64),
    Gelu(VarId),
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(VarId),
    EmbedLookup {
        table: VarId,
        indices: Vec<usize>,
    },
    ConcatCols(VarId, VarId),
    /// y = x * sqrt(target_sq / sum(x^2)); scale and norm cached at forward.
    NormalizePower {
        x: VarId,
        scale: f64,
        sq_norm: f64,
    },
    Affine {
        x: VarId,
        map: Box<dyn AffineMap>,
    },
    Mse {
        pred: VarId,
        target: Vec<f64>,
    },
    SumAll(VarId),
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    mode: ExecMode,
}

/// C = A·B, overwriting `out`. A is m×n, B is n×p.
pub(crate) fn matmul_kernel(mode: ExecMode, a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let mode = effective(mode, m, n, p);
    for_chunks(mode, out, p, |i, row| {
        for k in 0..n {
            let av = a[i * n + k];
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
}

/// C += A·Bᵀ. A is m×n, B is p×n, C is m×p.
fn matmul_nt_acc(mode: ExecMode, a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    let mode = effective(mode, m, n, p);
    for_chunks(mode, out, p, |i, row| {
        let arow = &a[i * n..(i + 1) * n];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for k in 0..n {
                s += arow[k] * brow[k];
            }
            *o += s;
        }
    });
}

/// C += Aᵀ·B. A is m×n, B is m×p, C is n×p.
fn matmul_tn_acc(mode: ExecMode, a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    let mode = effective(mode, m, n, p);
    for_chunks(mode, out, p, |i, row| {
        for k in 0..m {
            let av = a[k * n + i];
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
}

fn effective(mode: ExecMode, m: usize, n: usize, p: usize) -> ExecMode {
    // Fan-out is pure overhead on small problems.
    if m * n * p < 1 << 16 {
        ExecMode::Sequential
    } else {
        mode
    }
}

impl Graph {
    pub fn new(mode: ExecMode) -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), mode }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool, op: Op) -> VarId {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { rows, cols, data, requires_grad, op });
        self.grads.push(None);
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn dims(&self, id: VarId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: VarId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Value as a scalar; panics if the node is not 1x1.
    pub fn scalar(&self, id: VarId) -> f64 {
        assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn is_finite(&self, id: VarId) -> bool {
        self.nodes[id.0].data.iter().all(|v| v.is_finite())
    }

    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn leaf_data(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> VarId {
        assert_eq!(data.len(), rows * cols);
        self.push(rows, cols, data, requires_grad, Op::Leaf)
    }

    fn shape_err(&self, op: &'static str, a: VarId, b: VarId) -> NumericsError {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        NumericsError::ShapeMismatch { op, lhs: vec![ar, ac], rhs: vec![br, bc] }
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let (m, n) = self.dims(a);
        let (n2, p) = self.dims(b);
        if n != n2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * p];
        matmul_kernel(self.mode, self.value(a), self.value(b), &mut out, m, n, p);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(m, p, out, rg, Op::Matmul(a, b)))
    }

    /// a · bᵀ. `a` is m×n, `b` is p×n.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let (m, n) = self.dims(a);
        let (p, n2) = self.dims(b);
        if n != n2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * p];
        matmul_nt_acc(self.mode, self.value(a), self.value(b), &mut out, m, n, p);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(m, p, out, rg, Op::MatmulNt(a, b)))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err("add", a, b));
        }
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, data, rg, Op::Add(a, b)))
    }

    /// Adds a 1×c row to every row of an r×c matrix.
    pub fn add_row(&mut self, a: VarId, row: VarId) -> Result<VarId, NumericsError> {
        let (r, c) = self.dims(a);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(self.shape_err("add_row", a, row));
        }
        let rowv = self.value(row).to_vec();
        let data: Vec<f64> = self
            .value(a)
            .chunks(c)
            .flat_map(|ar| ar.iter().zip(&rowv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        let rg = self.needs(a) || self.needs(row);
        Ok(self.push(r, c, data, rg, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: VarId, factor: f64) -> VarId {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.needs(a);
        self.push(r, c, data, rg, Op::Scale(a, factor))
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.value(a).iter().map(|&x| gelu_scalar(x)).collect();
        let rg = self.needs(a);
        self.push(r, c, data, rg, Op::Gelu(a))
    }

    /// Per-row normalization to zero mean / unit variance, then gain and bias
    /// (both 1×c).
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, eps: f64) -> Result<VarId, NumericsError> {
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) {
            return Err(self.shape_err("layer_norm gain", x, gain));
        }
        if self.dims(bias) != (1, c) {
            return Err(self.shape_err("layer_norm bias", x, bias));
        }
        let mut data = vec![0.0; r * c];
        let mut mean = vec![0.0; r];
        let mut rstd = vec![0.0; r];
        {
            let xv = self.value(x);
            let g = self.value(gain);
            let b = self.value(bias);
            for i in 0..r {
                let rowx = &xv[i * c..(i + 1) * c];
                let mu = rowx.iter().sum::<f64>() / c as f64;
                let var = rowx.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + eps).sqrt();
                mean[i] = mu;
                rstd[i] = rs;
                for j in 0..c {
                    data[i * c + j] = (rowx[j] - mu) * rs * g[j] + b[j];
                }
            }
        }
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(r, c, data, rg, Op::LayerNorm { x, gain, bias, mean, rstd }))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: VarId) -> VarId {
        let (r, c) = self.dims(x);
        let mut data = vec![0.0; r * c];
        {
            let xv = self.value(x);
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    data[i * c + j] = e;
                    sum += e;
                }
                for j in 0..c {
                    data[i * c + j] /= sum;
                }
            }
        }
        let rg = self.needs(x);
        self.push(r, c, data, rg, Op::SoftmaxRows(x))
    }

    /// Gathers rows of `table`; gradients scatter-add back.
    pub fn embed_lookup(&mut self, table: VarId, indices: &[usize]) -> Result<VarId, NumericsError> {
        let (rows, c) = self.dims(table);
        for &ix in indices {
            if ix >= rows {
                return Err(NumericsError::IndexOutOfRange { index: ix, rows });
            }
        }
        let mut data = vec![0.0; indices.len() * c];
        {
            let t = self.value(table);
            for (i, &ix) in indices.iter().enumerate() {
                data[i * c..(i + 1) * c].copy_from_slice(&t[ix * c..(ix + 1) * c]);
            }
        }
        let rg = self.needs(table);
        Ok(self.push(indices.len(), c, data, rg, Op::EmbedLookup { table, indices: indices.to_vec() }))
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if ar != br {
            return Err(self.shape_err("concat_cols", a, b));
        }
        let mut data = vec![0.0; ar * (ac + bc)];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..ar {
                data[i * (ac + bc)..i * (ac + bc) + ac].copy_from_slice(&av[i * ac..(i + 1) * ac]);
                data[i * (ac + bc) + ac..(i + 1) * (ac + bc)].copy_from_slice(&bv[i * bc..(i + 1) * bc]);
            }
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(ar, ac + bc, data, rg, Op::ConcatCols(a, b)))
    }

    /// Scales the whole tensor so its squared Frobenius norm equals
    /// `target_sq` exactly.
    pub fn normalize_power(&mut self, x: VarId, target_sq: f64) -> Result<VarId, NumericsError> {
        let (r, c) = self.dims(x);
        let sq_norm: f64 = self.value(x).iter().map(|v| v * v).sum();
        if sq_norm == 0.0 || !sq_norm.is_finite() {
            return Err(NumericsError::NonFinite { context: "normalize_power on zero or non-finite input".into() });
        }
        let scale = (target_sq / sq_norm).sqrt();
        let data: Vec<f64> = self.value(x).iter().map(|v| v * scale).collect();
        let rg = self.needs(x);
        Ok(self.push(r, c, data, rg, Op::NormalizePower { x, scale, sq_norm }))
    }

    pub fn affine(&mut self, x: VarId, map: Box<dyn AffineMap>) -> VarId {
        let (or, oc) = map.out_dims(self.dims(x));
        let data = map.apply(self.value(x));
        assert_eq!(data.len(), or * oc, "AffineMap output length mismatch");
        let rg = self.needs(x);
        self.push(or, oc, data, rg, Op::Affine { x, map })
    }

    /// Mean squared error against a constant target (flattened comparison).
    pub fn mse(&mut self, pred: VarId, target: &[f64]) -> Result<VarId, NumericsError> {
        let (r, c) = self.dims(pred);
        if target.len() != r * c {
            return Err(NumericsError::ShapeMismatch {
                op: "mse",
                lhs: vec![r, c],
                rhs: vec![target.len()],
            });
        }
        let n = target.len() as f64;
        let v = self
            .value(pred)
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.needs(pred);
        Ok(self.push(1, 1, vec![v], rg, Op::Mse { pred, target: target.to_vec() }))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let v = self.value(x).iter().sum();
        let rg = self.needs(x);
        self.push(1, 1, vec![v], rg, Op::SumAll(x))
    }

    /// Backpropagates from a scalar node. Gradients of every
    /// `requires_grad` node are available via [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: VarId) -> Result<(), NumericsError> {
        assert_eq!(self.dims(loss), (1, 1), "backward needs a scalar loss");
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFinite { context: format!("gradient of node {i}") });
            }
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: VarId, f: impl FnOnce(&mut [f64])) {
        if !nodes[id.0].requires_grad {
            return;
        }
        let buf = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].data.len()]);
        f(buf);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<(), NumericsError> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let mode = self.mode;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, n) = (nodes[a.0].rows, nodes[a.0].cols);
                let p = nodes[b.0].cols;
                Self::acc(grads, nodes, *a, |buf| {
                    // dA += G · Bᵀ
                    matmul_nt_acc(mode, g, &nodes[b.0].data, buf, m, p, n);
                });
                Self::acc(grads, nodes, *b, |buf| {
                    // dB += Aᵀ · G
                    matmul_tn_acc(mode, &nodes[a.0].data, g, buf, m, n, p);
                });
            }
            Op::MatmulNt(a, b) => {
                let (m, n) = (nodes[a.0].rows, nodes[a.0].cols);
                let p = nodes[b.0].rows;
                Self::acc(grads, nodes, *a, |buf| {
                    // dA += G · B
                    matmul_kernel_acc(mode, g, &nodes[b.0].data, buf, m, p, n);
                });
                Self::acc(grads, nodes, *b, |buf| {
                    // dB += Gᵀ · A
                    matmul_tn_acc(mode, g, &nodes[a.0].data, buf, m, p, n);
                });
            }
            Op::Add(a, b) => {
                Self::acc(grads, nodes, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
                Self::acc(grads, nodes, *b, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let c = nodes[row.0].cols;
                Self::acc(grads, nodes, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
                Self::acc(grads, nodes, *row, |buf| {
                    for (j, o) in buf.iter_mut().enumerate() {
                        *o += g.iter().skip(j).step_by(c).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                Self::acc(grads, nodes, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += f * gv;
                    }
                });
            }
            Op::Gelu(a) => {
                Self::acc(grads, nodes, *a, |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(&nodes[a.0].data) {
                        *o += gv * gelu_grad_scalar(x);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let (r, c) = (node.rows, node.cols);
                let xv = &nodes[x.0].data;
                let gv = &nodes[gain.0].data;
                Self::acc(grads, nodes, *gain, |buf| {
                    for i2 in 0..r {
                        for j in 0..c {
                            let xhat = (xv[i2 * c + j] - mean[i2]) * rstd[i2];
                            buf[j] += g[i2 * c + j] * xhat;
                        }
                    }
                });
                Self::acc(grads, nodes, *bias, |buf| {
                    for i2 in 0..r {
                        for j in 0..c {
                            buf[j] += g[i2 * c + j];
                        }
                    }
                });
                Self::acc(grads, nodes, *x, |buf| {
                    for i2 in 0..r {
                        let mut h_mean = 0.0;
                        let mut hx_mean = 0.0;
                        for j in 0..c {
                            let h = g[i2 * c + j] * gv[j];
                            let xhat = (xv[i2 * c + j] - mean[i2]) * rstd[i2];
                            h_mean += h;
                            hx_mean += h * xhat;
                        }
                        h_mean /= c as f64;
                        hx_mean /= c as f64;
                        for j in 0..c {
                            let h = g[i2 * c + j] * gv[j];
                            let xhat = (xv[i2 * c + j] - mean[i2]) * rstd[i2];
                            buf[i2 * c + j] += rstd[i2] * (h - h_mean - xhat * hx_mean);
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = (node.rows, node.cols);
                let y = &node.data;
                Self::acc(grads, nodes, *x, |buf| {
                    for i2 in 0..r {
                        let dot: f64 = (0..c).map(|j| g[i2 * c + j] * y[i2 * c + j]).sum();
                        for j in 0..c {
                            buf[i2 * c + j] += y[i2 * c + j] * (g[i2 * c + j] - dot);
                        }
                    }
                });
            }
            Op::EmbedLookup { table, indices } => {
                let c = node.cols;
                Self::acc(grads, nodes, *table, |buf| {
                    for (i2, &ix) in indices.iter().enumerate() {
                        for j in 0..c {
                            buf[ix * c + j] += g[i2 * c + j];
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let r = node.rows;
                let ac = nodes[a.0].cols;
                let bc = nodes[b.0].cols;
                Self::acc(grads, nodes, *a, |buf| {
                    for i2 in 0..r {
                        for j in 0..ac {
                            buf[i2 * ac + j] += g[i2 * (ac + bc) + j];
                        }
                    }
                });
                Self::acc(grads, nodes, *b, |buf| {
                    for i2 in 0..r {
                        for j in 0..bc {
                            buf[i2 * bc + j] += g[i2 * (ac + bc) + ac + j];
                        }
                    }
                });
            }
            Op::NormalizePower { x, scale, sq_norm } => {
                let (sc, sn) = (*scale, *sq_norm);
                let xv = &nodes[x.0].data;
                Self::acc(grads, nodes, *x, |buf| {
                    let gx: f64 = g.iter().zip(xv).map(|(gv, v)| gv * v).sum();
                    for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *o += sc * gv - (sc / sn) * gx * v;
                    }
                });
            }
            Op::Affine { x, map } => {
                let back = map.adjoint(g);
                Self::acc(grads, nodes, *x, |buf| {
                    for (o, &bv) in buf.iter_mut().zip(&back) {
                        *o += bv;
                    }
                });
            }
            Op::Mse { pred, target } => {
                let n = target.len() as f64;
                let gs = g[0];
                let pv = &nodes[pred.0].data;
                Self::acc(grads, nodes, *pred, |buf| {
                    for ((o, &p), &t) in buf.iter_mut().zip(pv).zip(target) {
                        *o += gs * 2.0 * (p - t) / n;
                    }
                });
            }
            Op::SumAll(x) => {
                let gs = g[0];
                Self::acc(grads, nodes, *x, |buf| {
                    for o in buf.iter_mut() {
                        *o += gs;
                    }
                });
            }
        }
        Ok(())
    }
}

/// C += A·B (accumulating variant used in backward).
fn matmul_kernel_acc(mode: ExecMode, a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    let mode = effective(mode, m, n, p);
    for_chunks(mode, out, p, |i, row| {
        for k in 0..n {
            let av = a[i * n + k];
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
}
