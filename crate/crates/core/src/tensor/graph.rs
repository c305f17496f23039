use super::kernels;
use super::{Tensor, TensorError};
use rand::Rng;

/// Handle into a [`Graph`]'s node list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Operation record. Input node ids always point at earlier nodes, so the
/// node list is topologically ordered by construction.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Reshape { x: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Gelu { x: NodeId },
    SoftmaxRows { x: NodeId },
    LogSoftmaxRows { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, ignore_index: Option<usize>, n_kept: usize },
    Embedding { table: NodeId, ids: Vec<u32> },
    NarrowCols { x: NodeId, start: usize, len: usize },
    ConcatCols { xs: Vec<NodeId> },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Dropout { x: NodeId, scaled_mask: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Transpose { x }
            | Op::Reshape { x }
            | Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::SoftmaxRows { x }
            | Op::LogSoftmaxRows { x }
            | Op::NarrowCols { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Dropout { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatCols { xs } => xs.clone(),
        }
    }
}

struct Node {
    op: Op,
    tensor: Tensor,
}

/// Reverse-mode autodiff tape. Append ops, run [`Graph::backward`] on a
/// scalar root, then read gradients back from the leaves.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

type Result<T> = std::result::Result<T, TensorError>;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].tensor.values()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].tensor.dims2()
    }

    fn push(&mut self, op: Op, tensor: Tensor, op_name: &'static str) -> Result<NodeId> {
        if !tensor.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, tensor });
        Ok(id)
    }

    /// Insert a leaf holding `tensor`. Leaves marked `requires_grad`
    /// receive gradients on backward.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, tensor });
        id
    }

    pub fn param(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor.with_requires_grad())
    }

    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a);
        let (kb, n) = self.dims2(b);
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values = kernels::matmul(self.values(a), self.values(b), m, ka, n);
        self.push(Op::Matmul { a, b }, Tensor::matrix(m, n, values), "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x);
        let src = self.values(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Op::Transpose { x }, Tensor::matrix(n, m, out), "transpose")
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if rows * cols != self.tensor(x).numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: "same element count",
                got: vec![rows, cols],
            });
        }
        let values = self.values(x).to_vec();
        self.push(Op::Reshape { x }, Tensor::matrix(rows, cols, values), "reshape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Add { a, b }, Tensor::new(shape, values), "add")
    }

    /// `x[m,n] + bias[1,n]`, broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x);
        let (bm, bn) = self.dims2(bias);
        if bm != 1 || bn != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.values(bias).to_vec();
        let mut values = self.values(x).to_vec();
        for row in values.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.push(Op::AddBias { x, bias }, Tensor::matrix(m, n, values), "add_bias")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul { a, b }, Tensor::new(shape, values), "mul")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let values: Vec<f64> = self.values(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale { x, c }, Tensor::new(shape, values), "scale")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let values: Vec<f64> = self.values(x).iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Gelu { x }, Tensor::new(shape, values), "gelu")
    }

    /// Softmax along `axis` of a 2-D tensor (0 = down columns, 1 = across
    /// rows), computed with max subtraction.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        match axis {
            1 => self.softmax_rows(x),
            0 => {
                let t = self.transpose(x)?;
                let s = self.softmax_rows(t)?;
                self.transpose(s)
            }
            _ => Err(TensorError::BadShape {
                op: "softmax",
                expected: "axis 0 or 1",
                got: vec![axis],
            }),
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x);
        let mut values = self.values(x).to_vec();
        for row in values.chunks_mut(n) {
            softmax_row_in_place(row);
        }
        self.push(Op::SoftmaxRows { x }, Tensor::matrix(m, n, values), "softmax")
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x);
        let mut values = self.values(x).to_vec();
        for row in values.chunks_mut(n) {
            log_softmax_row_in_place(row);
        }
        self.push(
            Op::LogSoftmaxRows { x },
            Tensor::matrix(m, n, values),
            "log_softmax",
        )
    }

    /// Per-row normalization to zero mean and unit variance, then affine.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.dims2(x);
        for t in [gain, bias] {
            let (gm, gn) = self.dims2(t);
            if gm != 1 || gn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(t).to_vec(),
                });
            }
        }
        let g = self.values(gain).to_vec();
        let b = self.values(bias).to_vec();
        let mut values = self.values(x).to_vec();
        for row in values.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (v, (&gv, &bv)) in row.iter_mut().zip(g.iter().zip(&b)) {
                *v = (*v - mean) * inv_std * gv + bv;
            }
        }
        self.push(
            Op::LayerNorm { x, gain, bias, eps },
            Tensor::matrix(m, n, values),
            "layer_norm",
        )
    }

    /// Mean of `-log softmax(logits)[t, targets[t]]` over positions whose
    /// target is not `ignore_index`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<NodeId> {
        let (t_len, vocab) = self.dims2(logits);
        if targets.len() != t_len {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                expected: "one target per logits row",
                got: vec![targets.len()],
            });
        }
        let vals = self.values(logits);
        let mut total = 0.0;
        let mut n_kept = 0usize;
        for (t, &target) in targets.iter().enumerate() {
            if Some(target) == ignore_index {
                continue;
            }
            if target >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target,
                    size: vocab,
                });
            }
            let row = &vals[t * vocab..(t + 1) * vocab];
            total -= log_softmax_entry(row, target);
            n_kept += 1;
        }
        if n_kept == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let loss = total / n_kept as f64;
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                n_kept,
            },
            Tensor::scalar(loss),
            "cross_entropy",
        )
    }

    /// Gather rows of `table[V,d]` at `ids`, producing `[len(ids), d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v, d) = self.dims2(table);
        let vals = self.values(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&vals[id * d..(id + 1) * d]);
        }
        self.push(
            Op::Embedding { table, ids: ids.to_vec() },
            Tensor::matrix(ids.len(), d, out),
            "embedding",
        )
    }

    /// Columns `[start, start+len)` of `x`.
    pub fn narrow_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(x);
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow_cols",
                index: start + len,
                size: n,
            });
        }
        let vals = self.values(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&vals[i * n + start..i * n + start + len]);
        }
        self.push(
            Op::NarrowCols { x, start, len },
            Tensor::matrix(m, len, out),
            "narrow_cols",
        )
    }

    /// Concatenate along columns; all inputs share the row count.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        assert!(!xs.is_empty(), "concat_cols needs at least one input");
        let m = self.dims2(xs[0]).0;
        let mut total = 0usize;
        for &x in xs {
            let (xm, xn) = self.dims2(x);
            if xm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
            total += xn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &x in xs {
                let n = self.dims2(x).1;
                out.extend_from_slice(&self.values(x)[i * n..(i + 1) * n]);
            }
        }
        self.push(
            Op::ConcatCols { xs: xs.to_vec() },
            Tensor::matrix(m, total, out),
            "concat_cols",
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = kernels::kahan_sum(self.values(x));
        self.push(Op::Sum { x }, Tensor::scalar(total), "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.tensor(x).numel();
        let total = kernels::kahan_sum(self.values(x)) / n as f64;
        self.push(Op::Mean { x }, Tensor::scalar(total), "mean")
    }

    /// Inverted dropout; active only when the trainer passes a rate > 0.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        if rate == 0.0 {
            return self.scale(x, 1.0);
        }
        let keep = 1.0 - rate;
        let scaled_mask: Vec<f64> = (0..self.tensor(x).numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let values: Vec<f64> = self
            .values(x)
            .iter()
            .zip(&scaled_mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Op::Dropout { x, scaled_mask },
            Tensor::new(shape, values),
            "dropout",
        )
    }

    /// Propagate `d root / d node` into every `requires_grad` leaf reachable
    /// from `root`. Gradients accumulate additively across fan-out.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.tensor(root).is_scalar() {
            return Err(TensorError::NonScalarRoot {
                got: self.shape(root).to_vec(),
            });
        }

        // A node needs a gradient if it is a requires_grad leaf or feeds one.
        let n = self.nodes.len();
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = self.nodes[i].tensor.requires_grad()
                || self.nodes[i].op.inputs().iter().any(|id| needs[id.0]);
        }
        if !needs[root.0] {
            return Ok(()); // nothing trainable below the root
        }

        self.nodes[root.0].tensor.grad_mut()[0] += 1.0;

        for i in (0..=root.0).rev() {
            if !needs[i] || self.nodes[i].tensor.grad().is_none() {
                continue;
            }
            let grad = self.nodes[i].tensor.grad().unwrap().to_vec();
            let op = self.nodes[i].op.clone();
            self.accumulate(i, &op, &grad, &needs);
        }

        for node in &self.nodes {
            if node.tensor.requires_grad() {
                if let Some(g) = node.tensor.grad() {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                }
            }
        }
        Ok(())
    }

    fn add_to_grad(&mut self, id: NodeId, contribution: &[f64]) {
        let g = self.nodes[id.0].tensor.grad_mut();
        for (gv, &cv) in g.iter_mut().zip(contribution) {
            *gv += cv;
        }
    }

    fn accumulate(&mut self, out_idx: usize, op: &Op, grad: &[f64], needs: &[bool]) {
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                if needs[a.0] {
                    let da = kernels::matmul_a_bt(grad, self.values(*b), m, n, k);
                    self.add_to_grad(*a, &da);
                }
                if needs[b.0] {
                    let db = kernels::matmul_at_b(self.values(*a), grad, m, k, n);
                    self.add_to_grad(*b, &db);
                }
            }

            Op::Transpose { x } => {
                if needs[x.0] {
                    let (m, n) = self.dims2(*x);
                    let mut dx = vec![0.0; m * n];
                    // grad has shape [n, m]
                    for j in 0..n {
                        for i in 0..m {
                            dx[i * n + j] = grad[j * m + i];
                        }
                    }
                    self.add_to_grad(*x, &dx);
                }
            }

            Op::Reshape { x } => {
                if needs[x.0] {
                    self.add_to_grad(*x, grad);
                }
            }

            Op::Add { a, b } => {
                if needs[a.0] {
                    self.add_to_grad(*a, grad);
                }
                if needs[b.0] {
                    self.add_to_grad(*b, grad);
                }
            }

            Op::AddBias { x, bias } => {
                if needs[x.0] {
                    self.add_to_grad(*x, grad);
                }
                if needs[bias.0] {
                    let n = self.dims2(*bias).1;
                    let mut db = vec![0.0; n];
                    for row in grad.chunks(n) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.add_to_grad(*bias, &db);
                }
            }

            Op::Mul { a, b } => {
                if needs[a.0] {
                    let da: Vec<f64> = grad.iter().zip(self.values(*b)).map(|(g, v)| g * v).collect();
                    self.add_to_grad(*a, &da);
                }
                if needs[b.0] {
                    let db: Vec<f64> = grad.iter().zip(self.values(*a)).map(|(g, v)| g * v).collect();
                    self.add_to_grad(*b, &db);
                }
            }

            Op::Scale { x, c } => {
                if needs[x.0] {
                    let dx: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.add_to_grad(*x, &dx);
                }
            }

            Op::Gelu { x } => {
                if needs[x.0] {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.values(*x))
                        .map(|(g, &v)| g * gelu_bwd(v))
                        .collect();
                    self.add_to_grad(*x, &dx);
                }
            }

            Op::SoftmaxRows { x } => {
                if needs[x.0] {
                    let n = self.dims2(*x).1;
                    let out = self.values(NodeId(out_idx));
                    let mut dx = vec![0.0; grad.len()];
                    for (r, (g_row, s_row)) in grad.chunks(n).zip(out.chunks(n)).enumerate() {
                        let dot: f64 = g_row.iter().zip(s_row).map(|(g, s)| g * s).sum();
                        for j in 0..n {
                            dx[r * n + j] = s_row[j] * (g_row[j] - dot);
                        }
                    }
                    self.add_to_grad(*x, &dx);
                }
            }

            Op::LogSoftmaxRows { x } => {
                if needs[x.0] {
                    let n = self.dims2(*x).1;
                    let out = self.values(NodeId(out_idx));
                    let mut dx = vec![0.0; grad.len()];
                    for (r, (g_row, ls_row)) in grad.chunks(n).zip(out.chunks(n)).enumerate() {
                        let g_sum: f64 = g_row.iter().sum();
                        for j in 0..n {
                            dx[r * n + j] = g_row[j] - ls_row[j].exp() * g_sum;
                        }
                    }
                    self.add_to_grad(*x, &dx);
                }
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let (m, n) = self.dims2(*x);
                let x_vals = self.values(*x).to_vec();
                let g_vals = self.values(*gain).to_vec();
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..m {
                    let row = &x_vals[r * n..(r + 1) * n];
                    let g_row = &grad[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();

                    let mut dxhat_mean = 0.0;
                    let mut dxhat_xhat_mean = 0.0;
                    for j in 0..n {
                        let dxhat = g_row[j] * g_vals[j];
                        dxhat_mean += dxhat;
                        dxhat_xhat_mean += dxhat * xhat[j];
                        dgain[j] += g_row[j] * xhat[j];
                        dbias[j] += g_row[j];
                    }
                    dxhat_mean /= n as f64;
                    dxhat_xhat_mean /= n as f64;
                    for j in 0..n {
                        let dxhat = g_row[j] * g_vals[j];
                        dx[r * n + j] = inv_std * (dxhat - dxhat_mean - xhat[j] * dxhat_xhat_mean);
                    }
                }
                if needs[x.0] {
                    self.add_to_grad(*x, &dx);
                }
                if needs[gain.0] {
                    self.add_to_grad(*gain, &dgain);
                }
                if needs[bias.0] {
                    self.add_to_grad(*bias, &dbias);
                }
            }

            Op::CrossEntropy { logits, targets, ignore_index, n_kept } => {
                if needs[logits.0] {
                    let (t_len, vocab) = self.dims2(*logits);
                    let vals = self.values(*logits);
                    let g = grad[0] / *n_kept as f64;
                    let mut dl = vec![0.0; t_len * vocab];
                    for (t, &target) in targets.iter().enumerate() {
                        if Some(target) == *ignore_index {
                            continue;
                        }
                        let row = &vals[t * vocab..(t + 1) * vocab];
                        let mut soft = row.to_vec();
                        softmax_row_in_place(&mut soft);
                        for j in 0..vocab {
                            let indicator = if j == target { 1.0 } else { 0.0 };
                            dl[t * vocab + j] = g * (soft[j] - indicator);
                        }
                    }
                    self.add_to_grad(*logits, &dl);
                }
            }

            Op::Embedding { table, ids } => {
                if needs[table.0] {
                    let d = self.dims2(*table).1;
                    let numel = self.tensor(*table).numel();
                    let mut dt = vec![0.0; numel];
                    for (t, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        for (dv, &g) in dst.iter_mut().zip(&grad[t * d..(t + 1) * d]) {
                            *dv += g;
                        }
                    }
                    self.add_to_grad(*table, &dt);
                }
            }

            Op::NarrowCols { x, start, len } => {
                if needs[x.0] {
                    let (m, n) = self.dims2(*x);
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        dx[i * n + start..i * n + start + len]
                            .copy_from_slice(&grad[i * len..(i + 1) * len]);
                    }
                    self.add_to_grad(*x, &dx);
                }
            }

            Op::ConcatCols { xs } => {
                let m = self.dims2(xs[0]).0;
                let total: usize = xs.iter().map(|&x| self.dims2(x).1).sum();
                let mut offset = 0usize;
                for &x in xs {
                    let n = self.dims2(x).1;
                    if needs[x.0] {
                        let mut dx = vec![0.0; m * n];
                        for i in 0..m {
                            dx[i * n..(i + 1) * n]
                                .copy_from_slice(&grad[i * total + offset..i * total + offset + n]);
                        }
                        self.add_to_grad(x, &dx);
                    }
                    offset += n;
                }
            }

            Op::Sum { x } => {
                if needs[x.0] {
                    let dx = vec![grad[0]; self.tensor(*x).numel()];
                    self.add_to_grad(*x, &dx);
                }
            }

            Op::Mean { x } => {
                if needs[x.0] {
                    let n = self.tensor(*x).numel();
                    let dx = vec![grad[0] / n as f64; n];
                    self.add_to_grad(*x, &dx);
                }
            }

            Op::Dropout { x, scaled_mask } => {
                if needs[x.0] {
                    let dx: Vec<f64> = grad.iter().zip(scaled_mask).map(|(g, m)| g * m).collect();
                    self.add_to_grad(*x, &dx);
                }
            }
        }
    }
}

fn softmax_row_in_place(row: &mut [f64]) {
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

fn log_softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for v in row.iter_mut() {
        *v -= log_sum;
    }
}

/// `log softmax(row)[index]` without mutating the row.
pub fn log_softmax_entry(row: &[f64], index: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[index] - log_sum
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
