//! Dense f64 tensors on a reverse-mode gradient tape.
//!
//! The tape is define-by-run: every differentiable operation appends a node
//! holding its output buffer, shape, and the handles of its inputs. Nodes
//! only ever reference earlier nodes, so insertion order is a topological
//! order and `backward` is a single reverse sweep. A tape is built per
//! forward pass and discarded; long-lived parameters live outside as plain
//! buffers and re-enter each pass as leaves.
//!
//! Committed values are checked for NaN/Inf and the check is a hard error.
//! Storage is flat row-major with explicit shape; no views or strides.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Cheap to copy; only meaningful together
/// with the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Tanh { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Abs { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    SoftmaxRows { x: usize },
    L2Normalize { x: usize },
    CosineSim { a: usize, b: usize },
    StackRows { rows: Vec<usize> },
    Row { x: usize, r: usize },
    StackScalars { xs: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    is_leaf: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of executed operations plus their buffers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Construction ────────────────────────────────────────────────

    fn commit(
        &mut self,
        op_name: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        is_leaf: bool,
        requires_grad: bool,
        op: Op,
    ) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(op_name, format!("zero dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                op_name,
                format!("shape {:?} does not match buffer length {}", shape, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let id = self.nodes.len();
        self.nodes.push(Node { data, shape, requires_grad, is_leaf, grad: None, op });
        Ok(Tensor { id })
    }

    /// Trainable leaf: participates in backward, grad populated afterwards.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        self.commit("leaf", data, shape, true, true, Op::Leaf)
    }

    /// Frozen leaf: never receives a gradient buffer.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        self.commit("constant", data, shape, true, false, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Tensor> {
        self.constant(vec![value], vec![1])
    }

    // ── Accessors ───────────────────────────────────────────────────

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].data
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    /// Scalar readout; errors on non-scalar tensors.
    pub fn value(&self, t: Tensor) -> Result<f64> {
        let n = &self.nodes[t.id];
        if n.data.len() != 1 {
            return Err(Error::Contract(format!(
                "value() requires a scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    /// Gradient buffer; `None` for frozen leaves and before backward.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.id].grad.as_deref()
    }

    // ── Elementwise and reduction ops ───────────────────────────────

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.nodes[a.id].shape, self.nodes[b.id].shape),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let rg = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        self.commit("add", data, shape, false, rg, Op::Add { a: a.id, b: b.id })
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let rg = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        self.commit("sub", data, shape, false, rg, Op::Sub { a: a.id, b: b.id })
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let rg = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        self.commit("mul", data, shape, false, rg, Op::Mul { a: a.id, b: b.id })
    }

    /// Multiply by a plain scalar constant.
    pub fn scale(&mut self, x: Tensor, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.nodes[x.id].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.id].shape.clone();
        let rg = self.nodes[x.id].requires_grad;
        self.commit("scale", data, shape, false, rg, Op::Scale { x: x.id, c })
    }

    /// Add a plain scalar constant to every element.
    pub fn add_scalar(&mut self, x: Tensor, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.nodes[x.id].data.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.id].shape.clone();
        let rg = self.nodes[x.id].requires_grad;
        self.commit("add_scalar", data, shape, false, rg, Op::AddScalar { x: x.id })
    }

    pub fn tanh(&mut self, x: Tensor) -> Result<Tensor> {
        let data: Vec<f64> = self.nodes[x.id].data.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.id].shape.clone();
        let rg = self.nodes[x.id].requires_grad;
        self.commit("tanh", data, shape, false, rg, Op::Tanh { x: x.id })
    }

    pub fn exp(&mut self, x: Tensor) -> Result<Tensor> {
        let data: Vec<f64> = self.nodes[x.id].data.iter().map(|v| v.exp()).collect();
        let shape = self.nodes[x.id].shape.clone();
        let rg = self.nodes[x.id].requires_grad;
        self.commit("exp", data, shape, false, rg, Op::Exp { x: x.id })
    }

    pub fn log(&mut self, x: Tensor) -> Result<Tensor> {
        if let Some(v) = self.nodes[x.id].data.iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain { op: "log", detail: format!("log of non-positive input {v}") });
        }
        let data: Vec<f64> = self.nodes[x.id].data.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.id].shape.clone();
        let rg = self.nodes[x.id].requires_grad;
        self.commit("log", data, shape, false, rg, Op::Log { x: x.id })
    }

    pub fn abs(&mut self, x: Tensor) -> Result<Tensor> {
        let data: Vec<f64> = self.nodes[x.id].data.iter().map(|v| v.abs()).collect();
        let shape = self.nodes[x.id].shape.clone();
        let rg = self.nodes[x.id].requires_grad;
        self.commit("abs", data, shape, false, rg, Op::Abs { x: x.id })
    }

    pub fn sum(&mut self, x: Tensor) -> Result<Tensor> {
        let s: f64 = self.nodes[x.id].data.iter().sum();
        let rg = self.nodes[x.id].requires_grad;
        self.commit("sum", vec![s], vec![1], false, rg, Op::Sum { x: x.id })
    }

    pub fn mean(&mut self, x: Tensor) -> Result<Tensor> {
        let n = self.nodes[x.id].data.len() as f64;
        let s: f64 = self.nodes[x.id].data.iter().sum();
        let rg = self.nodes[x.id].requires_grad;
        self.commit("mean", vec![s / n], vec![1], false, rg, Op::Mean { x: x.id })
    }

    // ── Matrix ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (&self.nodes[a.id].shape, &self.nodes[b.id].shape);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("expects 2-D operands, got {sa:?} x {sb:?}")));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dimensions {k} vs {k2}")));
        }
        let data = matmul_raw(&self.nodes[a.id].data, &self.nodes[b.id].data, m, k, n);
        let rg = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        self.commit("matmul", data, vec![m, n], false, rg, Op::MatMul { a: a.id, b: b.id })
    }

    pub fn transpose(&mut self, x: Tensor) -> Result<Tensor> {
        let s = &self.nodes[x.id].shape;
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expects 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[x.id].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.nodes[x.id].requires_grad;
        self.commit("transpose", data, vec![c, r], false, rg, Op::Transpose { x: x.id })
    }

    /// Row-wise stable softmax of a 2-D tensor; each output row sums to 1.
    pub fn softmax_rows(&mut self, x: Tensor) -> Result<Tensor> {
        let s = &self.nodes[x.id].shape;
        if s.len() != 2 {
            return Err(Error::shape("softmax_rows", format!("expects 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[x.id].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                data[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                data[i * c + j] /= z;
            }
        }
        let rg = self.nodes[x.id].requires_grad;
        self.commit("softmax_rows", data, vec![r, c], false, rg, Op::SoftmaxRows { x: x.id })
    }

    // ── Vector ops ──────────────────────────────────────────────────

    fn expect_1d(&self, op: &'static str, t: Tensor) -> Result<usize> {
        let s = &self.nodes[t.id].shape;
        if s.len() != 1 {
            return Err(Error::shape(op, format!("expects 1-D, got {s:?}")));
        }
        Ok(s[0])
    }

    pub fn l2_normalize(&mut self, x: Tensor) -> Result<Tensor> {
        self.expect_1d("l2_normalize", x)?;
        let src = &self.nodes[x.id].data;
        let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::degenerate("l2_normalize", "zero vector"));
        }
        let data: Vec<f64> = src.iter().map(|v| v / norm).collect();
        let shape = self.nodes[x.id].shape.clone();
        let rg = self.nodes[x.id].requires_grad;
        self.commit("l2_normalize", data, shape, false, rg, Op::L2Normalize { x: x.id })
    }

    /// Cosine similarity of two 1-D vectors, as a scalar tensor in [-1, 1].
    pub fn cosine_sim(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let la = self.expect_1d("cosine_sim", a)?;
        let lb = self.expect_1d("cosine_sim", b)?;
        if la != lb {
            return Err(Error::shape("cosine_sim", format!("lengths {la} vs {lb}")));
        }
        let (da, db) = (&self.nodes[a.id].data, &self.nodes[b.id].data);
        let na = da.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = db.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::degenerate("cosine_sim", "zero-norm input"));
        }
        let dot: f64 = da.iter().zip(db).map(|(x, y)| x * y).sum();
        let c = dot / (na * nb);
        let rg = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        self.commit("cosine_sim", vec![c], vec![1], false, rg, Op::CosineSim { a: a.id, b: b.id })
    }

    // ── Sequence assembly ───────────────────────────────────────────

    /// Stack L same-length 1-D vectors into an [L, D] matrix.
    pub fn stack_rows(&mut self, rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows", "empty row list"));
        }
        let d = self.expect_1d("stack_rows", rows[0])?;
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut rg = false;
        for &r in rows {
            let dr = self.expect_1d("stack_rows", r)?;
            if dr != d {
                return Err(Error::shape("stack_rows", format!("row lengths {d} vs {dr}")));
            }
            data.extend_from_slice(&self.nodes[r.id].data);
            rg |= self.nodes[r.id].requires_grad;
        }
        let ids: Vec<usize> = rows.iter().map(|r| r.id).collect();
        self.commit("stack_rows", data, vec![rows.len(), d], false, rg, Op::StackRows { rows: ids })
    }

    /// Extract row `r` of an [L, D] matrix as a 1-D vector.
    pub fn row(&mut self, x: Tensor, r: usize) -> Result<Tensor> {
        let s = &self.nodes[x.id].shape;
        if s.len() != 2 {
            return Err(Error::shape("row", format!("expects 2-D, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if r >= rows {
            return Err(Error::shape("row", format!("row {r} out of {rows}")));
        }
        let data = self.nodes[x.id].data[r * cols..(r + 1) * cols].to_vec();
        let rg = self.nodes[x.id].requires_grad;
        self.commit("row", data, vec![cols], false, rg, Op::Row { x: x.id, r })
    }

    /// Mean over the rows of an [L, D] matrix, yielding a 1-D vector.
    pub fn mean_rows(&mut self, x: Tensor) -> Result<Tensor> {
        let s = &self.nodes[x.id].shape;
        if s.len() != 2 {
            return Err(Error::shape("mean_rows", format!("expects 2-D, got {s:?}")));
        }
        let rows = s[0];
        // Composed from primitives: (1ᵀ/L)·X via scale(sum over rows).
        let ones = self.constant(vec![1.0 / rows as f64; rows], vec![1, rows])?;
        let pooled = self.matmul(ones, x)?;
        self.row(pooled, 0)
    }

    /// Stack n scalars into a 1-D vector of length n.
    pub fn stack_scalars(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::shape("stack_scalars", "empty scalar list"));
        }
        let mut data = Vec::with_capacity(xs.len());
        let mut rg = false;
        for &x in xs {
            let n = &self.nodes[x.id];
            if n.data.len() != 1 {
                return Err(Error::shape("stack_scalars", format!("non-scalar shape {:?}", n.shape)));
            }
            data.push(n.data[0]);
            rg |= n.requires_grad;
        }
        let ids: Vec<usize> = xs.iter().map(|x| x.id).collect();
        self.commit("stack_scalars", data, vec![xs.len()], false, rg, Op::StackScalars { xs: ids })
    }

    // ── Composites ──────────────────────────────────────────────────

    /// Dot product of two 1-D vectors.
    pub fn dot(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Stable log-sum-exp of a 1-D vector. The shift is treated as a
    /// constant, which leaves the gradient (softmax) unchanged.
    pub fn logsumexp(&mut self, x: Tensor) -> Result<Tensor> {
        self.expect_1d("logsumexp", x)?;
        let mx = self.nodes[x.id].data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shifted = self.add_scalar(x, -mx)?;
        let e = self.exp(shifted)?;
        let s = self.sum(e)?;
        let l = self.log(s)?;
        self.add_scalar(l, mx)
    }

    /// Element `i` of a 1-D vector, via a one-hot mask (keeps gradient flow).
    pub fn pick(&mut self, x: Tensor, i: usize) -> Result<Tensor> {
        let n = self.expect_1d("pick", x)?;
        if i >= n {
            return Err(Error::shape("pick", format!("index {i} out of {n}")));
        }
        let mut onehot = vec![0.0; n];
        onehot[i] = 1.0;
        let mask = self.constant(onehot, vec![n])?;
        self.dot(x, mask)
    }

    /// Squared Euclidean norm of the difference of two 1-D vectors.
    pub fn sq_dist(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.sum(sq)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates the grad buffer of every
    /// trainable leaf (zeros for leaves the loss never touched). Errors on a
    /// non-scalar loss and on a second call without a fresh tape.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward() called twice on the same tape".into()));
        }
        let n = &self.nodes[loss.id];
        if n.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        self.backward_done = true;

        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.apply_backward(id, &g, &mut grads);
            if self.nodes[id].is_leaf {
                grads[id] = Some(g); // keep for the commit below
            }
        }

        // Every trainable leaf ends with a populated buffer.
        for id in 0..count {
            let node = &mut self.nodes[id];
            if node.is_leaf && node.requires_grad {
                let buf = grads[id].take().unwrap_or_else(|| vec![0.0; node.data.len()]);
                node.grad = Some(buf);
            }
        }
        Ok(())
    }

    fn apply_backward(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |target: usize, contribution: Vec<f64>| {
            if !self.nodes[target].requires_grad {
                return; // frozen subgraph: nothing trainable upstream
            }
            match &mut grads[target] {
                Some(buf) => {
                    for (b, c) in buf.iter_mut().zip(&contribution) {
                        *b += c;
                    }
                }
                slot => *slot = Some(contribution),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = g.iter().zip(&self.nodes[*b].data).map(|(g, v)| g * v).collect();
                let db: Vec<f64> = g.iter().zip(&self.nodes[*a].data).map(|(g, v)| g * v).collect();
                acc(*a, da);
                acc(*b, db);
            }
            Op::Scale { x, c } => {
                acc(*x, g.iter().map(|v| v * c).collect());
            }
            Op::AddScalar { x } => {
                acc(*x, g.to_vec());
            }
            Op::Tanh { x } => {
                let d: Vec<f64> = g.iter().zip(&node.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(*x, d);
            }
            Op::Exp { x } => {
                let d: Vec<f64> = g.iter().zip(&node.data).map(|(g, y)| g * y).collect();
                acc(*x, d);
            }
            Op::Log { x } => {
                let d: Vec<f64> = g.iter().zip(&self.nodes[*x].data).map(|(g, v)| g / v).collect();
                acc(*x, d);
            }
            Op::Abs { x } => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*x].data)
                    .map(|(g, v)| g * if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                acc(*x, d);
            }
            Op::Sum { x } => {
                acc(*x, vec![g[0]; self.nodes[*x].data.len()]);
            }
            Op::Mean { x } => {
                let n = self.nodes[*x].data.len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                // dA = dC · Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bd[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                // dB = Aᵀ · dC
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += ad[i * k + p] * g[i * n + j];
                        }
                        db[p * n + j] = s;
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Transpose { x } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g[i * c + j];
                    }
                }
                acc(*x, d);
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let y = &node.data;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        d[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                    }
                }
                acc(*x, d);
            }
            Op::L2Normalize { x } => {
                let src = &self.nodes[*x].data;
                let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
                let y = &node.data;
                let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                let d: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| (gi - yi * gy) / norm).collect();
                acc(*x, d);
            }
            Op::CosineSim { a, b } => {
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                let na = ad.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = bd.iter().map(|v| v * v).sum::<f64>().sqrt();
                let c = node.data[0];
                let g0 = g[0];
                let da: Vec<f64> = ad
                    .iter()
                    .zip(bd)
                    .map(|(ai, bi)| g0 * (bi / (na * nb) - c * ai / (na * na)))
                    .collect();
                let db: Vec<f64> = ad
                    .iter()
                    .zip(bd)
                    .map(|(ai, bi)| g0 * (ai / (na * nb) - c * bi / (nb * nb)))
                    .collect();
                acc(*a, da);
                acc(*b, db);
            }
            Op::StackRows { rows } => {
                let d = node.shape[1];
                for (i, &r) in rows.iter().enumerate() {
                    acc(r, g[i * d..(i + 1) * d].to_vec());
                }
            }
            Op::Row { x, r } => {
                let cols = node.data.len();
                let total = self.nodes[*x].data.len();
                let mut d = vec![0.0; total];
                d[r * cols..(r + 1) * cols].copy_from_slice(g);
                acc(*x, d);
            }
            Op::StackScalars { xs } => {
                for (i, &x) in xs.iter().enumerate() {
                    acc(x, vec![g[i]]);
                }
            }
        }
    }
}

/// Plain row-major matrix product, shared by forward and backward paths.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

// ── Value-level vector helpers ──────────────────────────────────────
//
// Used where no gradient is needed (retrieval scoring, evaluation).

pub fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_slice(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn cosine_slice(a: &[f64], b: &[f64]) -> f64 {
    dot_slice(a, b) / (norm_slice(a) * norm_slice(b))
}

pub fn normalize_slice(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm_slice(a);
    if n == 0.0 {
        return Err(Error::degenerate("l2_normalize", "zero vector"));
    }
    Ok(a.iter().map(|v| v / n).collect())
}
