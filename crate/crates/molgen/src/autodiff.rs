//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass as an
//! arena of nodes; [`Tape::backward`] replays the record in reverse
//! creation order (reverse topological order by construction) and
//! accumulates vector-Jacobian products into each node's gradient buffer.
//!
//! The primitive set is deliberately small: matmul, elementwise add/mul,
//! row broadcasts, shifted softplus, sigmoid, (log-)softmax over rows,
//! full-sum reduction, and row gather/scatter for embeddings and
//! neighborhood aggregation. Everything else in the model is composed
//! from these.
//!
//! Neighbor sums in [`Tape::scatter_sum_rows`] accumulate contributions
//! in value-sorted order, so the result is invariant under permutation of
//! the source rows feeding one output row, not just up to rounding.

use crate::real::Real;

pub type NodeId = usize;

/// A plain owned matrix. Scalars are 1x1, row vectors 1xC.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R: Real> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor shape {}x{} does not match data length {}",
            rows,
            cols,
            data.len()
        );
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![R::zero(); rows * cols] }
    }

    pub fn scalar(v: R) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Tensor::new(rows, cols, data.iter().map(|&v| R::from_f64(v)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> R {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: R) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[R] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Debug)]
enum Op<R: Real> {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Ssp(NodeId),
    Sigmoid(NodeId),
    Scale(NodeId, R),
    SoftmaxRows(NodeId, R),
    LogSoftmaxRows(NodeId, R),
    Sum(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ScatterSumRows(NodeId, Vec<usize>),
}

struct Node<R: Real> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
    grad: Option<Vec<R>>,
    /// True for leaves registered as trainable parameters.
    requires_grad: bool,
    /// True if any parameter is upstream; gates VJP work during backward.
    needs_grad: bool,
    op: Op<R>,
}

/// Records a forward pass; replays it in reverse for gradients.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<R>, op: Op<R>) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::MulRow(a, b) => self.nodes[*a].needs_grad || self.nodes[*b].needs_grad,
            Op::Ssp(x)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::SoftmaxRows(x, _)
            | Op::LogSoftmaxRows(x, _)
            | Op::Sum(x)
            | Op::GatherRows(x, _)
            | Op::ScatterSumRows(x, _) => self.nodes[*x].needs_grad,
        };
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: None,
            requires_grad: false,
            needs_grad,
            op,
        });
        self.nodes.len() - 1
    }

    /// Register a constant leaf. Gradients are not propagated into it.
    pub fn leaf(&mut self, t: &Tensor<R>) -> NodeId {
        self.push(t.rows, t.cols, t.data.clone(), Op::Leaf)
    }

    /// Register a trainable leaf; its gradient is available after backward.
    pub fn param(&mut self, t: &Tensor<R>) -> NodeId {
        let id = self.push(t.rows, t.cols, t.data.clone(), Op::Leaf);
        self.nodes[id].requires_grad = true;
        self.nodes[id].needs_grad = true;
        id
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn value(&self, id: NodeId) -> &[R] {
        &self.nodes[id].data
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<R> {
        let n = &self.nodes[id];
        Tensor::new(n.rows, n.cols, n.data.clone())
    }

    pub fn scalar_value(&self, id: NodeId) -> R {
        let n = &self.nodes[id];
        assert!(n.rows == 1 && n.cols == 1, "node {} is {}x{}, not a scalar", id, n.rows, n.cols);
        n.data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[R]> {
        self.nodes[id].grad.as_deref()
    }

    // ── primitives ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul shape mismatch: lhs {}x{}, rhs {}x{}", m, ka, kb, n);
        let mut out = vec![R::zero(); m * n];
        matmul_into(&self.nodes[a].data, &self.nodes[b].data, &mut out, m, ka, n);
        self.push(m, n, out, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa, sb, "add shape mismatch: {}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1);
        let data =
            self.nodes[a].data.iter().zip(&self.nodes[b].data).map(|(&x, &y)| x + y).collect();
        self.push(sa.0, sa.1, data, Op::Add(a, b))
    }

    /// `x[n x c] + row[1 x c]`, broadcasting the row over every row of x.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (n, c) = self.shape(x);
        let sr = self.shape(row);
        assert_eq!(sr, (1, c), "add_row shape mismatch: {}x{} vs row {}x{}", n, c, sr.0, sr.1);
        let mut data = self.nodes[x].data.clone();
        for r in 0..n {
            for j in 0..c {
                data[r * c + j] += self.nodes[row].data[j];
            }
        }
        self.push(n, c, data, Op::AddRow(x, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa, sb, "mul shape mismatch: {}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1);
        let data =
            self.nodes[a].data.iter().zip(&self.nodes[b].data).map(|(&x, &y)| x * y).collect();
        self.push(sa.0, sa.1, data, Op::Mul(a, b))
    }

    /// `x[n x c] * row[1 x c]` elementwise, broadcasting the row.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (n, c) = self.shape(x);
        let sr = self.shape(row);
        assert_eq!(sr, (1, c), "mul_row shape mismatch: {}x{} vs row {}x{}", n, c, sr.0, sr.1);
        let mut data = self.nodes[x].data.clone();
        for r in 0..n {
            for j in 0..c {
                data[r * c + j] *= self.nodes[row].data[j];
            }
        }
        self.push(n, c, data, Op::MulRow(x, row))
    }

    /// Shifted softplus ln(0.5 e^x + 0.5), stabilized for large |x|.
    pub fn ssp(&mut self, x: NodeId) -> NodeId {
        let (n, c) = self.shape(x);
        let data = self.nodes[x].data.iter().map(|&v| ssp_scalar(v)).collect();
        self.push(n, c, data, Op::Ssp(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let (n, c) = self.shape(x);
        let data = self.nodes[x].data.iter().map(|&v| sigmoid_scalar(v)).collect();
        self.push(n, c, data, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: NodeId, k: R) -> NodeId {
        let (n, c) = self.shape(x);
        let data = self.nodes[x].data.iter().map(|&v| v * k).collect();
        self.push(n, c, data, Op::Scale(x, k))
    }

    /// Row-wise tempered softmax: each row becomes softmax(row / t).
    pub fn softmax_rows(&mut self, x: NodeId, temperature: R) -> NodeId {
        assert!(temperature > R::zero(), "softmax temperature must be > 0, got {}", temperature);
        let (n, c) = self.shape(x);
        let inv_t = temperature.recip();
        let mut data = self.nodes[x].data.clone();
        for r in 0..n {
            softmax_row(&mut data[r * c..(r + 1) * c], inv_t);
        }
        self.push(n, c, data, Op::SoftmaxRows(x, inv_t))
    }

    /// Row-wise tempered log-softmax; never overflows for finite logits.
    pub fn log_softmax_rows(&mut self, x: NodeId, temperature: R) -> NodeId {
        assert!(temperature > R::zero(), "softmax temperature must be > 0, got {}", temperature);
        let (n, c) = self.shape(x);
        let inv_t = temperature.recip();
        let mut data = self.nodes[x].data.clone();
        for r in 0..n {
            log_softmax_row(&mut data[r * c..(r + 1) * c], inv_t);
        }
        self.push(n, c, data, Op::LogSoftmaxRows(x, inv_t))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut s = R::zero();
        for &v in &self.nodes[x].data {
            s += v;
        }
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    /// `out[r] = x[idx[r]]` row selection; backward scatter-adds.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let (n, c) = self.shape(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < n, "gather_rows index {} out of range for {} rows", i, n);
            data.extend_from_slice(&self.nodes[x].data[i * c..(i + 1) * c]);
        }
        self.push(idx.len(), c, data, Op::GatherRows(x, idx.to_vec()))
    }

    /// `out[o] = sum of x[r] over r with idx[r] == o`, for o in 0..out_rows.
    ///
    /// Contributions to one output cell are summed in value order so the
    /// result does not depend on how the source rows are enumerated.
    pub fn scatter_sum_rows(&mut self, x: NodeId, idx: &[usize], out_rows: usize) -> NodeId {
        let (m, c) = self.shape(x);
        assert_eq!(idx.len(), m, "scatter_sum_rows: {} indices for {} rows", idx.len(), m);
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); out_rows];
        for (r, &o) in idx.iter().enumerate() {
            assert!(
                o < out_rows,
                "scatter_sum_rows index {} out of range for {} rows",
                o,
                out_rows
            );
            groups[o].push(r);
        }
        let src = &self.nodes[x].data;
        let mut data = vec![R::zero(); out_rows * c];
        let mut vals: Vec<R> = Vec::new();
        for (o, group) in groups.iter().enumerate() {
            for j in 0..c {
                vals.clear();
                vals.extend(group.iter().map(|&r| src[r * c + j]));
                vals.sort_unstable_by(|a, b| a.total_cmp(b));
                let mut s = R::zero();
                for &v in &vals {
                    s += v;
                }
                data[o * c + j] = s;
            }
        }
        self.push(out_rows, c, data, Op::ScatterSumRows(x, idx.to_vec()))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populate gradient buffers for everything upstream of `loss`.
    pub fn backward(&mut self, loss: NodeId) {
        let n = &self.nodes[loss];
        assert!(
            n.rows == 1 && n.cols == 1,
            "backward requires a scalar loss, got {}x{}",
            n.rows,
            n.cols
        );
        self.nodes[loss].grad = Some(vec![R::one()]);

        for id in (0..=loss).rev() {
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = self.shape(a);
                    let (_, nn) = self.shape(b);
                    if self.nodes[a].needs_grad {
                        // d_a = g . b^T
                        let mut da = vec![R::zero(); m * k];
                        let bd = &self.nodes[b].data;
                        for r in 0..m {
                            for kk in 0..k {
                                let mut s = R::zero();
                                for cc in 0..nn {
                                    s += g[r * nn + cc] * bd[kk * nn + cc];
                                }
                                da[r * k + kk] = s;
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].needs_grad {
                        // d_b = a^T . g
                        let mut db = vec![R::zero(); k * nn];
                        let ad = &self.nodes[a].data;
                        for kk in 0..k {
                            for cc in 0..nn {
                                let mut s = R::zero();
                                for r in 0..m {
                                    s += ad[r * k + kk] * g[r * nn + cc];
                                }
                                db[kk * nn + cc] = s;
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a].needs_grad {
                        self.accumulate(a, &g);
                    }
                    if self.nodes[b].needs_grad {
                        self.accumulate(b, &g);
                    }
                }
                Op::AddRow(x, row) => {
                    let (n, c) = self.shape(x);
                    if self.nodes[x].needs_grad {
                        self.accumulate(x, &g);
                    }
                    if self.nodes[row].needs_grad {
                        let mut dr = vec![R::zero(); c];
                        for r in 0..n {
                            for j in 0..c {
                                dr[j] += g[r * c + j];
                            }
                        }
                        self.accumulate(row, &dr);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a].needs_grad {
                        let da: Vec<R> =
                            g.iter().zip(&self.nodes[b].data).map(|(&gi, &bi)| gi * bi).collect();
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].needs_grad {
                        let db: Vec<R> =
                            g.iter().zip(&self.nodes[a].data).map(|(&gi, &ai)| gi * ai).collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::MulRow(x, row) => {
                    let (n, c) = self.shape(x);
                    if self.nodes[x].needs_grad {
                        let rowd = &self.nodes[row].data;
                        let mut dx = vec![R::zero(); n * c];
                        for r in 0..n {
                            for j in 0..c {
                                dx[r * c + j] = g[r * c + j] * rowd[j];
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                    if self.nodes[row].needs_grad {
                        let xd = &self.nodes[x].data;
                        let mut dr = vec![R::zero(); c];
                        for r in 0..n {
                            for j in 0..c {
                                dr[j] += g[r * c + j] * xd[r * c + j];
                            }
                        }
                        self.accumulate(row, &dr);
                    }
                }
                Op::Ssp(x) | Op::Sigmoid(x) if !self.nodes[x].needs_grad => {}
                Op::Ssp(x) => {
                    let dx: Vec<R> = g
                        .iter()
                        .zip(&self.nodes[x].data)
                        .map(|(&gi, &xi)| gi * sigmoid_scalar(xi))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Sigmoid(x) => {
                    let dx: Vec<R> = g
                        .iter()
                        .zip(&self.nodes[id].data)
                        .map(|(&gi, &yi)| gi * yi * (R::one() - yi))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Scale(x, k) => {
                    if self.nodes[x].needs_grad {
                        let dx: Vec<R> = g.iter().map(|&gi| gi * k).collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::SoftmaxRows(x, inv_t) => {
                    if self.nodes[x].needs_grad {
                        let (n, c) = self.shape(x);
                        let y = &self.nodes[id].data;
                        let mut dx = vec![R::zero(); n * c];
                        for r in 0..n {
                            let base = r * c;
                            let mut dot = R::zero();
                            for j in 0..c {
                                dot += g[base + j] * y[base + j];
                            }
                            for j in 0..c {
                                dx[base + j] = inv_t * y[base + j] * (g[base + j] - dot);
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::LogSoftmaxRows(x, inv_t) => {
                    if self.nodes[x].needs_grad {
                        let (n, c) = self.shape(x);
                        let z = &self.nodes[id].data;
                        let mut dx = vec![R::zero(); n * c];
                        for r in 0..n {
                            let base = r * c;
                            let mut gsum = R::zero();
                            for j in 0..c {
                                gsum += g[base + j];
                            }
                            for j in 0..c {
                                let y = z[base + j].exp();
                                dx[base + j] = inv_t * (g[base + j] - y * gsum);
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::Sum(x) => {
                    if self.nodes[x].needs_grad {
                        let numel = self.nodes[x].data.len();
                        self.accumulate(x, &vec![g[0]; numel]);
                    }
                }
                Op::GatherRows(x, idx) => {
                    if self.nodes[x].needs_grad {
                        let (n, c) = self.shape(x);
                        let mut dx = vec![R::zero(); n * c];
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..c {
                                dx[i * c + j] += g[r * c + j];
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::ScatterSumRows(x, idx) => {
                    if self.nodes[x].needs_grad {
                        let (m, c) = self.shape(x);
                        let mut dx = vec![R::zero(); m * c];
                        for (r, &o) in idx.iter().enumerate() {
                            dx[r * c..(r + 1) * c].copy_from_slice(&g[o * c..(o + 1) * c]);
                        }
                        self.accumulate(x, &dx);
                    }
                }
            }
            // Re-attach the seed gradient for nodes whose grads the caller reads.
            if self.nodes[id].requires_grad || id == loss {
                self.nodes[id].grad = Some(g);
            }
        }
    }

    fn accumulate(&mut self, id: NodeId, delta: &[R]) {
        let node = &mut self.nodes[id];
        match &mut node.grad {
            Some(buf) => {
                for (b, &d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }
}

pub fn matmul_into<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for r in 0..m {
        for kk in 0..k {
            let av = a[r * k + kk];
            if av == R::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn ssp_scalar<R: Real>(x: R) -> R {
    // ssp(x) = max(x, 0) + ln(0.5 (1 + e^{-|x|}))
    let ln2 = R::from_f64(std::f64::consts::LN_2);
    x.max(R::zero()) + (-x.abs()).exp().ln_1p() - ln2
}

pub fn sigmoid_scalar<R: Real>(x: R) -> R {
    if x >= R::zero() {
        (R::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

fn softmax_row<R: Real>(row: &mut [R], inv_t: R) {
    if row.is_empty() {
        return;
    }
    let mut max = row[0];
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut sum = R::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) * inv_t).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn log_softmax_row<R: Real>(row: &mut [R], inv_t: R) {
    if row.is_empty() {
        return;
    }
    let mut max = row[0];
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut sum = R::zero();
    for v in row.iter_mut() {
        *v = (*v - max) * inv_t;
        sum += v.exp();
    }
    let log_z = sum.ln();
    for v in row.iter_mut() {
        *v -= log_z;
    }
}
