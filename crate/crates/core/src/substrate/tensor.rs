use crate::error::{Error, Result};

use super::scalar::Scalar;

/// Probability floor applied inside `log` so downstream KL terms never see
/// log(0). Gradient is cut to zero below the floor.
pub const LOG_FLOOR: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;

/// Dense row-major tensor value. Parameters and constants live as `Tensor`s
/// outside any tape; forward passes insert them as leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::ZERO; numel],
            requires_grad: false,
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// (rows, cols) view: 1-D tensors are a single row, scalars are 1x1.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.numel() / cols, cols)
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add { a: NodeId, b: NodeId, broadcast_b: bool },
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { a: NodeId, r0: usize },
    SliceCols { a: NodeId, c0: usize },
    GatherRows { a: NodeId, idx: Vec<u32> },
    SoftmaxRows(NodeId),
    Log(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gelu(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<u32> },
}

struct Node<S: Scalar> {
    rows: usize,
    cols: usize,
    value: Vec<S>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops. Inputs always precede the ops consuming
/// them, so the backward pass is a single reverse sweep with deterministic
/// accumulation order.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
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
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<S>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.idx()].rows
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.nodes[id.idx()].cols
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.idx()].value
    }

    pub fn scalar_value(&self, id: NodeId) -> S {
        debug_assert_eq!(self.nodes[id.idx()].value.len(), 1);
        self.nodes[id.idx()].value[0]
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if it flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.idx()).and_then(|g| g.as_deref())
    }

    // ── leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, tensor: &Tensor<S>) -> NodeId {
        let (r, c) = tensor.dims2();
        self.push(r, c, tensor.data.clone(), Op::Leaf, tensor.requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<S>) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        self.push(rows, cols, data, Op::Leaf, false)
    }

    pub fn constant_f64(&mut self, rows: usize, cols: usize, data: &[f64]) -> NodeId {
        let cast = data.iter().map(|&v| S::from_f64(v)).collect();
        self.constant(rows, cols, cast)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(1, 1, vec![S::from_f64(v)])
    }

    // ── ops ─────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::dim(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![S::ZERO; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::Matmul(a, b), ng))
    }

    /// Elementwise add. `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = (self.rows(a), self.cols(a));
        let (bm, bn) = (self.rows(b), self.cols(b));
        let broadcast_b = bm == 1 && m != 1;
        if bn != n || (!broadcast_b && bm != m) {
            return Err(Error::dim(format!("add {m}x{n} with {bm}x{bn}")));
        }
        let mut out = self.value(a).to_vec();
        let bv = self.value(b);
        if broadcast_b {
            for r in 0..m {
                let row = &mut out[r * n..(r + 1) * n];
                for (o, &x) in row.iter_mut().zip(bv.iter()) {
                    *o += x;
                }
            }
        } else {
            for (o, &x) in out.iter_mut().zip(bv.iter()) {
                *o += x;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::Add { a, b, broadcast_b }, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = (self.rows(a), self.cols(a));
        if (self.rows(b), self.cols(b)) != (m, n) {
            return Err(Error::dim(format!(
                "mul {m}x{n} with {}x{}",
                self.rows(b),
                self.cols(b)
            )));
        }
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::Mul(a, b), ng))
    }

    /// Multiply by a compile-time-known scalar (composed elementwise mul).
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = S::from_f64(c);
        let out: Vec<S> = self.value(a).iter().map(|&x| x * s).collect();
        let (m, n) = (self.rows(a), self.cols(a));
        let ng = self.needs(a);
        self.push(m, n, out, Op::Scale(a, c), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        let mut out = vec![S::ZERO; m * n];
        transpose_into(self.value(a), &mut out, m, n);
        let ng = self.needs(a);
        self.push(n, m, out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if rows * cols != self.value(a).len() {
            return Err(Error::dim(format!(
                "reshape {} elements to {rows}x{cols}",
                self.value(a).len()
            )));
        }
        let out = self.value(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(rows, cols, out, Op::Reshape(a), ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = self.cols(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.cols(p) != n {
                return Err(Error::dim("concat_rows: column mismatch"));
            }
            rows += self.rows(p);
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(rows, n, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let m = self.rows(parts[0]);
        let mut cols = 0;
        for &p in parts {
            if self.rows(p) != m {
                return Err(Error::dim("concat_cols: row mismatch"));
            }
            cols += self.cols(p);
        }
        let mut out = vec![S::ZERO; m * cols];
        let mut c0 = 0;
        for &p in parts {
            let pc = self.cols(p);
            let pv = self.value(p);
            for r in 0..m {
                out[r * cols + c0..r * cols + c0 + pc].copy_from_slice(&pv[r * pc..(r + 1) * pc]);
            }
            c0 += pc;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(m, cols, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        let n = self.cols(a);
        debug_assert!(r0 <= r1 && r1 <= self.rows(a));
        let out = self.value(a)[r0 * n..r1 * n].to_vec();
        let ng = self.needs(a);
        self.push(r1 - r0, n, out, Op::SliceRows { a, r0 }, ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        debug_assert!(c0 <= c1 && c1 <= n);
        let w = c1 - c0;
        let av = self.value(a);
        let mut out = vec![S::ZERO; m * w];
        for r in 0..m {
            out[r * w..(r + 1) * w].copy_from_slice(&av[r * n + c0..r * n + c1]);
        }
        let ng = self.needs(a);
        self.push(m, w, out, Op::SliceCols { a, c0 }, ng)
    }

    /// Embedding-style row gather; indices may repeat (backward scatter-adds).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let n = self.cols(a);
        let rows = self.rows(a);
        let av = self.value(a);
        let mut out = vec![S::ZERO; idx.len() * n];
        for (r, &i) in idx.iter().enumerate() {
            debug_assert!(i < rows, "gather index {i} out of {rows} rows");
            out[r * n..(r + 1) * n].copy_from_slice(&av[i * n..(i + 1) * n]);
        }
        let ng = self.needs(a);
        let idx32 = idx.iter().map(|&i| i as u32).collect();
        self.push(idx.len(), n, out, Op::GatherRows { a, idx: idx32 }, ng)
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        let av = self.value(a);
        let mut out = vec![S::ZERO; m * n];
        for r in 0..m {
            let row = &av[r * n..(r + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.max(v);
            }
            let mut sum = S::ZERO;
            for (o, &v) in orow.iter_mut().zip(row.iter()) {
                let e = (v - mx).exp();
                *o = e;
                sum += e;
            }
            let inv = S::ONE / sum;
            for o in orow.iter_mut() {
                *o = *o * inv;
            }
        }
        let ng = self.needs(a);
        self.push(m, n, out, Op::SoftmaxRows(a), ng)
    }

    /// Natural log with input floored at `LOG_FLOOR`.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let floor = S::from_f64(LOG_FLOOR);
        let out: Vec<S> = self.value(a).iter().map(|&x| x.max(floor).ln()).collect();
        let (m, n) = (self.rows(a), self.cols(a));
        let ng = self.needs(a);
        self.push(m, n, out, Op::Log(a), ng)
    }

    /// Row layer norm: zero mean, unit variance (eps 1e-5 inside the sqrt),
    /// then per-column affine. Zero-variance rows map to `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = (self.rows(x), self.cols(x));
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::dim(format!(
                "layer_norm: gain/bias must have {n} elements"
            )));
        }
        let xv = self.value(x);
        let gv = self.value(gain).to_vec();
        let bv = self.value(bias).to_vec();
        let inv_n = S::from_f64(1.0 / n as f64);
        let eps = S::from_f64(LN_EPS);
        let mut out = vec![S::ZERO; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_n;
            let mut var = S::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_n;
            let inv_std = S::ONE / (var + eps).sqrt();
            let orow = &mut out[r * n..(r + 1) * n];
            for c in 0..n {
                orow[c] = (row[c] - mean) * inv_std * gv[c] + bv[c];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(m, n, out, Op::LayerNorm { x, gain, bias }, ng))
    }

    /// Gelu, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<S> = self.value(a).iter().map(|&x| gelu_val(x)).collect();
        let (m, n) = (self.rows(a), self.cols(a));
        let ng = self.needs(a);
        self.push(m, n, out, Op::Gelu(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut s = S::ZERO;
        for &v in self.value(a) {
            s += v;
        }
        let ng = self.needs(a);
        self.push(1, 1, vec![s], Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let mut s = S::ZERO;
        for &v in self.value(a) {
            s += v;
        }
        let ng = self.needs(a);
        let v = s * S::from_f64(1.0 / n as f64);
        self.push(1, 1, vec![v], Op::MeanAll(a), ng)
    }

    /// Mean over rows of -log softmax(row)[target]; fused for stability.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, n) = (self.rows(logits), self.cols(logits));
        if targets.len() != m {
            return Err(Error::dim(format!(
                "cross_entropy: {m} rows vs {} targets",
                targets.len()
            )));
        }
        let lv = self.value(logits);
        let mut total = S::ZERO;
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::contract(format!("target {t} out of {n} classes")));
            }
            let row = &lv[r * n..(r + 1) * n];
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.max(v);
            }
            let mut lse = S::ZERO;
            for &v in row.iter() {
                lse += (v - mx).exp();
            }
            total += lse.ln() + mx - row[t];
        }
        let v = total * S::from_f64(1.0 / m as f64);
        let ng = self.needs(logits);
        let t32 = targets.iter().map(|&t| t as u32).collect();
        Ok(self.push(
            1,
            1,
            vec![v],
            Op::CrossEntropy {
                logits,
                targets: t32,
            },
            ng,
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate in the exact
    /// reverse order ops were recorded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let node = &self.nodes[loss.idx()];
        if node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {}x{}",
                node.rows, node.cols
            )));
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n_nodes];
        grads[loss.idx()] = Some(vec![S::ONE]);

        for i in (0..n_nodes).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            // All inputs of node i have index < i, so the split is safe.
            let (lo, hi) = grads.split_at_mut(i);
            let gout = hi[0].as_ref().unwrap();
            self.backward_op(i, gout, lo);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_op(&self, i: usize, gout: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let ensure = |grads: &mut [Option<Vec<S>>], id: NodeId, len: usize| {
            if grads[id.idx()].is_none() {
                grads[id.idx()] = Some(vec![S::ZERO; len]);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.cols(*b);
                if self.needs(*a) {
                    // dA += dC * B^T, via materialized transpose for a
                    // contiguous inner loop.
                    let mut bt = vec![S::ZERO; k * n];
                    transpose_into(self.value(*b), &mut bt, k, n);
                    ensure(grads, *a, m * k);
                    matmul_acc(gout, &bt, grads[a.idx()].as_mut().unwrap(), m, n, k);
                }
                if self.needs(*b) {
                    // dB += A^T * dC
                    ensure(grads, *b, k * n);
                    matmul_at_b_acc(
                        self.value(*a),
                        gout,
                        grads[b.idx()].as_mut().unwrap(),
                        m,
                        k,
                        n,
                    );
                }
            }
            Op::Add { a, b, broadcast_b } => {
                if self.needs(*a) {
                    ensure(grads, *a, gout.len());
                    let ga = grads[a.idx()].as_mut().unwrap();
                    for (g, &d) in ga.iter_mut().zip(gout.iter()) {
                        *g += d;
                    }
                }
                if self.needs(*b) {
                    let bn = self.cols(*b);
                    ensure(grads, *b, self.value(*b).len());
                    let gb = grads[b.idx()].as_mut().unwrap();
                    if *broadcast_b {
                        for (c, chunk) in gout.chunks_exact(bn).enumerate() {
                            let _ = c;
                            for (g, &d) in gb.iter_mut().zip(chunk.iter()) {
                                *g += d;
                            }
                        }
                    } else {
                        for (g, &d) in gb.iter_mut().zip(gout.iter()) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    ensure(grads, *a, gout.len());
                    let ga = grads[a.idx()].as_mut().unwrap();
                    for ((g, &d), &bv) in ga.iter_mut().zip(gout.iter()).zip(self.value(*b)) {
                        *g = d.mul_add(bv, *g);
                    }
                }
                if self.needs(*b) {
                    ensure(grads, *b, gout.len());
                    let gb = grads[b.idx()].as_mut().unwrap();
                    for ((g, &d), &av) in gb.iter_mut().zip(gout.iter()).zip(self.value(*a)) {
                        *g = d.mul_add(av, *g);
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let s = S::from_f64(*c);
                    ensure(grads, *a, gout.len());
                    let ga = grads[a.idx()].as_mut().unwrap();
                    for (g, &d) in ga.iter_mut().zip(gout.iter()) {
                        *g = d.mul_add(s, *g);
                    }
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (m, n) = (self.rows(*a), self.cols(*a));
                    ensure(grads, *a, m * n);
                    let ga = grads[a.idx()].as_mut().unwrap();
                    // gout has shape n x m
                    for r in 0..n {
                        for c in 0..m {
                            ga[c * n + r] += gout[r * m + c];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    ensure(grads, *a, gout.len());
                    let ga = grads[a.idx()].as_mut().unwrap();
                    for (g, &d) in ga.iter_mut().zip(gout.iter()) {
                        *g += d;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let n = node.cols;
                let mut r0 = 0;
                for &p in parts {
                    let pr = self.rows(p);
                    if self.needs(p) {
                        ensure(grads, p, pr * n);
                        let gp = grads[p.idx()].as_mut().unwrap();
                        for (g, &d) in gp.iter_mut().zip(&gout[r0 * n..(r0 + pr) * n]) {
                            *g += d;
                        }
                    }
                    r0 += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.rows;
                let cols = node.cols;
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.cols(p);
                    if self.needs(p) {
                        ensure(grads, p, m * pc);
                        let gp = grads[p.idx()].as_mut().unwrap();
                        for r in 0..m {
                            for c in 0..pc {
                                gp[r * pc + c] += gout[r * cols + c0 + c];
                            }
                        }
                    }
                    c0 += pc;
                }
            }
            Op::SliceRows { a, r0 } => {
                if self.needs(*a) {
                    let n = node.cols;
                    ensure(grads, *a, self.value(*a).len());
                    let ga = grads[a.idx()].as_mut().unwrap();
                    for (g, &d) in ga[r0 * n..r0 * n + gout.len()].iter_mut().zip(gout.iter()) {
                        *g += d;
                    }
                }
            }
            Op::SliceCols { a, c0 } => {
                if self.needs(*a) {
                    let (m, n) = (self.rows(*a), self.cols(*a));
                    let w = node.cols;
                    ensure(grads, *a, m * n);
                    let ga = grads[a.idx()].as_mut().unwrap();
                    for r in 0..m {
                        for c in 0..w {
                            ga[r * n + c0 + c] += gout[r * w + c];
                        }
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if self.needs(*a) {
                    let n = node.cols;
                    ensure(grads, *a, self.value(*a).len());
                    let ga = grads[a.idx()].as_mut().unwrap();
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut ga[i as usize * n..(i as usize + 1) * n];
                        let src = &gout[r * n..(r + 1) * n];
                        for (g, &d) in dst.iter_mut().zip(src.iter()) {
                            *g += d;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let (m, n) = (node.rows, node.cols);
                    let y = &node.value;
                    ensure(grads, *a, m * n);
                    let ga = grads[a.idx()].as_mut().unwrap();
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let dr = &gout[r * n..(r + 1) * n];
                        let mut dot = S::ZERO;
                        for (&yv, &dv) in yr.iter().zip(dr.iter()) {
                            dot = yv.mul_add(dv, dot);
                        }
                        let gr = &mut ga[r * n..(r + 1) * n];
                        for c in 0..n {
                            gr[c] += yr[c] * (dr[c] - dot);
                        }
                    }
                }
            }
            Op::Log(a) => {
                if self.needs(*a) {
                    let floor = S::from_f64(LOG_FLOOR);
                    ensure(grads, *a, gout.len());
                    let ga = grads[a.idx()].as_mut().unwrap();
                    for ((g, &d), &x) in ga.iter_mut().zip(gout.iter()).zip(self.value(*a)) {
                        if x > floor {
                            *g += d / x;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (m, n) = (node.rows, node.cols);
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let inv_n = S::from_f64(1.0 / n as f64);
                let eps = S::from_f64(LN_EPS);
                for r in 0..m {
                    let row = &xv[r * n..(r + 1) * n];
                    let dr = &gout[r * n..(r + 1) * n];
                    let mut mean = S::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean = mean * inv_n;
                    let mut var = S::ZERO;
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var = var * inv_n;
                    let inv_std = S::ONE / (var + eps).sqrt();
                    if self.needs(*gain) {
                        ensure(grads, *gain, n);
                        let gg = grads[gain.idx()].as_mut().unwrap();
                        for c in 0..n {
                            gg[c] += dr[c] * (row[c] - mean) * inv_std;
                        }
                    }
                    if self.needs(*bias) {
                        ensure(grads, *bias, n);
                        let gb = grads[bias.idx()].as_mut().unwrap();
                        for c in 0..n {
                            gb[c] += dr[c];
                        }
                    }
                    if self.needs(*x) {
                        ensure(grads, *x, m * n);
                        // dg = dy .* gain; dx = inv_std*(dg - mean(dg) - xhat*mean(dg.*xhat))
                        let mut sum_dg = S::ZERO;
                        let mut sum_dg_xhat = S::ZERO;
                        for c in 0..n {
                            let dg = dr[c] * gv[c];
                            let xhat = (row[c] - mean) * inv_std;
                            sum_dg += dg;
                            sum_dg_xhat += dg * xhat;
                        }
                        let mean_dg = sum_dg * inv_n;
                        let mean_dg_xhat = sum_dg_xhat * inv_n;
                        let gx = grads[x.idx()].as_mut().unwrap();
                        let gxr = &mut gx[r * n..(r + 1) * n];
                        for c in 0..n {
                            let dg = dr[c] * gv[c];
                            let xhat = (row[c] - mean) * inv_std;
                            gxr[c] += inv_std * (dg - mean_dg - xhat * mean_dg_xhat);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    ensure(grads, *a, gout.len());
                    let ga = grads[a.idx()].as_mut().unwrap();
                    for ((g, &d), &x) in ga.iter_mut().zip(gout.iter()).zip(self.value(*a)) {
                        *g = d.mul_add(gelu_grad(x), *g);
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let d = gout[0];
                    ensure(grads, *a, self.value(*a).len());
                    let ga = grads[a.idx()].as_mut().unwrap();
                    for g in ga.iter_mut() {
                        *g += d;
                    }
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let len = self.value(*a).len();
                    let d = gout[0] * S::from_f64(1.0 / len as f64);
                    ensure(grads, *a, len);
                    let ga = grads[a.idx()].as_mut().unwrap();
                    for g in ga.iter_mut() {
                        *g += d;
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let (m, n) = (self.rows(*logits), self.cols(*logits));
                    let lv = self.value(*logits);
                    let scale = gout[0] * S::from_f64(1.0 / m as f64);
                    ensure(grads, *logits, m * n);
                    let gl = grads[logits.idx()].as_mut().unwrap();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &lv[r * n..(r + 1) * n];
                        let mut mx = row[0];
                        for &v in row.iter() {
                            mx = mx.max(v);
                        }
                        let mut sum = S::ZERO;
                        for &v in row.iter() {
                            sum += (v - mx).exp();
                        }
                        let inv = S::ONE / sum;
                        let gr = &mut gl[r * n..(r + 1) * n];
                        for c in 0..n {
                            let p = (row[c] - mx).exp() * inv;
                            gr[c] += scale * p;
                        }
                        gr[t as usize] = gr[t as usize] - scale;
                    }
                }
            }
        }
    }
}

#[inline]
fn gelu_val<S: Scalar>(x: S) -> S {
    // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = S::from_f64(0.797_884_560_802_865_4);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (S::ONE + inner.tanh())
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + three * k * x * x)
}

/// out += a * b, shapes (m,k) x (k,n).
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = aik.mul_add(bv, *o);
            }
        }
    }
}

/// out += a^T * b, a is (m,k), b is (m,n), out is (k,n).
pub fn matmul_at_b_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = aik.mul_add(bv, *o);
            }
        }
    }
}

pub fn transpose_into<S: Scalar>(a: &[S], out: &mut [S], m: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = a[r * n + c];
        }
    }
}
