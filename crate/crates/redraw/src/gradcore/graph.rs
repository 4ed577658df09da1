use crate::error::{Error, Result};
use crate::gradcore::array::Array;
use crate::gradcore::rng::RngStream;

/// Handle into a [`Graph`]'s node list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad(#[allow(dead_code)] NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, #[allow(dead_code)] f64),
    Matmul(NodeId, NodeId),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Silu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Ln(NodeId),
    SoftmaxRows(NodeId),
    KlRows(NodeId, NodeId),
    ClipFloorOne(NodeId),
    SampleOnehot(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumLastAxis(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    Reshape(NodeId),
}

struct Node {
    op: Op,
    value: Array,
    needs_grad: bool,
}

/// Wengert list. Nodes are appended in evaluation order, so walking the list
/// backwards is a valid reverse topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node adjoints from one backward pass. Nodes pruned by stop-gradient or
/// frozen leaves have no entry at all.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads[id.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Array, needs_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node { op, value, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    // ---- leaves ----------------------------------------------------------

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Result<NodeId> {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Array) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(Array::scalar(v))
    }

    /// Identity forward, blocks all gradient flow.
    pub fn stop_grad(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).clone();
        self.push(Op::StopGrad(x), value, false)
    }

    // ---- elementwise -----------------------------------------------------

    fn zip_same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(Vec<usize>, usize)> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", sa, sb),
            });
        }
        Ok((sa.to_vec(), self.value(a).numel()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, n) = self.zip_same_shape("add", a, b)?;
        let mut data = vec![0.0; n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..n {
            data[i] = da[i] + db[i];
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(Op::Add(a, b), Array::new(shape, data)?, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, n) = self.zip_same_shape("sub", a, b)?;
        let mut data = vec![0.0; n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..n {
            data[i] = da[i] - db[i];
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(Op::Sub(a, b), Array::new(shape, data)?, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, n) = self.zip_same_shape("mul", a, b)?;
        let mut data = vec![0.0; n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..n {
            data[i] = da[i] * db[i];
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(Op::Mul(a, b), Array::new(shape, data)?, ng)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x);
        let data: Vec<f64> = v.data().iter().map(|a| a * c).collect();
        let shape = v.shape().to_vec();
        let ng = self.needs_grad(x);
        self.push(Op::Scale(x, c), Array::new(shape, data)?, ng)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x);
        let data: Vec<f64> = v.data().iter().map(|a| a + c).collect();
        let shape = v.shape().to_vec();
        let ng = self.needs_grad(x);
        self.push(Op::AddScalar(x, c), Array::new(shape, data)?, ng)
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data: Vec<f64> = v.data().iter().map(|&a| a * sigmoid(a)).collect();
        let shape = v.shape().to_vec();
        let ng = self.needs_grad(x);
        self.push(Op::Silu(x), Array::new(shape, data)?, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data: Vec<f64> = v.data().iter().map(|&a| sigmoid(a)).collect();
        let shape = v.shape().to_vec();
        let ng = self.needs_grad(x);
        self.push(Op::Sigmoid(x), Array::new(shape, data)?, ng)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data: Vec<f64> = v.data().iter().map(|&a| softplus(a)).collect();
        let shape = v.shape().to_vec();
        let ng = self.needs_grad(x);
        self.push(Op::Softplus(x), Array::new(shape, data)?, ng)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data: Vec<f64> = v.data().iter().map(|a| a.ln()).collect();
        let shape = v.shape().to_vec();
        let ng = self.needs_grad(x);
        self.push(Op::Ln(x), Array::new(shape, data)?, ng)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", va.shape(), vb.shape()),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        mm(va.data(), vb.data(), m, k, n, &mut out);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(Op::Matmul(a, b), Array::new(vec![m, n], out)?, ng)
    }

    /// x[r,i] @ w[i,o] + b[o] broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let ok = vx.shape().len() == 2
            && vw.shape().len() == 2
            && vb.shape().len() == 1
            && vx.shape()[1] == vw.shape()[0]
            && vw.shape()[1] == vb.shape()[0];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "affine",
                detail: format!("{:?} x {:?} + {:?}", vx.shape(), vw.shape(), vb.shape()),
            });
        }
        let (r, i, o) = (vx.shape()[0], vx.shape()[1], vw.shape()[1]);
        let mut out = vec![0.0; r * o];
        for row in 0..r {
            out[row * o..(row + 1) * o].copy_from_slice(vb.data());
        }
        mm(vx.data(), vw.data(), r, i, o, &mut out);
        let ng = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        self.push(Op::Affine { x, w, b }, Array::new(vec![r, o], out)?, ng)
    }

    // ---- distributions ----------------------------------------------------

    /// Row-wise softmax over the last axis of a rank-2 array.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows",
                detail: format!("{:?}", v.shape()),
            });
        }
        let (r, n) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; r * n];
        for row in 0..r {
            let src = &v.data()[row * n..(row + 1) * n];
            let dst = &mut out[row * n..(row + 1) * n];
            softmax_row(src, dst);
        }
        let ng = self.needs_grad(x);
        self.push(Op::SoftmaxRows(x), Array::new(vec![r, n], out)?, ng)
    }

    /// Row-wise KL(p || q) in nats; output shape [rows]. Terms with p = 0
    /// contribute nothing (0 ln 0 = 0) and get zero gradient.
    pub fn kl_rows(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let (shape, _) = self.zip_same_shape("kl_rows", p, q)?;
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "kl_rows",
                detail: format!("{:?}", shape),
            });
        }
        let (r, n) = (shape[0], shape[1]);
        let (vp, vq) = (self.value(p).data(), self.value(q).data());
        let mut out = vec![0.0; r];
        for row in 0..r {
            let mut acc = 0.0;
            for i in row * n..(row + 1) * n {
                let (pi, qi) = (vp[i], vq[i]);
                if pi < 0.0 {
                    return Err(Error::BadDistribution {
                        op: "kl_rows",
                        detail: format!("negative probability {pi}"),
                    });
                }
                if pi > 0.0 {
                    if qi <= 0.0 {
                        return Err(Error::BadDistribution {
                            op: "kl_rows",
                            detail: format!("support violation: p={pi}, q={qi}"),
                        });
                    }
                    acc += pi * (pi / qi).ln();
                }
            }
            out[row] = acc;
        }
        let ng = self.needs_grad(p) || self.needs_grad(q);
        self.push(Op::KlRows(p, q), Array::new(vec![r], out)?, ng)
    }

    /// max(x, 1) elementwise. Gradient passes where x >= 1 and is zero below
    /// the floor.
    pub fn clip_floor_one(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data: Vec<f64> = v.data().iter().map(|a| a.max(1.0)).collect();
        let shape = v.shape().to_vec();
        let ng = self.needs_grad(x);
        self.push(Op::ClipFloorOne(x), Array::new(shape, data)?, ng)
    }

    /// One sample per row of a [rows, classes] probability array, returned as
    /// one-hot rows. Straight-through: backward treats this as identity.
    pub fn sample_onehot_st(&mut self, probs: NodeId, rng: &mut RngStream) -> Result<NodeId> {
        let v = self.value(probs);
        if v.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "sample_onehot_st",
                detail: format!("{:?}", v.shape()),
            });
        }
        let (r, n) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; r * n];
        for row in 0..r {
            let p = &v.data()[row * n..(row + 1) * n];
            validate_prob_row("sample_onehot_st", p)?;
            let k = rng.categorical(p);
            out[row * n + k] = 1.0;
        }
        let ng = self.needs_grad(probs);
        self.push(Op::SampleOnehot(probs), Array::new(vec![r, n], out)?, ng)
    }

    // ---- reductions / layout ----------------------------------------------

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().sum();
        let ng = self.needs_grad(x);
        self.push(Op::Sum(x), Array::scalar(total), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let total: f64 = v.data().iter().sum();
        let n = v.numel() as f64;
        let ng = self.needs_grad(x);
        self.push(Op::Mean(x), Array::scalar(total / n), ng)
    }

    /// [r, n] -> [r], summing the last axis.
    pub fn sum_last_axis(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "sum_last_axis",
                detail: format!("{:?}", v.shape()),
            });
        }
        let (r, n) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; r];
        for row in 0..r {
            out[row] = v.data()[row * n..(row + 1) * n].iter().sum();
        }
        let ng = self.needs_grad(x);
        self.push(Op::SumLastAxis(x), Array::new(vec![r], out)?, ng)
    }

    /// Column-wise concatenation of rank-2 arrays with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).shape()[0];
        let mut total_cols = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("{:?} with {} rows expected", s, r),
                });
            }
            total_cols += s[1];
        }
        let mut out = vec![0.0; r * total_cols];
        let mut col0 = 0;
        for &p in parts {
            let v = self.value(p);
            let n = v.shape()[1];
            for row in 0..r {
                out[row * total_cols + col0..row * total_cols + col0 + n]
                    .copy_from_slice(&v.data()[row * n..(row + 1) * n]);
            }
            col0 += n;
        }
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Array::new(vec![r, total_cols], out)?,
            ng,
        )
    }

    /// Row-wise concatenation of rank-2 arrays with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).shape()[1];
        let mut total_rows = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[1] != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("{:?} with {} cols expected", s, n),
                });
            }
            total_rows += s[0];
        }
        let mut out = Vec::with_capacity(total_rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Array::new(vec![total_rows, n], out)?,
            ng,
        )
    }

    /// Contiguous row range [start, start+len) of a rank-2 array.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape().len() != 2 || start + len > v.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {}..{} of {:?}", start, start + len, v.shape()),
            });
        }
        let n = v.shape()[1];
        let data = v.data()[start * n..(start + len) * n].to_vec();
        let ng = self.needs_grad(x);
        self.push(Op::SliceRows { x, start }, Array::new(vec![len, n], data)?, ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", v.shape(), shape),
            });
        }
        let data = v.data().to_vec();
        let ng = self.needs_grad(x);
        self.push(Op::Reshape(x), Array::new(shape, data)?, ng)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Returns adjoints for every node that
    /// participates in gradient flow; stop-gradient boundaries and frozen
    /// leaves are never visited.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        if !self.needs_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Array::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.accumulate_parents(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(&self, idx: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[idx];
        let mut acc = |id: NodeId, contrib: Array| {
            if !self.needs_grad(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => {
                    let dst = existing.data_mut();
                    for (d, s) in dst.iter_mut().zip(contrib.data()) {
                        *d += s;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                acc(*b, Array::new(g.shape().to_vec(), neg).unwrap());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = g.data().iter().zip(vb.data()).map(|(g, b)| g * b).collect();
                let db: Vec<f64> = g.data().iter().zip(va.data()).map(|(g, a)| g * a).collect();
                acc(*a, Array::new(g.shape().to_vec(), da).unwrap());
                acc(*b, Array::new(g.shape().to_vec(), db).unwrap());
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.data().iter().map(|v| v * c).collect();
                acc(*x, Array::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::AddScalar(x, _) => acc(*x, g.clone()),
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.needs_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    mm_nt(g.data(), vb.data(), m, n, k, &mut da);
                    acc(*a, Array::new(vec![m, k], da).unwrap());
                }
                if self.needs_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    mm_tn(va.data(), g.data(), m, k, n, &mut db);
                    acc(*b, Array::new(vec![k, n], db).unwrap());
                }
            }
            Op::Affine { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (r, i) = (vx.shape()[0], vx.shape()[1]);
                let o = vw.shape()[1];
                if self.needs_grad(*x) {
                    let mut dx = vec![0.0; r * i];
                    mm_nt(g.data(), vw.data(), r, o, i, &mut dx);
                    acc(*x, Array::new(vec![r, i], dx).unwrap());
                }
                if self.needs_grad(*w) {
                    let mut dw = vec![0.0; i * o];
                    mm_tn(vx.data(), g.data(), r, i, o, &mut dw);
                    acc(*w, Array::new(vec![i, o], dw).unwrap());
                }
                if self.needs_grad(*b) {
                    let mut db = vec![0.0; o];
                    for row in 0..r {
                        for c in 0..o {
                            db[c] += g.data()[row * o + c];
                        }
                    }
                    acc(*b, Array::new(vec![o], db).unwrap());
                }
            }
            Op::Silu(x) => {
                let vx = self.value(*x);
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(g, &a)| {
                        let s = sigmoid(a);
                        g * s * (1.0 + a * (1.0 - s))
                    })
                    .collect();
                acc(*x, Array::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::Sigmoid(x) => {
                let vy = self.value(NodeId(idx));
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(vy.data())
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                acc(*x, Array::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::Softplus(x) => {
                let vx = self.value(*x);
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(g, &a)| g * sigmoid(a))
                    .collect();
                acc(*x, Array::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::Ln(x) => {
                let vx = self.value(*x);
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(g, &a)| g / a)
                    .collect();
                acc(*x, Array::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::SoftmaxRows(x) => {
                let vy = self.value(NodeId(idx));
                let (r, n) = (vy.shape()[0], vy.shape()[1]);
                let mut dx = vec![0.0; r * n];
                for row in 0..r {
                    let s = &vy.data()[row * n..(row + 1) * n];
                    let gr = &g.data()[row * n..(row + 1) * n];
                    let dot: f64 = s.iter().zip(gr).map(|(s, g)| s * g).sum();
                    for i in 0..n {
                        dx[row * n + i] = s[i] * (gr[i] - dot);
                    }
                }
                acc(*x, Array::new(vec![r, n], dx).unwrap());
            }
            Op::KlRows(p, q) => {
                let (vp, vq) = (self.value(*p), self.value(*q));
                let (r, n) = (vp.shape()[0], vp.shape()[1]);
                if self.needs_grad(*p) {
                    let mut dp = vec![0.0; r * n];
                    for row in 0..r {
                        let gr = g.data()[row];
                        for i in row * n..(row + 1) * n {
                            if vp.data()[i] > 0.0 {
                                dp[i] = gr * ((vp.data()[i] / vq.data()[i]).ln() + 1.0);
                            }
                        }
                    }
                    acc(*p, Array::new(vec![r, n], dp).unwrap());
                }
                if self.needs_grad(*q) {
                    let mut dq = vec![0.0; r * n];
                    for row in 0..r {
                        let gr = g.data()[row];
                        for i in row * n..(row + 1) * n {
                            if vp.data()[i] > 0.0 {
                                dq[i] = -gr * vp.data()[i] / vq.data()[i];
                            }
                        }
                    }
                    acc(*q, Array::new(vec![r, n], dq).unwrap());
                }
            }
            Op::ClipFloorOne(x) => {
                let vx = self.value(*x);
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(g, &a)| if a >= 1.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, Array::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::SampleOnehot(p) => {
                // Straight-through: identity Jacobian.
                acc(*p, g.clone());
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                acc(*x, Array::full(vx.shape().to_vec(), g.item()));
            }
            Op::Mean(x) => {
                let vx = self.value(*x);
                acc(*x, Array::full(vx.shape().to_vec(), g.item() / vx.numel() as f64));
            }
            Op::SumLastAxis(x) => {
                let vx = self.value(*x);
                let (r, n) = (vx.shape()[0], vx.shape()[1]);
                let mut dx = vec![0.0; r * n];
                for row in 0..r {
                    let gr = g.data()[row];
                    for i in row * n..(row + 1) * n {
                        dx[i] = gr;
                    }
                }
                acc(*x, Array::new(vec![r, n], dx).unwrap());
            }
            Op::ConcatCols(parts) => {
                let r = g.shape()[0];
                let total = g.shape()[1];
                let mut col0 = 0;
                for &p in parts {
                    let n = self.value(p).shape()[1];
                    if self.needs_grad(p) {
                        let mut dp = vec![0.0; r * n];
                        for row in 0..r {
                            dp[row * n..(row + 1) * n].copy_from_slice(
                                &g.data()[row * total + col0..row * total + col0 + n],
                            );
                        }
                        acc(p, Array::new(vec![r, n], dp).unwrap());
                    }
                    col0 += n;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.shape()[1];
                let mut row0 = 0;
                for &p in parts {
                    let r = self.value(p).shape()[0];
                    if self.needs_grad(p) {
                        let dp = g.data()[row0 * n..(row0 + r) * n].to_vec();
                        acc(p, Array::new(vec![r, n], dp).unwrap());
                    }
                    row0 += r;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let (rows, n) = (vx.shape()[0], vx.shape()[1]);
                let len = g.shape()[0];
                let mut dx = vec![0.0; rows * n];
                dx[start * n..(start + len) * n].copy_from_slice(g.data());
                acc(*x, Array::new(vec![rows, n], dx).unwrap());
            }
            Op::Reshape(x) => {
                let vx = self.value(*x);
                acc(*x, Array::new(vx.shape().to_vec(), g.data().to_vec()).unwrap());
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::StopGrad(_) => "stop_grad",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Matmul(..) => "matmul",
        Op::Affine { .. } => "affine",
        Op::Silu(_) => "silu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Softplus(_) => "softplus",
        Op::Ln(_) => "ln",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::KlRows(..) => "kl_rows",
        Op::ClipFloorOne(_) => "clip_floor_one",
        Op::SampleOnehot(_) => "sample_onehot_st",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::SumLastAxis(_) => "sum_last_axis",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::Reshape(_) => "reshape",
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = (s - m).exp();
        *d = e;
        total += e;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

fn validate_prob_row(op: &'static str, p: &[f64]) -> Result<()> {
    let mut total = 0.0;
    for &v in p {
        if v < 0.0 {
            return Err(Error::BadDistribution {
                op,
                detail: format!("negative probability {v}"),
            });
        }
        total += v;
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::BadDistribution {
            op,
            detail: format!("row sums to {total}"),
        });
    }
    Ok(())
}

// a[m,k] @ b[k,n] accumulated into out[m,n].
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// a[m,n] @ b[k,n]^T accumulated into out[m,k].
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut dot = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                dot += av * bv;
            }
            orow[p] += dot;
        }
    }
}

// a[m,k]^T @ b[m,n] accumulated into out[k,n].
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for row in 0..m {
        let arow = &a[row * k..(row + 1) * k];
        let brow = &b[row * n..(row + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::rng::{RngStream, StreamId};

    #[test]
    fn matmul_known_product() {
        let mut g = Graph::new();
        let a = g
            .constant(Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let b = g
            .constant(Array::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap())
            .unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn softmax_rows_normalize_and_shift_invariance() {
        let mut g = Graph::new();
        let x = g
            .constant(Array::new(vec![2, 3], vec![0.0, 0.0, 0.0, 100.0, 101.0, 102.0]).unwrap())
            .unwrap();
        let s = g.softmax_rows(x).unwrap();
        let v = g.value(s).data();
        for row in 0..2 {
            let total: f64 = v[row * 3..(row + 1) * 3].iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let third = 1.0 / 3.0;
        for i in 0..3 {
            assert!((v[i] - third).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_rows_closed_form() {
        // KL([1,0] || [0.5,0.5]) = ln 2; KL(p || p) = 0.
        let mut g = Graph::new();
        let p = g
            .constant(Array::new(vec![2, 2], vec![1.0, 0.0, 0.25, 0.75]).unwrap())
            .unwrap();
        let q = g
            .constant(Array::new(vec![2, 2], vec![0.5, 0.5, 0.25, 0.75]).unwrap())
            .unwrap();
        let kl = g.kl_rows(p, q).unwrap();
        let v = g.value(kl).data();
        assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
    }

    #[test]
    fn kl_rows_rejects_support_violation() {
        let mut g = Graph::new();
        let p = g
            .constant(Array::new(vec![1, 2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        let q = g
            .constant(Array::new(vec![1, 2], vec![0.0, 1.0]).unwrap())
            .unwrap();
        assert!(g.kl_rows(p, q).is_err());
    }

    #[test]
    fn stop_grad_prunes_backward() {
        let mut g = Graph::new();
        let x = g.leaf(Array::scalar(3.0), true).unwrap();
        let sg = g.stop_grad(x).unwrap();
        let y = g.mul(sg, sg).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn straight_through_sample_is_onehot_and_identity_backward() {
        let mut g = Graph::new();
        let mut rng = RngStream::new(0, StreamId::Scratch);
        let p = g.leaf(Array::new(vec![4, 3], vec![1.0 / 3.0; 12]).unwrap(), true).unwrap();
        let z = g.sample_onehot_st(p, &mut rng).unwrap();
        for row in 0..4 {
            let r = &g.value(z).data()[row * 3..(row + 1) * 3];
            assert_eq!(r.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(r.iter().filter(|&&v| v == 0.0).count(), 2);
        }
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 12]);
    }

    #[test]
    fn clip_floor_gradient_mask() {
        let mut g = Graph::new();
        let x = g.leaf(Array::new(vec![3], vec![0.5, 1.0, 2.0]).unwrap(), true).unwrap();
        let y = g.clip_floor_one(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Array::new(vec![1], vec![0.0]).unwrap()).unwrap();
        assert!(matches!(g.ln(x), Err(Error::NonFinite { .. })));
    }
}
