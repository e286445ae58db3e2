//! Eager tape with reverse-mode differentiation.
//!
//! Every builder method validates shapes, runs the forward kernel
//! immediately and records the op on a tape. [`Graph::backward`] walks the
//! tape in reverse, accumulating gradients into per-node buffers;
//! [`Graph::grads_into`] then folds the parameter gradients back into a
//! [`ParamSet`]. A graph is built per training step and dropped afterwards.
//!
//! Ops are tensor-level (a matmul is one node), so tape overhead stays
//! negligible next to the kernel work.

use crate::error::{Error, Result};
use crate::kernels as k;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use indexmap::IndexMap;
use std::sync::Arc;

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    /// out = a · b
    Matmul { a: NodeId, b: NodeId },
    /// out = a · bᵀ
    MatmulNT { a: NodeId, b: NodeId },
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
        oh: usize,
        ow: usize,
    },
    Reshape { x: NodeId },
    /// Row selection: out row r = x row idx[r].
    GatherRows { x: NodeId, idx: Arc<Vec<usize>> },
    /// out[r, 0] = x[r, idx[r]]
    PickPerRow { x: NodeId, idx: Arc<Vec<usize>> },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { x: NodeId, start: usize, len: usize },
    Add { a: NodeId, b: NodeId },
    AddN { xs: Vec<NodeId> },
    /// Row broadcast: out[r, c] = x[r, c] + b[c]
    AddBias { x: NodeId, b: NodeId },
    /// Channel broadcast over a rank-4 value.
    AddChanBias { x: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Column broadcast: out[r, c] = x[r, c] * col[r]
    MulCol { x: NodeId, col: NodeId },
    /// out = mul * x + add, element-wise; only the slope matters to backward
    Affine { x: NodeId, mul: f64 },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    SoftmaxRows { x: NodeId },
    LogSoftmaxRows { x: NodeId },
    SumAll { x: NodeId },
}

#[derive(Debug)]
struct Node<P: Scalar> {
    op: Op,
    shape: Vec<usize>,
    value: Arc<Vec<P>>,
    needs_grad: bool,
}

/// The tape. See the module docs for the lifecycle.
pub struct Graph<P: Scalar> {
    nodes: Vec<Node<P>>,
    bound: IndexMap<String, NodeId>,
    grads: Vec<Option<Vec<P>>>,
}

impl<P: Scalar> Default for Graph<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: Scalar> Graph<P> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: IndexMap::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<P>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value: Arc::new(value),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &[P] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// The single element of a `[1]`-shaped node.
    pub fn scalar_value(&self, id: NodeId) -> P {
        assert_eq!(self.nodes[id.0].value.len(), 1, "not a scalar node");
        self.nodes[id.0].value[0]
    }

    /// Snapshot of a node's value as a tensor (shares the buffer).
    pub fn tensor(&self, id: NodeId) -> Tensor<P> {
        Tensor::from_shared(
            self.nodes[id.0].shape.clone(),
            Arc::clone(&self.nodes[id.0].value),
        )
    }

    /// Gradient buffer of a node after [`Graph::backward`], if it received one.
    pub fn grad(&self, id: NodeId) -> Option<&[P]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Smallest |x| currently feeding any ReLU in the graph; infinity
    /// when none is present. Finite-difference harnesses use this to
    /// reject configurations where a probe could straddle the hinge,
    /// where the one-sided derivative makes the comparison meaningless.
    pub fn relu_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu { x } = &node.op {
                for &v in self.nodes[x.0].value.iter() {
                    margin = margin.min(v.to_f64().abs());
                }
            }
        }
        margin
    }

    /// Constant input; shares the tensor's buffer, never receives gradients.
    pub fn leaf(&mut self, t: &Tensor<P>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: t.data_arc(),
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input from a flat buffer.
    pub fn leaf_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<P>) -> Result<NodeId> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Binds a named parameter. Repeated binds of the same name return the
    /// same node, so a parameter used twice (e.g. a shared embedding table)
    /// accumulates one combined gradient.
    ///
    /// Panics if the name is missing: callers validate the set layout
    /// before building graphs.
    pub fn param(&mut self, params: &ParamSet<P>, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let t = params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not in set"));
        self.nodes.push(Node {
            op: Op::Param,
            shape: t.shape().to_vec(),
            value: t.data_arc(),
            needs_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.bound.insert(name.to_string(), id);
        id
    }

    fn rank2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op,
                shape: s.clone(),
                detail: "expected rank 2".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    /// out = a (m x k) · b (k x n)
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.rank2("matmul", a)?;
        let (kb, n) = self.rank2("matmul", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![P::zero(); m * n];
        k::matmul(m, ka, n, self.value(a), self.value(b), &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], out, ng))
    }

    /// out = a (m x k) · bᵀ, with b stored (n x k)
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.rank2("matmul_nt", a)?;
        let (n, kb) = self.rank2("matmul_nt", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![P::zero(); m * n];
        k::matmul_nt(m, ka, n, self.value(a), self.value(b), &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulNT { a, b }, vec![m, n], out, ng))
    }

    /// 2-D convolution: x is `[b, c, h, w]`, kernel `[o, c, kh, kw]`,
    /// output `[b, o, oh, ow]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        let ks = self.nodes[kernel.0].shape.clone();
        if xs.len() != 4 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: xs,
                detail: "input must be rank 4".into(),
            });
        }
        if ks.len() != 4 || ks[1] != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ks[0], ks[2], ks[3]);
        let (oh, ow) = match (
            k::conv_out_dim(h, kh, stride, padding),
            k::conv_out_dim(w, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    shape: xs,
                    detail: format!("kernel {kh}x{kw} stride {stride} padding {padding} does not fit"),
                })
            }
        };
        let pn = oh * ow;
        let q = c * kh * kw;
        let mut cols = vec![P::zero(); pn * q];
        let mut out = vec![P::zero(); b * o * pn];
        let xv = Arc::clone(&self.nodes[x.0].value);
        let kv = Arc::clone(&self.nodes[kernel.0].value);
        for s in 0..b {
            k::im2col(
                &xv[s * c * h * w..(s + 1) * c * h * w],
                c, h, w, kh, kw, stride, padding, oh, ow,
                &mut cols,
            );
            k::matmul_nt(o, q, pn, &kv, &cols, &mut out[s * o * pn..(s + 1) * o * pn]);
        }
        let ng = self.needs(x) || self.needs(kernel);
        Ok(self.push(
            Op::Conv2d { x, kernel, stride, padding, oh, ow },
            vec![b, o, oh, ow],
            out,
            ng,
        ))
    }

    /// Same buffer under a new shape.
    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.len() {
            return Err(Error::DataLength {
                shape,
                len: self.nodes[x.0].value.len(),
            });
        }
        let value = self.nodes[x.0].value.to_vec();
        let ng = self.needs(x);
        Ok(self.push(Op::Reshape { x }, shape, value, ng))
    }

    /// Selects rows: out row r = x row idx[r]. Rows may repeat.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.rank2("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: vec![rows, cols],
                detail: format!("row index {bad} out of range"),
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Op::GatherRows { x, idx: Arc::new(idx.to_vec()) },
            vec![idx.len(), cols],
            out,
            ng,
        ))
    }

    /// out[r, 0] = x[r, idx[r]]; one pick per row.
    pub fn pick_per_row(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.rank2("pick_per_row", x)?;
        if idx.len() != rows {
            return Err(Error::Misaligned {
                what: "pick_per_row indices",
                lhs: idx.len(),
                rhs: rows,
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::InvalidShape {
                op: "pick_per_row",
                shape: vec![rows, cols],
                detail: format!("column index {bad} out of range"),
            });
        }
        let xv = &self.nodes[x.0].value;
        let out: Vec<P> = idx.iter().enumerate().map(|(r, &c)| xv[r * cols + c]).collect();
        let ng = self.needs(x);
        Ok(self.push(
            Op::PickPerRow { x, idx: Arc::new(idx.to_vec()) },
            vec![rows, 1],
            out,
            ng,
        ))
    }

    /// Joins two matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.rank2("concat_cols", a)?;
        let (rb, cb) = self.rank2("concat_cols", b)?;
        if ra != rb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatCols { a, b }, vec![ra, ca + cb], out, ng))
    }

    /// Contiguous column range `[start, start + len)`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.rank2("slice_cols", x)?;
        if start + len > cols || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                shape: vec![rows, cols],
                detail: format!("slice [{start}, {})", start + len),
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, len }, vec![rows, len], out, ng))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, shape, out, ng))
    }

    /// Sum of any number of same-shaped nodes.
    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            return Err(Error::EmptyInput("add_n"));
        };
        for &x in &xs[1..] {
            self.same_shape("add_n", first, x)?;
        }
        let mut out = self.nodes[first.0].value.to_vec();
        for &x in &xs[1..] {
            for (o, &v) in out.iter_mut().zip(self.nodes[x.0].value.iter()) {
                *o = *o + v;
            }
        }
        let shape = self.nodes[first.0].shape.clone();
        let ng = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Op::AddN { xs: xs.to_vec() }, shape, out, ng))
    }

    /// Adds a length-c bias to every row of a (r x c) matrix.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rank2("add_bias", x)?;
        let bs = &self.nodes[b.0].shape;
        if bs.as_slice() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: vec![rows, cols],
                rhs: bs.clone(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(xv[r * cols + c] + bv[c]);
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddBias { x, b }, vec![rows, cols], out, ng))
    }

    /// Adds a per-channel bias to a `[b, c, h, w]` value.
    pub fn add_chan_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(Error::InvalidShape {
                op: "add_chan_bias",
                shape: xs,
                detail: "input must be rank 4".into(),
            });
        }
        let bs = &self.nodes[b.0].shape;
        if bs.as_slice() != [xs[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_chan_bias",
                lhs: xs,
                rhs: bs.clone(),
            });
        }
        let (bn, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(xv.len());
        for s in 0..bn {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in 0..hw {
                    out.push(xv[base + i] + bv[ch]);
                }
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddChanBias { x, b }, xs, out, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, shape, out, ng))
    }

    /// Scales row r of x by col[r]; col is (r x 1).
    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rank2("mul_col", x)?;
        let cs = &self.nodes[col.0].shape;
        if cs.as_slice() != [rows, 1] {
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                lhs: vec![rows, cols],
                rhs: cs.clone(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let cv = &self.nodes[col.0].value;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(xv[r * cols + c] * cv[r]);
            }
        }
        let ng = self.needs(x) || self.needs(col);
        Ok(self.push(Op::MulCol { x, col }, vec![rows, cols], out, ng))
    }

    /// out = mul * x + add, element-wise with constant coefficients.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let (m, a) = (P::from_f64(mul), P::from_f64(add));
        let out = self.nodes[x.0].value.iter().map(|&v| m * v + a).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(Op::Affine { x, mul }, shape, out, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.iter().map(|&v| k::sigmoid(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(Op::Sigmoid { x }, shape, out, ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.iter().map(|&v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(Op::Tanh { x }, shape, out, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| if v > P::zero() { v } else { P::zero() })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(Op::Relu { x }, shape, out, ng)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rank2("softmax_rows", x)?;
        let mut out = vec![P::zero(); rows * cols];
        k::softmax_rows(rows, cols, &self.nodes[x.0].value, &mut out);
        let ng = self.needs(x);
        Ok(self.push(Op::SoftmaxRows { x }, vec![rows, cols], out, ng))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rank2("log_softmax_rows", x)?;
        let mut out = vec![P::zero(); rows * cols];
        k::log_softmax_rows(rows, cols, &self.nodes[x.0].value, &mut out);
        let ng = self.needs(x);
        Ok(self.push(Op::LogSoftmaxRows { x }, vec![rows, cols], out, ng))
    }

    /// Reduces a node of any shape to `[1]`.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: P = self.nodes[x.0].value.iter().copied().sum();
        let ng = self.needs(x);
        self.push(Op::SumAll { x }, vec![1], vec![s], ng)
    }

    /// Runs reverse accumulation from a scalar loss node, seeding its
    /// gradient with one. Call once per graph; a second call restarts
    /// from scratch.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.nodes[root.0].shape.clone(),
                detail: "loss must be scalar".into(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![P::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                self.grads[i] = None;
                continue;
            }
            let Some(gout) = std::mem::take(&mut self.grads[i]) else {
                continue;
            };
            self.accumulate_inputs(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<P> {
        let n = self.nodes[id.0].value.len();
        self.grads[id.0].get_or_insert_with(|| vec![P::zero(); n])
    }

    fn accumulate_inputs(&mut self, i: usize, gout: &[P]) {
        match self.nodes[i].op.clone() {
            Op::Leaf | Op::Param => {}
            Op::Matmul { a, b } => {
                let (m, kk) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = Arc::clone(&self.nodes[a.0].value);
                let bv = Arc::clone(&self.nodes[b.0].value);
                if self.needs(a) {
                    // dA += dC · Bᵀ
                    k::matmul_nt_acc(m, n, kk, gout, &bv, self.grad_buf(a));
                }
                if self.needs(b) {
                    // dB += Aᵀ · dC
                    k::matmul_tn_acc(m, kk, n, &av, gout, self.grad_buf(b));
                }
            }
            Op::MatmulNT { a, b } => {
                let (m, kk) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                let av = Arc::clone(&self.nodes[a.0].value);
                let bv = Arc::clone(&self.nodes[b.0].value);
                if self.needs(a) {
                    // dA += dC · B
                    k::matmul_acc(m, n, kk, gout, &bv, self.grad_buf(a));
                }
                if self.needs(b) {
                    // dB += dCᵀ · A
                    k::matmul_tn_acc(m, n, kk, gout, &av, self.grad_buf(b));
                }
            }
            Op::Conv2d { x, kernel, stride, padding, oh, ow } => {
                let xs = self.nodes[x.0].shape.clone();
                let ks = self.nodes[kernel.0].shape.clone();
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ks[0], ks[2], ks[3]);
                let pn = oh * ow;
                let q = c * kh * kw;
                let xv = Arc::clone(&self.nodes[x.0].value);
                let kv = Arc::clone(&self.nodes[kernel.0].value);
                let mut cols = vec![P::zero(); pn * q];
                let mut dcols = vec![P::zero(); pn * q];
                let (need_x, need_k) = (self.needs(x), self.needs(kernel));
                let mut dk = if need_k { vec![P::zero(); o * q] } else { Vec::new() };
                let mut dx = if need_x { vec![P::zero(); b * c * h * w] } else { Vec::new() };
                for s in 0..b {
                    let gs = &gout[s * o * pn..(s + 1) * o * pn];
                    if need_k {
                        // im2col is recomputed here instead of cached from the
                        // forward pass; it is cheap next to the matmuls.
                        k::im2col(
                            &xv[s * c * h * w..(s + 1) * c * h * w],
                            c, h, w, kh, kw, stride, padding, oh, ow,
                            &mut cols,
                        );
                        k::matmul_acc(o, pn, q, gs, &cols, &mut dk);
                    }
                    if need_x {
                        dcols.iter_mut().for_each(|v| *v = P::zero());
                        k::matmul_tn_acc(o, pn, q, gs, &kv, &mut dcols);
                        k::col2im_acc(
                            &dcols,
                            c, h, w, kh, kw, stride, padding, oh, ow,
                            &mut dx[s * c * h * w..(s + 1) * c * h * w],
                        );
                    }
                }
                if need_k {
                    for (g, d) in self.grad_buf(kernel).iter_mut().zip(&dk) {
                        *g = *g + *d;
                    }
                }
                if need_x {
                    for (g, d) in self.grad_buf(x).iter_mut().zip(&dx) {
                        *g = *g + *d;
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(x) {
                    for (g, &d) in self.grad_buf(x).iter_mut().zip(gout) {
                        *g = *g + d;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.needs(x) {
                    let cols = self.nodes[x.0].shape[1];
                    let gx = self.grad_buf(x);
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gx[src * cols + c] = gx[src * cols + c] + gout[r * cols + c];
                        }
                    }
                }
            }
            Op::PickPerRow { x, idx } => {
                if self.needs(x) {
                    let cols = self.nodes[x.0].shape[1];
                    let gx = self.grad_buf(x);
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * cols + c] = gx[r * cols + c] + gout[r];
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let ca = self.nodes[a.0].shape[1];
                let cb = self.nodes[b.0].shape[1];
                let rows = self.nodes[a.0].shape[0];
                if self.needs(a) {
                    let ga = self.grad_buf(a);
                    for r in 0..rows {
                        for c in 0..ca {
                            ga[r * ca + c] = ga[r * ca + c] + gout[r * (ca + cb) + c];
                        }
                    }
                }
                if self.needs(b) {
                    let gb = self.grad_buf(b);
                    for r in 0..rows {
                        for c in 0..cb {
                            gb[r * cb + c] = gb[r * cb + c] + gout[r * (ca + cb) + ca + c];
                        }
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(x) {
                    let cols = self.nodes[x.0].shape[1];
                    let rows = self.nodes[x.0].shape[0];
                    let gx = self.grad_buf(x);
                    for r in 0..rows {
                        for c in 0..len {
                            gx[r * cols + start + c] = gx[r * cols + start + c] + gout[r * len + c];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if self.needs(id) {
                        for (g, &d) in self.grad_buf(id).iter_mut().zip(gout) {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::AddN { xs } => {
                for id in xs {
                    if self.needs(id) {
                        for (g, &d) in self.grad_buf(id).iter_mut().zip(gout) {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::AddBias { x, b } => {
                let (rows, cols) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                if self.needs(x) {
                    for (g, &d) in self.grad_buf(x).iter_mut().zip(gout) {
                        *g = *g + d;
                    }
                }
                if self.needs(b) {
                    let gb = self.grad_buf(b);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] = gb[c] + gout[r * cols + c];
                        }
                    }
                }
            }
            Op::AddChanBias { x, b } => {
                let xs = self.nodes[x.0].shape.clone();
                let (bn, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                if self.needs(x) {
                    for (g, &d) in self.grad_buf(x).iter_mut().zip(gout) {
                        *g = *g + d;
                    }
                }
                if self.needs(b) {
                    let gb = self.grad_buf(b);
                    for (ch, slot) in gb.iter_mut().enumerate() {
                        for s in 0..bn {
                            let base = (s * c + ch) * hw;
                            for i in 0..hw {
                                *slot = *slot + gout[base + i];
                            }
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = Arc::clone(&self.nodes[a.0].value);
                let bv = Arc::clone(&self.nodes[b.0].value);
                if self.needs(a) {
                    for ((g, &d), &bvv) in self.grad_buf(a).iter_mut().zip(gout).zip(bv.iter()) {
                        *g = *g + d * bvv;
                    }
                }
                if self.needs(b) {
                    for ((g, &d), &avv) in self.grad_buf(b).iter_mut().zip(gout).zip(av.iter()) {
                        *g = *g + d * avv;
                    }
                }
            }
            Op::MulCol { x, col } => {
                let (rows, cols) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let xv = Arc::clone(&self.nodes[x.0].value);
                let cv = Arc::clone(&self.nodes[col.0].value);
                if self.needs(x) {
                    let gx = self.grad_buf(x);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] = gx[r * cols + c] + gout[r * cols + c] * cv[r];
                        }
                    }
                }
                if self.needs(col) {
                    let gc = self.grad_buf(col);
                    for r in 0..rows {
                        let mut acc = P::zero();
                        for c in 0..cols {
                            acc = acc + gout[r * cols + c] * xv[r * cols + c];
                        }
                        gc[r] = gc[r] + acc;
                    }
                }
            }
            Op::Affine { x, mul } => {
                if self.needs(x) {
                    let m = P::from_f64(mul);
                    for (g, &d) in self.grad_buf(x).iter_mut().zip(gout) {
                        *g = *g + m * d;
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(x) {
                    let yv = Arc::clone(&self.nodes[i].value);
                    for ((g, &d), &y) in self.grad_buf(x).iter_mut().zip(gout).zip(yv.iter()) {
                        *g = *g + d * y * (P::one() - y);
                    }
                }
            }
            Op::Tanh { x } => {
                if self.needs(x) {
                    let yv = Arc::clone(&self.nodes[i].value);
                    for ((g, &d), &y) in self.grad_buf(x).iter_mut().zip(gout).zip(yv.iter()) {
                        *g = *g + d * (P::one() - y * y);
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(x) {
                    let yv = Arc::clone(&self.nodes[i].value);
                    for ((g, &d), &y) in self.grad_buf(x).iter_mut().zip(gout).zip(yv.iter()) {
                        if y > P::zero() {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if self.needs(x) {
                    let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let yv = Arc::clone(&self.nodes[i].value);
                    let gx = self.grad_buf(x);
                    for r in 0..rows {
                        let y = &yv[r * cols..(r + 1) * cols];
                        let d = &gout[r * cols..(r + 1) * cols];
                        let mut dot = P::zero();
                        for (&yi, &di) in y.iter().zip(d) {
                            dot = dot + yi * di;
                        }
                        for c in 0..cols {
                            gx[r * cols + c] = gx[r * cols + c] + y[c] * (d[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows { x } => {
                if self.needs(x) {
                    let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let yv = Arc::clone(&self.nodes[i].value);
                    let gx = self.grad_buf(x);
                    for r in 0..rows {
                        let y = &yv[r * cols..(r + 1) * cols];
                        let d = &gout[r * cols..(r + 1) * cols];
                        let sum: P = d.iter().copied().sum();
                        for c in 0..cols {
                            gx[r * cols + c] = gx[r * cols + c] + d[c] - y[c].exp() * sum;
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if self.needs(x) {
                    let d = gout[0];
                    for g in self.grad_buf(x).iter_mut() {
                        *g = *g + d;
                    }
                }
            }
        }
    }

    /// Folds parameter gradients into the set the graph was bound against.
    /// Every bound parameter receives a gradient (zeros if the tape never
    /// touched it on the path to the loss).
    pub fn grads_into(&self, params: &mut ParamSet<P>) {
        for (name, id) in &self.bound {
            let t = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("bound parameter {name} missing from set"));
            match self.grads.get(id.0).and_then(|g| g.as_ref()) {
                Some(g) => t.accumulate_grad(g),
                None => t.accumulate_grad(&vec![P::zero(); t.numel()]),
            }
        }
    }

    /// Number of nodes on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}
