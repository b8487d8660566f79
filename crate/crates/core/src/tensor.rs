//! Dense row-major `f64` tensors and a define-by-run reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are copied in
//! from [`Tensor`]s, every primitive appends one node, and
//! [`Graph::backward`] replays the nodes in reverse creation order, which is
//! a valid reverse topological order because a node can only reference
//! nodes created before it.
//!
//! Most structural ops (matmul, concat, slicing) work on matrices. A 1-D
//! tensor of length `n` is viewed as a `1 x n` row wherever a matrix is
//! expected. Reductions produce a single-element tensor of shape `[1]`, and
//! any single-element tensor broadcasts against anything in the binary ops.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel]).expect("positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    /// A `1 x n` row matrix.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![1, n], data).expect("non-empty row")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..numel).map(&mut f).collect()).expect("positive extents")
    }

    pub fn requiring_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        match (on, self.grad.is_some()) {
            (true, false) => self.grad = Some(vec![0.0; self.data.len()]),
            (false, true) => self.grad = None,
            _ => {}
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. No-op for untracked tensors.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        if let Some(g) = self.grad.as_mut() {
            assert_eq!(g.len(), delta.len(), "gradient length");
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation tags accepted by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Tanh,
    Sigmoid,
    /// `c * x`
    Scale(f64),
    /// `x + c`
    Shift(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryOp {
    Relu,
    Tanh,
    Sigmoid,
}

/// How the two operands of a binary op line up with the output.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Same,
    ScalarLhs,
    ScalarRhs,
    /// lhs is `1 x n`, rhs is `m x n`
    RowLhs(usize),
    /// rhs is `1 x n`, lhs is `m x n`
    RowRhs(usize),
}

impl Broadcast {
    #[inline]
    fn lhs(self, i: usize) -> usize {
        match self {
            Broadcast::Same | Broadcast::ScalarRhs | Broadcast::RowRhs(_) => i,
            Broadcast::ScalarLhs => 0,
            Broadcast::RowLhs(n) => i % n,
        }
    }

    #[inline]
    fn rhs(self, i: usize) -> usize {
        match self {
            Broadcast::Same | Broadcast::ScalarLhs | Broadcast::RowLhs(_) => i,
            Broadcast::ScalarRhs => 0,
            Broadcast::RowRhs(n) => i % n,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinaryOp, Var, Var, Broadcast),
    Unary(UnaryOp, Var),
    Affine { x: Var, scale: f64 },
    Softmax { x: Var, axis: usize },
    L2Norm(Var),
    Normalize(Var),
    RowCosine(Var),
    Sum(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Ordered record of executed primitives, sufficient to replay adjoints.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [n] => Some((1, n)),
        [r, c] => Some((r, c)),
        _ => None,
    }
}

/// Adjoint buffer of an input, or None if it is a constant.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.tracked {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Copies a tensor in as a leaf; it is tracked iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad())
    }

    /// Copies a tensor in as a tracked leaf regardless of its own flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph node shape")
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    /// Gradient accumulated into a tracked leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.fill(0.0);
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        as_matrix(self.shape(v)).ok_or_else(|| Error::Dimension {
            op,
            lhs: self.shape(v).to_vec(),
            rhs: vec![],
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let tracked = self.is_tracked(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), tracked))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Broadcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if sa == sb {
            return Ok((Broadcast::Same, sa.to_vec()));
        }
        if nb == 1 {
            return Ok((Broadcast::ScalarRhs, sa.to_vec()));
        }
        if na == 1 {
            return Ok((Broadcast::ScalarLhs, sb.to_vec()));
        }
        match (sa, sb) {
            ([_, ca], [1, cb]) if ca == cb => Ok((Broadcast::RowRhs(*cb), sa.to_vec())),
            ([1, ca], [_, cb]) if ca == cb => Ok((Broadcast::RowLhs(*ca), sb.to_vec())),
            _ => Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            }),
        }
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let (bc, shape) = self.broadcast(name, a, b)?;
        let numel: usize = shape.iter().product();
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<f64> = (0..numel)
            .map(|i| {
                let (x, y) = (av[bc.lhs(i)], bv[bc.rhs(i)]);
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            })
            .collect();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(shape, out, Op::Binary(op, a, b, bc), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| match op {
                UnaryOp::Relu => x.max(0.0),
                UnaryOp::Tanh => x.tanh(),
                UnaryOp::Sigmoid => sigmoid(x),
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.is_tracked(a);
        self.push(shape, out, Op::Unary(op, a), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.is_tracked(x);
        self.push(shape, out, Op::Affine { x, scale }, tracked)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    /// Tag-dispatched pointwise op. Binary tags need `b`, unary tags reject it.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need = |b: Option<Var>| {
            b.ok_or_else(|| Error::contract(format!("{op:?} needs a second operand")))
        };
        let unary = |b: Option<Var>| match b {
            Some(_) => Err(Error::contract(format!("{op:?} takes a single operand"))),
            None => Ok(()),
        };
        match op {
            Elementwise::Add => self.add(a, need(b)?),
            Elementwise::Sub => self.sub(a, need(b)?),
            Elementwise::Mul => self.mul(a, need(b)?),
            Elementwise::Div => self.div(a, need(b)?),
            Elementwise::Relu => unary(b).map(|_| self.relu(a)),
            Elementwise::Tanh => unary(b).map(|_| self.tanh(a)),
            Elementwise::Sigmoid => unary(b).map(|_| self.sigmoid(a)),
            Elementwise::Scale(c) => unary(b).map(|_| self.scale(a, c)),
            Elementwise::Shift(c) => unary(b).map(|_| self.shift(a, c)),
        }
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| xv[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (xv[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[idx(a)] /= total;
                }
            }
        }
        let tracked = self.is_tracked(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, tracked))
    }

    /// Euclidean norm over all entries; the gradient at the zero tensor is zero.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let r = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        let tracked = self.is_tracked(x);
        self.push(vec![1], vec![r], Op::L2Norm(x), tracked)
    }

    /// `x / ||x||`, mapping the zero tensor to itself with zero gradient.
    pub fn normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let r = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
        let out = if r > 0.0 {
            xv.iter().map(|v| v / r).collect()
        } else {
            vec![0.0; xv.len()]
        };
        let shape = self.shape(x).to_vec();
        let tracked = self.is_tracked(x);
        self.push(shape, out, Op::Normalize(x), tracked)
    }

    /// `m x m` cosine similarities between the rows of an `m x n` matrix,
    /// `x_i . x_j / sqrt(|x_i|^2 |x_j|^2)`. Rows of zeros have cosine 0 with
    /// everything. The diagonal of a nonzero row is exactly 1.
    pub fn row_cosine(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "row_cosine")?;
        let xv = self.value(x);
        let sq: Vec<f64> = xv.chunks(n).map(|r| r.iter().map(|v| v * v).sum()).collect();
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                if sq[i] > 0.0 && sq[j] > 0.0 {
                    let dot: f64 = xv[i * n..(i + 1) * n].iter().zip(&xv[j * n..(j + 1) * n]).map(|(a, b)| a * b).sum();
                    out[i * m + j] = dot / (sq[i] * sq[j]).sqrt();
                }
            }
        }
        let tracked = self.is_tracked(x);
        Ok(self.push(vec![m, m], out, Op::RowCosine(x), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let tracked = self.is_tracked(x);
        self.push(vec![1], vec![s], Op::Sum(x), tracked)
    }

    /// Concatenates matrices along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        if axis > 1 {
            return Err(Error::contract(format!("concat axis {axis} on matrices")));
        }
        let dims = parts
            .iter()
            .map(|&p| self.matrix_dims(p, "concat"))
            .collect::<Result<Vec<_>>>()?;
        let (r0, c0) = dims[0];
        for (&p, &(r, c)) in parts.iter().zip(&dims) {
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (shape, out) = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * c0);
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
            (vec![rows, c0], out)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
                }
            }
            (vec![r0, cols], out)
        };
        let tracked = parts.iter().any(|&p| self.is_tracked(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, len],
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&xv[row * c + start..row * c + start + len]);
        }
        let tracked = self.is_tracked(x);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, tracked))
    }

    /// Gathers rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::contract("gather of zero rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![bad],
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let tracked = self.is_tracked(x);
        Ok(self.push(
            vec![rows.len(), c],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            tracked,
        ))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.gather_rows(x, &[i])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != self.value(x).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let tracked = self.is_tracked(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), tracked))
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Gradients land in the tracked leaves and accumulate across calls until
    /// [`Graph::zero_grad`]. Every tracked leaf ends with a populated buffer,
    /// zero if the loss does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for (node, g) in self.nodes.iter().zip(self.leaf_grads.iter_mut()) {
            if node.tracked && matches!(node.op, Op::Leaf) && g.is_none() {
                *g = Some(vec![0.0; node.value.len()]);
            }
        }
        if !self.is_tracked(loss) {
            return Ok(());
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];

        match &node.op {
            Op::Leaf => {
                let buf = self.leaf_grads[i].as_mut().expect("tracked leaf buffer");
                for (b, d) in buf.iter_mut().zip(g) {
                    *b += d;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(&nodes[a.0].shape).unwrap();
                let n = as_matrix(&nodes[b.0].shape).unwrap().1;
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot(nodes, adj, *a) {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = as_matrix(&nodes[a.0].shape).unwrap();
                if let Some(ga) = slot(nodes, adj, *a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Binary(op, a, b, bc) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot(nodes, adj, *a) {
                    for (k, gk) in g.iter().enumerate() {
                        let d = match op {
                            BinaryOp::Add | BinaryOp::Sub => 1.0,
                            BinaryOp::Mul => bv[bc.rhs(k)],
                            BinaryOp::Div => 1.0 / bv[bc.rhs(k)],
                        };
                        ga[bc.lhs(k)] += gk * d;
                    }
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    for (k, gk) in g.iter().enumerate() {
                        let d = match op {
                            BinaryOp::Add => 1.0,
                            BinaryOp::Sub => -1.0,
                            BinaryOp::Mul => av[bc.lhs(k)],
                            BinaryOp::Div => {
                                let y = bv[bc.rhs(k)];
                                -av[bc.lhs(k)] / (y * y)
                            }
                        };
                        gb[bc.rhs(k)] += gk * d;
                    }
                }
            }
            Op::Unary(op, a) => {
                let (xv, yv) = (&nodes[a.0].value, &node.value);
                if let Some(ga) = slot(nodes, adj, *a) {
                    for k in 0..g.len() {
                        let d = match op {
                            UnaryOp::Relu => {
                                if xv[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Tanh => 1.0 - yv[k] * yv[k],
                            UnaryOp::Sigmoid => yv[k] * (1.0 - yv[k]),
                        };
                        ga[k] += g[k] * d;
                    }
                }
            }
            Op::Affine { x, scale, .. } => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    for (o, gk) in gx.iter_mut().zip(g) {
                        *o += scale * gk;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                if let Some(gx) = slot(nodes, adj, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + i;
                            let dot: f64 = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                            for a in 0..len {
                                gx[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::L2Norm(x) => {
                let r = node.value[0];
                let xv = &nodes[x.0].value;
                if let Some(gx) = slot(nodes, adj, *x) {
                    if r > 0.0 {
                        for (o, v) in gx.iter_mut().zip(xv) {
                            *o += g[0] * v / r;
                        }
                    }
                }
            }
            Op::Normalize(x) => {
                let xv = &nodes[x.0].value;
                let r = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
                let y = &node.value;
                if let Some(gx) = slot(nodes, adj, *x) {
                    if r > 0.0 {
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for k in 0..gx.len() {
                            gx[k] += (g[k] - y[k] * dot) / r;
                        }
                    }
                }
            }
            Op::RowCosine(x) => {
                let xv = &nodes[x.0].value;
                let m = node.shape[0];
                let n = xv.len() / m;
                let c = &node.value;
                let norms: Vec<f64> = xv.chunks(n).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
                if let Some(gx) = slot(nodes, adj, *x) {
                    // d c_ij / d x_i = x_j / (|x_i||x_j|) - c_ij x_i / |x_i|^2, and symmetrically for x_j
                    for i in 0..m {
                        for j in 0..m {
                            let u = g[i * m + j];
                            if u == 0.0 || norms[i] == 0.0 || norms[j] == 0.0 {
                                continue;
                            }
                            let inv = 1.0 / (norms[i] * norms[j]);
                            let (ci, cj) = (c[i * m + j] / (norms[i] * norms[i]), c[i * m + j] / (norms[j] * norms[j]));
                            for k in 0..n {
                                let (a, b) = (xv[i * n + k], xv[j * n + k]);
                                gx[i * n + k] += u * (b * inv - ci * a);
                                gx[j * n + k] += u * (a * inv - cj * b);
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let cols = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = as_matrix(&nodes[p.0].shape).unwrap();
                    if let Some(gp) = slot(nodes, adj, p) {
                        if *axis == 0 {
                            for (o, gk) in gp.iter_mut().zip(&g[offset * cols..]) {
                                *o += gk;
                            }
                        } else {
                            for r in 0..pr {
                                let src = &g[r * cols + offset..r * cols + offset + pc];
                                for (o, gk) in gp[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                    *o += gk;
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::SliceCols { x, start } => {
                let c = as_matrix(&nodes[x.0].shape).unwrap().1;
                let (r, len) = (node.shape[0], node.shape[1]);
                if let Some(gx) = slot(nodes, adj, *x) {
                    for row in 0..r {
                        let dst = &mut gx[row * c + start..row * c + start + len];
                        for (o, gk) in dst.iter_mut().zip(&g[row * len..(row + 1) * len]) {
                            *o += gk;
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let c = node.shape[1];
                if let Some(gx) = slot(nodes, adj, *x) {
                    for (k, &src) in rows.iter().enumerate() {
                        let dst = &mut gx[src * c..(src + 1) * c];
                        for (o, gk) in dst.iter_mut().zip(&g[k * c..(k + 1) * c]) {
                            *o += gk;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    for (o, gk) in gx.iter_mut().zip(g) {
                        *o += gk;
                    }
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Convenience: the softmax of a plain slice, evaluated through the tape.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(values.to_vec()));
    let y = g.softmax(x, 0).expect("axis 0 of a vector");
    g.value(y).to_vec()
}

/// Convenience: the Euclidean norm of a plain slice.
pub fn l2_norm(values: &[f64]) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(values.to_vec()));
    let y = g.l2_norm(x);
    g.scalar(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
    }

    /// Builds `sum(w * f(inputs))` with fixed random weights `w`, returns
    /// the analytic gradients of every input and FD gradients of each.
    fn check_primitive(
        inputs: &[Tensor],
        weights_seed: u64,
        f: impl Fn(&mut Graph, &[Var]) -> Var,
    ) -> f64 {
        let eval = |vals: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.param(t)).collect();
            let out = f(&mut g, &vars);
            let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
            let n = g.value(out).len();
            let w = Tensor::new(g.shape(out).to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let w = g.constant(w);
            let p = g.mul(out, w).unwrap();
            let s = g.sum(p);
            g.scalar(s)
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
        let n = g.value(out).len();
        let w = Tensor::new(g.shape(out).to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = g.constant(w);
        let p = g.mul(out, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();

        let mut worst: f64 = 0.0;
        for (k, v) in vars.iter().enumerate() {
            let analytic = g.grad(*v).unwrap().to_vec();
            let numeric = central_difference(
                |x| {
                    let mut vals = inputs.to_vec();
                    vals[k].data_mut().copy_from_slice(x);
                    eval(&vals)
                },
                inputs[k].data(),
                1e-6,
            );
            for (a, n) in analytic.iter().zip(&numeric) {
                worst = worst.max(relative_error(*a, *n, PRIMITIVE_FLOOR));
            }
        }
        worst
    }

    const PRIMITIVE_FLOOR: f64 = 1e-3;

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_matmul_annihilates() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 + 0.5));
        let y = g.matmul(z, b).unwrap();
        assert_eq!(g.shape(y), &[2, 4]);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum_matches_fd() {
        // d/dA sum(A B) = 1 B^T
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.25, -0.75]).unwrap();
        let mut g = Graph::new();
        let va = g.param(&a);
        let vb = g.constant(b.clone());
        let y = g.matmul(va, vb).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let numeric = central_difference(
            |x| {
                let mut g = Graph::new();
                let va = g.constant(Tensor::matrix(2, 2, x.to_vec()).unwrap());
                let vb = g.constant(b.clone());
                let y = g.matmul(va, vb).unwrap();
                let s = g.sum(y);
                g.scalar(s)
            },
            a.data(),
            1e-6,
        );
        let analytic = g.grad(va).unwrap();
        // row sums of b
        assert_abs_diff_eq!(analytic[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(analytic[1], 2.5, epsilon = 1e-12);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *n, PRIMITIVE_FLOOR) < 1e-8);
        }
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.scalar(s), 0.5);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![0.0, 1.0]));
        let y = g.relu(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn tanh_gradient_matches_fd() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(0.3));
        let y = g.tanh(x);
        g.backward(y).unwrap();
        let numeric = central_difference(|v| v[0].tanh(), &[0.3], 1e-6)[0];
        let analytic = g.grad(x).unwrap()[0];
        assert!((analytic - numeric).abs() / analytic.abs() < 1e-8);
    }

    #[test]
    fn elementwise_rejects_bad_arity_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(g.elementwise(Elementwise::Add, a, None).is_err());
        assert!(g.elementwise(Elementwise::Relu, a, Some(a)).is_err());
        assert!(matches!(
            g.elementwise(Elementwise::Mul, a, Some(b)),
            Err(Error::Dimension { .. })
        ));
        let s = g.constant(Tensor::scalar(3.0));
        let y = g.elementwise(Elementwise::Mul, a, Some(s)).unwrap();
        assert_eq!(g.value(y), &[3.0, 6.0]);
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&[0.0, 0.0, 0.0]);
        for v in y {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let y = softmax(&[1000.0, 0.0]);
        assert!(y.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(y[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], 0.0, epsilon = 1e-15);
        // exp(k) / (e + e^2 + e^3), evaluated independently
        let e = [1f64.exp(), 2f64.exp(), 3f64.exp()];
        let z: f64 = e.iter().sum();
        let y = softmax(&[1.0, 2.0, 3.0]);
        for (v, ek) in y.iter().zip(e) {
            assert_abs_diff_eq!(*v, ek / z, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(y[0], 0.09003057, epsilon = 1e-8);
        assert_abs_diff_eq!(y[1], 0.24472847, epsilon = 1e-8);
        assert_abs_diff_eq!(y[2], 0.66524096, epsilon = 1e-8);
    }

    #[test]
    fn softmax_along_axis_of_matrix() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 5.0]).unwrap());
        let rows = g.softmax(x, 1).unwrap();
        let v = g.value(rows);
        assert_abs_diff_eq!(v[0] + v[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[2] + v[3], 1.0, epsilon = 1e-15);
        let cols = g.softmax(x, 0).unwrap();
        let v = g.value(cols);
        assert_abs_diff_eq!(v[0] + v[2], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1] + v[3], 1.0, epsilon = 1e-15);
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(l2_norm(&[0.0, 0.0, 0.0]), 0.0);
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![0.0, 0.0]));
        let r = g.l2_norm(x);
        g.backward(r).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn l2_norm_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if l2_norm(&x) <= 0.1 {
                continue;
            }
            let mut g = Graph::new();
            let v = g.param(&Tensor::vector(x.clone()));
            let r = g.l2_norm(v);
            g.backward(r).unwrap();
            let numeric = central_difference(l2_norm, &x, 1e-6);
            for (a, n) in g.grad(v).unwrap().iter().zip(&numeric) {
                assert!(relative_error(*a, *n, PRIMITIVE_FLOOR) < 1e-6);
            }
        }
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::vector(vec![0.2, -3.0, 7.0]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.param(&Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_and_replays_deterministically() {
        let build = |g: &mut Graph| {
            let w = g.param(&Tensor::matrix(2, 2, vec![0.3, -0.2, 0.9, 0.4]).unwrap());
            let x = g.constant(Tensor::row(vec![1.0, -2.0]));
            let h = g.matmul(x, w).unwrap();
            let t = g.tanh(h);
            let y = g.softmax(t, 1).unwrap();
            let l = g.l2_norm(y);
            (w, l)
        };
        let mut g = Graph::new();
        let (w, l) = build(&mut g);
        g.backward(l).unwrap();
        let first = g.grad(w).unwrap().to_vec();
        g.backward(l).unwrap();
        let doubled = g.grad(w).unwrap().to_vec();
        for (a, b) in first.iter().zip(&doubled) {
            assert_eq!(2.0 * a, *b);
        }
        g.zero_grad();
        g.backward(l).unwrap();
        let replay = g.grad(w).unwrap().to_vec();
        assert_eq!(
            first.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            replay.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn unreached_tracked_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::vector(vec![1.0]));
        let b = g.param(&Tensor::vector(vec![2.0, 3.0]));
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        let mut t = Tensor::zeros(&[2, 3]).requiring_grad();
        assert_eq!(t.grad().unwrap().len(), 6);
        t.accumulate_grad(&[1.0; 6]);
        t.accumulate_grad(&[1.0; 6]);
        assert_eq!(t.grad().unwrap(), &[2.0; 6]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 6]);
    }

    // Central-difference checks of every primitive on 100 random inputs each.
    const TRIALS: u64 = 100;

    #[test]
    fn fd_matmul_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in 0..TRIALS {
            let a = rand_tensor(&mut rng, &[2, 3]);
            let b = rand_tensor(&mut rng, &[3, 4]);
            let err = check_primitive(&[a, b], s, |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                g.transpose(y).unwrap()
            });
            assert!(err < 1e-6, "matmul/transpose rel err {err}");
        }
    }

    #[test]
    fn fd_binary_with_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in 0..TRIALS {
            let a = rand_tensor(&mut rng, &[3, 2]);
            let row = rand_tensor(&mut rng, &[1, 2]);
            let sc = Tensor::scalar(rng.gen_range(0.5..2.0));
            let mut d = rand_tensor(&mut rng, &[3, 2]);
            for v in d.data_mut() {
                *v = v.signum() * (v.abs() + 0.5);
            }
            let err = check_primitive(&[a, row, sc, d], s, |g, v| {
                let x = g.add(v[0], v[1]).unwrap();
                let x = g.sub(x, v[2]).unwrap();
                let x = g.mul(x, v[3]).unwrap();
                let x = g.div(x, v[2]).unwrap();
                let y = g.div(v[1], v[3]).unwrap();
                let x = g.sub(y, x).unwrap();
                let z = g.mul(v[2], x).unwrap();
                g.affine(z, -0.7, 0.2)
            });
            assert!(err < 1e-6, "binary rel err {err}");
        }
    }

    #[test]
    fn fd_unary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in 0..TRIALS {
            let mut x = rand_tensor(&mut rng, &[2, 3]);
            // keep relu inputs away from its kink
            for v in x.data_mut() {
                if v.abs() < 1e-3 {
                    *v = 0.1;
                }
            }
            let err = check_primitive(&[x], s, |g, v| {
                let a = g.relu(v[0]);
                let b = g.tanh(v[0]);
                let c = g.sigmoid(v[0]);
                let ab = g.add(a, b).unwrap();
                g.mul(ab, c).unwrap()
            });
            assert!(err < 1e-6, "unary rel err {err}");
        }
    }

    #[test]
    fn fd_softmax_both_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in 0..TRIALS {
            let x = rand_tensor(&mut rng, &[3, 4]);
            let axis = (s % 2) as usize;
            let err = check_primitive(&[x], s, |g, v| g.softmax(v[0], axis).unwrap());
            assert!(err < 1e-6, "softmax rel err {err}");
        }
    }

    #[test]
    fn fd_norms_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in 0..TRIALS {
            let x = rand_tensor(&mut rng, &[1, 5]);
            let err = check_primitive(&[x], s, |g, v| {
                let n = g.normalize(v[0]);
                let r = g.l2_norm(v[0]);
                let t = g.sum(v[0]);
                let nr = g.mul(n, r).unwrap();
                g.mul(nr, t).unwrap()
            });
            assert!(err < 1e-6, "norm rel err {err}");
        }
    }

    #[test]
    fn fd_row_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for s in 0..TRIALS {
            let rows = rng.gen_range(1..=4);
            let x = rand_tensor(&mut rng, &[rows, 3]);
            let err = check_primitive(&[x], s, |g, v| g.row_cosine(v[0]).unwrap());
            assert!(err < 1e-6, "row cosine rel err {err}");
        }
    }

    #[test]
    fn row_cosine_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 2, vec![0.3, -0.7, 0.0, 0.0, -0.6, 1.4]).unwrap());
        let c = g.row_cosine(x).unwrap();
        assert_eq!(g.value(c), &[1.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0]);

        // the zero row is a discontinuity; it gets no gradient
        let mut g = Graph::new();
        let x = g.param(&Tensor::matrix(2, 2, vec![0.0, 0.0, 0.5, 0.2]).unwrap());
        let c = g.row_cosine(x).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(&g.grad(x).unwrap()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn fd_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for s in 0..TRIALS {
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[3, 2]);
            let err = check_primitive(&[a, b], s, |g, v| {
                let c = g.concat(&[v[0], v[1]], 1).unwrap();
                let sl = g.slice_cols(c, 1, 4).unwrap();
                let gr = g.gather_rows(sl, &[2, 0, 2]).unwrap();
                let st = g.concat(&[gr, sl], 0).unwrap();
                let sq = g.mul(st, st).unwrap();
                g.reshape(sq, &[4, 6]).unwrap()
            });
            assert!(err < 1e-6, "structural rel err {err}");
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_sums_to_one(xs in proptest::collection::vec(-700.0f64..700.0, 1..16)) {
            let y = softmax(&xs);
            let total: f64 = y.iter().sum();
            proptest::prop_assert!((total - 1.0).abs() <= 1e-12);
            proptest::prop_assert!(y.iter().all(|&v| v >= 0.0));
        }
    }
}
