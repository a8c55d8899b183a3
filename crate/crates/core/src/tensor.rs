//! Dense `f64` tensors with tape-style reverse-mode automatic differentiation.
//!
//! Every operation on a tensor that requires gradients appends a node to the
//! graph. Nodes carry a creation sequence number, so reversing that order is a
//! valid topological schedule for [`Tensor::backward`]. Graphs are `Rc`-based and
//! therefore confined to a single thread.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("div: zero divisor at flat index {index}")]
    DivisionByZero { index: usize },
    #[error("{op}: argument {value} outside domain at flat index {index}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("axis {axis} out of range for tensor of rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward root does not participate in the autodiff graph")]
    DetachedRoot,
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("index {index} out of range for axis of extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("set_data is only allowed on leaf tensors")]
    NotALeaf,
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Softplus,
    Square,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Binary(BinaryOp),
    Unary(UnaryOp),
    Reduce(ReduceOp, Option<usize>),
    MatMul,
    BroadcastTo,
    Reshape,
    Transpose,
    Clamp { lo: f64, hi: f64 },
    GatherLast { indices: Vec<usize> },
}

struct Node {
    op: Op,
    parents: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Shared handle to a tensor. Cloning is cheap and aliases the same storage.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if data.len() <= 16 {
            s.field("data", &*data);
        } else {
            s.field("data", &format_args!("[{} elements]", data.len()));
        }
        s.field("requires_grad", &self.0.requires_grad).finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides of `shape` viewed inside the (larger) broadcast shape `out`;
/// stretched dimensions get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visits every flat index of `out` together with the matching offsets into
/// two broadcast operands.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let last = out.len() - 1;
    let inner = out[last];
    let (ia, ib) = (sa[last], sb[last]);
    let mut counter = vec![0usize; last];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut flat = 0;
    loop {
        let (mut oa, mut ob) = (base_a, base_b);
        for _ in 0..inner {
            f(flat, oa, ob);
            flat += 1;
            oa += ia;
            ob += ib;
        }
        // odometer over the leading dimensions
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            counter[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if counter[d] < out[d] {
                break;
            }
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

/// Sums a gradient of shape `from` down to the broadcast-compatible `to`.
fn sum_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let mut out = vec![0.0; numel(to)];
    let st = broadcast_strides(to, from);
    let zeros = vec![0; from.len()];
    for_each_broadcast(from, &st, &zeros, |i, o, _| out[o] += grad[i]);
    out
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-major `[m,k] x [k,n]` with optional logical transposes of the inputs.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the full extents implied by (m, k, n) and the
    // strides above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    fn make(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            node,
        }))
    }

    /// Result of an op: joins the graph only when some parent does.
    fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op, parents: Vec<Tensor>) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::make(data, shape, true, Some(Node { op, parents }))
        } else {
            Self::make(data, shape, false, None)
        }
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: numel(shape),
                actual: data.len(),
            });
        }
        Ok(Self::make(data, shape.to_vec(), false, None))
    }

    pub fn scalar(value: f64) -> Self {
        Self::make(vec![value], vec![], false, None)
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self::make(values.to_vec(), vec![values.len()], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::make(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape())
    }

    pub fn ones_like(&self) -> Self {
        Self::ones(self.shape())
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::make(data, vec![n, n], false, None)
    }

    /// A fresh gradient-tracking leaf with the given contents.
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(t.requires_grad_leaf())
    }

    /// Copy of this tensor's values as a new gradient-tracking leaf.
    pub fn requires_grad_leaf(&self) -> Self {
        Self::make(self.to_vec(), self.shape().to_vec(), true, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// First element; intended for scalars and single-element tensors.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Borrow of the accumulated gradient, without copying it.
    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the values of a leaf tensor. Used by optimizers between
    /// graph constructions; never valid on interior nodes.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if !self.is_leaf() {
            return Err(TensorError::NotALeaf);
        }
        if values.len() != self.numel() {
            return Err(TensorError::DataLength {
                shape: self.shape().to_vec(),
                expected: self.numel(),
                actual: values.len(),
            });
        }
        self.0.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Same values, cut out of the autodiff graph.
    pub fn detach(&self) -> Tensor {
        Self::make(self.to_vec(), self.shape().to_vec(), false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    // ---- elementwise binary ----

    pub fn binary(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let out_shape =
            broadcast_shapes(self.shape(), other.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            })?;
        let a = self.data();
        let b = other.data();
        if op == BinaryOp::Div {
            if let Some(index) = b.iter().position(|&v| v == 0.0) {
                return Err(TensorError::DivisionByZero { index });
            }
        }
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
            BinaryOp::Div => |x: f64, y: f64| x / y,
        };
        let data: Vec<f64> = if self.shape() == other.shape() {
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else if b.len() == 1 && out_shape == self.shape() {
            let y = b[0];
            a.iter().map(|&x| f(x, y)).collect()
        } else if a.len() == 1 && out_shape == other.shape() {
            let x = a[0];
            b.iter().map(|&y| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(self.shape(), &out_shape);
            let sb = broadcast_strides(other.shape(), &out_shape);
            let mut out = vec![0.0; numel(&out_shape)];
            for_each_broadcast(&out_shape, &sa, &sb, |i, oa, ob| out[i] = f(a[oa], b[ob]));
            out
        };
        drop((a, b));
        Ok(Self::from_op(data, out_shape, Op::Binary(op), vec![self.clone(), other.clone()]))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.add(&Tensor::scalar(c)).expect("scalar broadcasts")
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.mul(&Tensor::scalar(c)).expect("scalar broadcasts")
    }

    // ---- elementwise unary ----

    pub fn unary(&self, op: UnaryOp) -> Result<Tensor> {
        let x = self.data();
        match op {
            UnaryOp::Log => {
                if let Some(index) = x.iter().position(|&v| !(v > 0.0)) {
                    return Err(TensorError::Domain {
                        op: "log",
                        index,
                        value: x[index],
                    });
                }
            }
            UnaryOp::Sqrt => {
                if let Some(index) = x.iter().position(|&v| !(v >= 0.0)) {
                    return Err(TensorError::Domain {
                        op: "sqrt",
                        index,
                        value: x[index],
                    });
                }
            }
            _ => {}
        }
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Neg => |v| -v,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => f64::ln,
            UnaryOp::Sigmoid => stable_sigmoid,
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Softplus => stable_softplus,
            UnaryOp::Square => |v| v * v,
            UnaryOp::Sqrt => f64::sqrt,
        };
        let data = x.iter().map(|&v| f(v)).collect();
        drop(x);
        Ok(Self::from_op(data, self.shape().to_vec(), Op::Unary(op), vec![self.clone()]))
    }

    fn total_unary(&self, op: UnaryOp) -> Tensor {
        self.unary(op).expect("op is total")
    }

    pub fn neg(&self) -> Tensor {
        self.total_unary(UnaryOp::Neg)
    }

    pub fn exp(&self) -> Tensor {
        self.total_unary(UnaryOp::Exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Log)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.total_unary(UnaryOp::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.total_unary(UnaryOp::Tanh)
    }

    pub fn softplus(&self) -> Tensor {
        self.total_unary(UnaryOp::Softplus)
    }

    pub fn square(&self) -> Tensor {
        self.total_unary(UnaryOp::Square)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Sqrt)
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        Self::from_op(data, self.shape().to_vec(), Op::Clamp { lo, hi }, vec![self.clone()])
    }

    // ---- reductions ----

    pub fn reduce(&self, op: ReduceOp, axis: Option<usize>) -> Result<Tensor> {
        let x = self.data();
        let (data, shape) = match axis {
            None => {
                let s: f64 = x.iter().sum();
                let v = match op {
                    ReduceOp::Sum => s,
                    ReduceOp::Mean => s / x.len() as f64,
                };
                (vec![v], vec![])
            }
            Some(axis) => {
                if axis >= self.rank() {
                    return Err(TensorError::AxisOutOfRange {
                        axis,
                        rank: self.rank(),
                    });
                }
                let (outer, extent, inner) = self.split_axis(axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..extent {
                        let row = &x[(o * extent + j) * inner..(o * extent + j + 1) * inner];
                        for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    let n = extent as f64;
                    out.iter_mut().for_each(|v| *v /= n);
                }
                let mut shape = self.shape().to_vec();
                shape.remove(axis);
                (out, shape)
            }
        };
        drop(x);
        Ok(Self::from_op(data, shape, Op::Reduce(op, axis), vec![self.clone()]))
    }

    fn split_axis(&self, axis: usize) -> (usize, usize, usize) {
        let s = self.shape();
        (numel(&s[..axis]), s[axis], numel(&s[axis + 1..]))
    }

    pub fn sum(&self) -> Tensor {
        self.reduce(ReduceOp::Sum, None).expect("full reduction")
    }

    pub fn mean(&self) -> Tensor {
        self.reduce(ReduceOp::Mean, None).expect("full reduction")
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceOp::Sum, Some(axis))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceOp::Mean, Some(axis))
    }

    // ---- linear algebra and shape ----

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), false, &other.data(), false, &mut out, 0.0);
        Ok(Self::from_op(out, vec![m, n], Op::MatMul, vec![self.clone(), other.clone()]))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        match broadcast_shapes(self.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: self.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let x = self.data();
        let sx = broadcast_strides(self.shape(), shape);
        let zeros = vec![0; shape.len()];
        let mut out = vec![0.0; numel(shape)];
        for_each_broadcast(shape, &sx, &zeros, |i, o, _| out[i] = x[o]);
        drop(x);
        Ok(Self::from_op(out, shape.to_vec(), Op::BroadcastTo, vec![self.clone()]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: numel(shape),
                actual: self.numel(),
            });
        }
        Ok(Self::from_op(self.to_vec(), shape.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        drop(x);
        Ok(Self::from_op(out, vec![c, r], Op::Transpose, vec![self.clone()]))
    }

    /// Selects one entry along the last axis for every leading position:
    /// `out[i] = self[i, indices[i]]`. Output shape drops the last axis.
    pub fn gather_last(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        let Some((&k, batch)) = s.split_last() else {
            return Err(TensorError::AxisOutOfRange { axis: 0, rank: 0 });
        };
        if numel(batch) != indices.len() {
            return Err(TensorError::DataLength {
                shape: batch.to_vec(),
                expected: numel(batch),
                actual: indices.len(),
            });
        }
        if let Some(&index) = indices.iter().find(|&&i| i >= k) {
            return Err(TensorError::IndexOutOfRange { index, extent: k });
        }
        let x = self.data();
        let out = indices.iter().enumerate().map(|(r, &i)| x[r * k + i]).collect();
        drop(x);
        Ok(Self::from_op(
            out,
            batch.to_vec(),
            Op::GatherLast {
                indices: indices.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    // ---- reverse pass ----

    /// Accumulates d(self)/d(leaf) into every reachable gradient-tracking leaf.
    pub fn backward(&self) -> Result<()> {
        if !self.shape().is_empty() {
            return Err(TensorError::NonScalarRoot {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Err(TensorError::DetachedRoot);
        }
        // collect the reachable subgraph
        let mut seen = HashSet::new();
        let mut order = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(node) = &t.0.node {
                stack.extend(node.parents.iter().filter(|p| p.requires_grad()).cloned());
            }
            order.push(t);
        }
        // creation order is a topological order
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in &order {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.0.node {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let parent_grads = local_backward(node, t, &g);
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, v)| *a += v),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Vector-Jacobian products of one node. Returns one optional gradient per
/// parent, each shaped like that parent.
fn local_backward(node: &Node, out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let parents = &node.parents;
    let need = |i: usize| parents[i].requires_grad();
    match &node.op {
        Op::Binary(op) => {
            let (a, b) = (&parents[0], &parents[1]);
            let out_shape = out.shape();
            match op {
                BinaryOp::Add => vec![
                    need(0).then(|| sum_to_shape(g, out_shape, a.shape())),
                    need(1).then(|| sum_to_shape(g, out_shape, b.shape())),
                ],
                BinaryOp::Sub => vec![
                    need(0).then(|| sum_to_shape(g, out_shape, a.shape())),
                    need(1).then(|| {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        sum_to_shape(&neg, out_shape, b.shape())
                    }),
                ],
                BinaryOp::Mul | BinaryOp::Div => {
                    let (av, bv) = (a.data(), b.data());
                    let sa = broadcast_strides(a.shape(), out_shape);
                    let sb = broadcast_strides(b.shape(), out_shape);
                    let mut ga = need(0).then(|| vec![0.0; av.len()]);
                    let mut gb = need(1).then(|| vec![0.0; bv.len()]);
                    let is_mul = *op == BinaryOp::Mul;
                    for_each_broadcast(out_shape, &sa, &sb, |i, oa, ob| {
                        let (x, y) = (av[oa], bv[ob]);
                        if is_mul {
                            if let Some(ga) = ga.as_mut() {
                                ga[oa] += g[i] * y;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[ob] += g[i] * x;
                            }
                        } else {
                            if let Some(ga) = ga.as_mut() {
                                ga[oa] += g[i] / y;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[ob] -= g[i] * x / (y * y);
                            }
                        }
                    });
                    vec![ga, gb]
                }
            }
        }
        Op::Unary(op) => {
            let x = parents[0].data();
            let y = out.data();
            let d: Vec<f64> = match op {
                UnaryOp::Neg => g.iter().map(|v| -v).collect(),
                UnaryOp::Exp => g.iter().zip(y.iter()).map(|(g, y)| g * y).collect(),
                UnaryOp::Log => g.iter().zip(x.iter()).map(|(g, x)| g / x).collect(),
                UnaryOp::Sigmoid => g.iter().zip(y.iter()).map(|(g, y)| g * y * (1.0 - y)).collect(),
                UnaryOp::Tanh => g.iter().zip(y.iter()).map(|(g, y)| g * (1.0 - y * y)).collect(),
                UnaryOp::Softplus => g
                    .iter()
                    .zip(x.iter())
                    .map(|(g, &x)| g * stable_sigmoid(x))
                    .collect(),
                UnaryOp::Square => g.iter().zip(x.iter()).map(|(g, x)| 2.0 * g * x).collect(),
                UnaryOp::Sqrt => g.iter().zip(y.iter()).map(|(g, y)| g / (2.0 * y)).collect(),
            };
            vec![Some(d)]
        }
        Op::Clamp { lo, hi } => {
            let x = parents[0].data();
            let d = g
                .iter()
                .zip(x.iter())
                .map(|(g, x)| if x >= lo && x <= hi { *g } else { 0.0 })
                .collect();
            vec![Some(d)]
        }
        Op::Reduce(op, axis) => {
            let p = &parents[0];
            let n = p.numel();
            let d = match axis {
                None => {
                    let v = match op {
                        ReduceOp::Sum => g[0],
                        ReduceOp::Mean => g[0] / n as f64,
                    };
                    vec![v; n]
                }
                Some(axis) => {
                    let (outer, extent, inner) = p.split_axis(*axis);
                    let factor = match op {
                        ReduceOp::Sum => 1.0,
                        ReduceOp::Mean => 1.0 / extent as f64,
                    };
                    let mut d = vec![0.0; n];
                    for o in 0..outer {
                        for j in 0..extent {
                            let dst = &mut d[(o * extent + j) * inner..(o * extent + j + 1) * inner];
                            for (dv, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *dv = gv * factor;
                            }
                        }
                    }
                    d
                }
            };
            vec![Some(d)]
        }
        Op::MatMul => {
            let (a, b) = (&parents[0], &parents[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = need(0).then(|| {
                // g [m,n] . b^T [n,k]
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, &b.data(), true, &mut ga, 0.0);
                ga
            });
            let gb = need(1).then(|| {
                // a^T [k,m] . g [m,n]
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, &a.data(), true, g, false, &mut gb, 0.0);
                gb
            });
            vec![ga, gb]
        }
        Op::BroadcastTo => vec![Some(sum_to_shape(g, out.shape(), parents[0].shape()))],
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Transpose => {
            let (r, c) = (parents[0].shape()[0], parents[0].shape()[1]);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(d)]
        }
        Op::GatherLast { indices } => {
            let p = &parents[0];
            let k = *p.shape().last().expect("rank >= 1");
            let mut d = vec![0.0; p.numel()];
            for (r, &i) in indices.iter().enumerate() {
                d[r * k + i] += g[r];
            }
            vec![Some(d)]
        }
    }
}
