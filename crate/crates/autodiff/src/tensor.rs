use std::cell::Cell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::sparse::{self, SparseMap};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Returns whether operations currently record the graph.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Disables graph recording until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` with graph recording disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _g = NoGradGuard::new();
    f()
}

pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f64),
    Offset(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Sqrt(Tensor),
    Relu(Tensor),
    Abs(Tensor),
    MatMul { a: Tensor, b: Tensor, ta: bool, tb: bool },
    Expand(Tensor),
    SumTo(Tensor),
    Reshape(Tensor),
    Sparse(Tensor, Rc<SparseMap>),
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Expand(a)
            | Op::SumTo(a)
            | Op::Reshape(a)
            | Op::Sparse(a, _) => vec![a],
        }
    }

    fn into_parents(self) -> Vec<Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Expand(a)
            | Op::SumTo(a)
            | Op::Reshape(a)
            | Op::Sparse(a, _) => vec![a],
        }
    }
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

impl Drop for Node {
    // Graphs can be thousands of nodes deep; unlink iteratively so dropping
    // a loss never recurses through the whole tape.
    fn drop(&mut self) {
        let mut stack = std::mem::replace(&mut self.op, Op::Leaf).into_parents();
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                stack.extend(std::mem::replace(&mut node.op, Op::Leaf).into_parents());
            }
        }
    }
}

/// An immutable n-dimensional `f64` array that records how it was computed.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_parts(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Self {
        assert_eq!(data.len(), numel(&shape), "data length does not match shape {shape:?}");
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data: Rc::new(data),
            shape,
            requires_grad,
            op,
        }))
    }

    fn derived(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        let track = is_grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        if track {
            Self::from_parts(data, shape, true, op)
        } else {
            Self::from_parts(data, shape, false, Op::Leaf)
        }
    }

    /// A constant (no gradient is tracked for it).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::from_parts(data, shape.to_vec(), false, Op::Leaf)
    }

    /// A leaf that gradients are computed for.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::from_parts(data, shape.to_vec(), true, Op::Leaf)
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![0.0; numel(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::new(vec![1.0; numel(shape)], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::new(vec![v; numel(shape)], shape)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    pub(crate) fn op(&self) -> &Op {
        &self.0.op
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data: self.0.data.clone(),
            shape: self.0.shape.clone(),
            requires_grad: false,
            op: Op::Leaf,
        }))
    }

    fn zip_same(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data().iter().map(|&a| f(a)).collect()
    }

    fn broadcast_pair(&self, other: &Tensor) -> (Tensor, Tensor) {
        if self.shape() == other.shape() {
            return (self.clone(), other.clone());
        }
        let shape = broadcast_shape(self.shape(), other.shape());
        (self.expand(&shape), other.expand(&shape))
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip_same(&b, |x, y| x + y);
        Tensor::derived(data, a.shape().to_vec(), Op::Add(a, b))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip_same(&b, |x, y| x - y);
        Tensor::derived(data, a.shape().to_vec(), Op::Sub(a, b))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip_same(&b, |x, y| x * y);
        Tensor::derived(data, a.shape().to_vec(), Op::Mul(a, b))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip_same(&b, |x, y| x / y);
        Tensor::derived(data, a.shape().to_vec(), Op::Div(a, b))
    }

    pub fn neg(&self) -> Tensor {
        Tensor::derived(self.map(|x| -x), self.shape().to_vec(), Op::Neg(self.clone()))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor::derived(self.map(|x| x * s), self.shape().to_vec(), Op::Scale(self.clone(), s))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        Tensor::derived(self.map(|x| x + s), self.shape().to_vec(), Op::Offset(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        Tensor::derived(self.map(f64::exp), self.shape().to_vec(), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        Tensor::derived(self.map(f64::ln), self.shape().to_vec(), Op::Log(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        Tensor::derived(self.map(f64::sqrt), self.shape().to_vec(), Op::Sqrt(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        Tensor::derived(self.map(|x| x.max(0.0)), self.shape().to_vec(), Op::Relu(self.clone()))
    }

    pub fn abs(&self) -> Tensor {
        Tensor::derived(self.map(f64::abs), self.shape().to_vec(), Op::Abs(self.clone()))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    /// Matrix product of `[m, k] x [k, n]`, or batched `[b, m, k] x [b, k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with either operand optionally transposed in its last two axes.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (batch, m, k, n, out_shape) = matmul_dims(self.shape(), other.shape(), ta, tb);
        let mut out = vec![0.0; batch * m * n];
        let (sa, sb) = (m * k, k * n);
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &self.data()[bi * sa..(bi + 1) * sa],
                ta,
                &other.data()[bi * sb..(bi + 1) * sb],
                tb,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        Tensor::derived(
            out,
            out_shape,
            Op::MatMul { a: self.clone(), b: other.clone(), ta, tb },
        )
    }

    /// Broadcasts to `shape` (numpy rules, aligned on trailing axes).
    pub fn expand(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let data = expand_data(self.data(), self.shape(), shape);
        Tensor::derived(data, shape.to_vec(), Op::Expand(self.clone()))
    }

    /// Sums broadcast axes away so the result has `shape`; adjoint of `expand`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let data = sum_to_data(self.data(), self.shape(), shape);
        Tensor::derived(data, shape.to_vec(), Op::SumTo(self.clone()))
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&self) -> Tensor {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        self.sum_to(&shape)
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.numel(), "reshape {:?} -> {:?}", self.shape(), shape);
        if self.shape() == shape {
            return self.clone();
        }
        let track = is_grad_enabled() && self.requires_grad();
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data: self.0.data.clone(),
            shape: shape.to_vec(),
            requires_grad: track,
            op: if track { Op::Reshape(self.clone()) } else { Op::Leaf },
        }))
    }

    /// Applies a fixed linear map to the flattened tensor; result has `shape`.
    pub fn sparse(&self, map: &Rc<SparseMap>, shape: &[usize]) -> Tensor {
        assert_eq!(map.out_len(), numel(shape), "sparse output shape {shape:?}");
        let data = map.apply(self.data());
        Tensor::derived(data, shape.to_vec(), Op::Sparse(self.clone(), map.clone()))
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let map = sparse::permute(self.shape(), perm);
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        self.sparse(&map, &shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Tensor {
        let n = self.ndim();
        assert!(n >= 2);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(&perm)
    }

    /// Selects `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total = shape[axis];
        assert!(start + len <= total, "narrow out of range");
        // The slice is the adjoint of embedding the block into the full axis.
        let map = sparse::embed_block(outer, len, inner, total, start).transposed();
        let mut out = shape.to_vec();
        out[axis] = len;
        self.sparse(&map, &out)
    }

    /// Concatenates tensors along `axis`.
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let first = parts[0].shape();
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.to_vec();
        shape[axis] = total;
        let mut start = 0;
        let mut acc: Option<Tensor> = None;
        for p in parts {
            let len = p.shape()[axis];
            let map = sparse::embed_block(outer, len, inner, total, start);
            let placed = p.sparse(&map, &shape);
            acc = Some(match acc {
                None => placed,
                Some(a) => a.add(&placed),
            });
            start += len;
        }
        acc.unwrap()
    }

    /// Gathers rows `indices` from a `[rows, cols]` tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        assert_eq!(self.ndim(), 2);
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let map = Rc::new(sparse::gather_rows(rows, cols, indices));
        self.sparse(&map, &[indices.len(), cols])
    }

    /// Picks `indices[i]` from row `i` of a `[n, k]` tensor, giving `[n]`.
    pub fn pick(&self, indices: &[usize]) -> Tensor {
        assert_eq!(self.ndim(), 2);
        let (n, k) = (self.shape()[0], self.shape()[1]);
        assert_eq!(indices.len(), n);
        let src: Vec<Option<usize>> = indices
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < k, "pick index {j} out of range {k}");
                Some(i * k + j)
            })
            .collect();
        let map = Rc::new(SparseMap::gather(n * k, &src));
        self.sparse(&map, &[n])
    }

    /// Row-wise maximum of a `[n, k]` tensor as `[n, 1]` (gradient flows to the argmax,
    /// lowest index on ties).
    pub fn max_rows(&self) -> Tensor {
        self.extreme_rows(|a, b| a > b)
    }

    /// Row-wise minimum of a `[n, k]` tensor as `[n, 1]`.
    pub fn min_rows(&self) -> Tensor {
        self.extreme_rows(|a, b| a < b)
    }

    fn extreme_rows(&self, better: impl Fn(f64, f64) -> bool) -> Tensor {
        assert_eq!(self.ndim(), 2);
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let d = self.data();
        let idx: Vec<usize> = (0..n)
            .map(|r| {
                let row = &d[r * k..(r + 1) * k];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if better(v, row[best]) {
                        best = j;
                    }
                }
                best
            })
            .collect();
        self.pick(&idx).reshape(&[n, 1])
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&self) -> Tensor {
        let n = self.ndim();
        let shift = last_axis_max(self).detach();
        let z = self.sub(&shift);
        let lse = z.exp().sum_axis(n - 1).ln();
        z.sub(&lse)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor {
        let n = self.ndim();
        let shift = last_axis_max(self).detach();
        let e = self.sub(&shift).exp();
        e.div(&e.sum_axis(n - 1))
    }
}

fn last_axis_max(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let k = *shape.last().expect("softmax on 0-d tensor");
    let rows = t.numel() / k;
    let data: Vec<f64> = t
        .data()
        .chunks(k)
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut s = shape.to_vec();
    *s.last_mut().unwrap() = 1;
    debug_assert_eq!(data.len(), rows);
    Tensor::new(data, &s)
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            if da == db || db == 1 {
                da
            } else if da == 1 {
                db
            } else {
                panic!("cannot broadcast {a:?} with {b:?}")
            }
        })
        .collect()
}

/// Strides of `small` laid out in the index space of `big`, 0 on broadcast axes.
fn aligned_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let n = big.len();
    assert!(small.len() <= n, "cannot broadcast {small:?} to {big:?}");
    let s = sparse::strides(small);
    (0..n)
        .map(|i| {
            if i + small.len() < n {
                return 0;
            }
            let j = i + small.len() - n;
            if small[j] == big[i] {
                s[j]
            } else {
                assert_eq!(small[j], 1, "cannot broadcast {small:?} to {big:?}");
                0
            }
        })
        .collect()
}

/// Walks every index of `big` in row-major order, yielding the matching offset in `small`.
fn for_each_aligned(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize)) {
    let st = aligned_strides(small, big);
    let total = numel(big);
    if total == 0 {
        return;
    }
    if big.is_empty() {
        f(0, 0);
        return;
    }
    let last = big.len() - 1;
    let inner = big[last];
    let inner_stride = st[last];
    let outer = total / inner;
    let mut idx = vec![0usize; big.len()];
    let mut pos = 0;
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            f(pos, base + j * inner_stride);
            pos += 1;
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            if idx[d] < big[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn expand_data(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; numel(to)];
    for_each_aligned(from, to, |o, i| out[o] = data[i]);
    out
}

fn sum_to_data(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; numel(to)];
    for_each_aligned(to, from, |i, o| out[o] += data[i]);
    out
}

fn matmul_dims(
    a: &[usize],
    b: &[usize],
    ta: bool,
    tb: bool,
) -> (usize, usize, usize, usize, Vec<usize>) {
    assert_eq!(a.len(), b.len(), "matmul rank mismatch {a:?} x {b:?}");
    let r = a.len();
    assert!(r == 2 || r == 3, "matmul expects 2-d or 3-d operands");
    let batch = if r == 3 {
        assert_eq!(a[0], b[0], "matmul batch mismatch {a:?} x {b:?}");
        a[0]
    } else {
        1
    };
    let (m, ka) = if ta { (a[r - 1], a[r - 2]) } else { (a[r - 2], a[r - 1]) };
    let (kb, n) = if tb { (b[r - 1], b[r - 2]) } else { (b[r - 2], b[r - 1]) };
    assert_eq!(ka, kb, "matmul inner mismatch {a:?} x {b:?} (ta={ta}, tb={tb})");
    let out = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
    (batch, m, ka, n, out)
}

#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths were checked by `matmul_dims`; strides stay in bounds.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $call:ident) => {
        impl std::ops::$trait<&Tensor> for &Tensor {
            type Output = Tensor;
            fn $method(self, rhs: &Tensor) -> Tensor {
                Tensor::$call(self, rhs)
            }
        }
        impl std::ops::$trait<Tensor> for Tensor {
            type Output = Tensor;
            fn $method(self, rhs: Tensor) -> Tensor {
                Tensor::$call(&self, &rhs)
            }
        }
        impl std::ops::$trait<&Tensor> for Tensor {
            type Output = Tensor;
            fn $method(self, rhs: &Tensor) -> Tensor {
                Tensor::$call(&self, rhs)
            }
        }
    };
}

binop!(Add, add, add);
binop!(Sub, sub, sub);
binop!(Mul, mul, mul);
binop!(Div, div, div);

impl std::ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(self)
    }
}

impl std::ops::Neg for Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(&self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcasting_add_and_sum_to() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = Tensor::new(vec![10.0, 20.0, 30.0], &[3]);
        let c = &a + &b;
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        assert_eq!(c.sum_to(&[3]).data(), &[25.0, 47.0, 69.0]);
        assert_eq!(c.sum_axis(1).data(), &[66.0, 75.0]);
        assert_eq!(c.sum().item(), 141.0);
    }

    #[test]
    fn matmul_with_transposes() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::new(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(a.matmul(&b).data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(a.matmul_t(&b, true, false).data(), &[26.0, 30.0, 38.0, 44.0]);
        assert_eq!(a.matmul_t(&b, false, true).data(), &[17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn concat_then_narrow_roundtrips() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 1, 2]);
        let b = Tensor::new(vec![5.0, 6.0, 7.0, 8.0], &[2, 1, 2]);
        let c = Tensor::concat(&[a.clone(), b], 1);
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        assert_eq!(c.narrow(1, 0, 1).data(), a.data());
    }

    #[test]
    fn log_softmax_is_shift_stable() {
        let x = Tensor::new(vec![1000.0, 1000.0], &[1, 2]);
        let l = x.log_softmax();
        for v in l.data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn no_grad_disables_tracking() {
        let p = Tensor::param(vec![1.0], &[1]);
        let q = no_grad(|| p.scale(2.0));
        assert!(!q.requires_grad());
        assert!(p.scale(2.0).requires_grad());
    }

    #[test]
    fn max_and_min_rows_pick_lowest_index_on_ties() {
        let x = Tensor::new(vec![3.0, 3.0, 1.0, 0.0, -1.0, -1.0], &[2, 3]);
        assert_eq!(x.max_rows().data(), &[3.0, 0.0]);
        assert_eq!(x.min_rows().data(), &[1.0, -1.0]);
    }
}
