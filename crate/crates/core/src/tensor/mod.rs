//! Dense rank-4 tensors with reverse-mode automatic differentiation.
//!
//! Every value flowing through the system is a [`Tensor`]: a contiguous
//! row-major `(n, c, h, w)` buffer plus an optional gradient and a handle to
//! the operation that produced it. Primitives build the graph as they run;
//! [`Tensor::backward`] walks it in reverse topological order and accumulates
//! gradients into every reachable tensor that requires them.
//!
//! Training uses `f32`; the same code instantiates with `f64` for the
//! finite-difference verification mode used by the gradient-check suites.

mod conv;
mod ops;
mod param;

pub use ops::softmax_cross_entropy;
pub use param::{ParamEntry, ParamStore};

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

/// Scalar element of a tensor. Implemented for `f32` (training) and `f64`
/// (gradient verification).
pub trait Element:
    num_traits::Float
    + ndarray::LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoint tensor records.
    const DTYPE_TAG: u8;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE_TAG: u8 = 0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE_TAG: u8 = 1;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// Shape of a rank-4 tensor: batch, channels, rows, cols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat offset of `(n, c, h, w)` in row-major order, `w` innermost.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Border handling for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PaddingMode {
    /// Pad with zeros.
    Zero(usize),
    /// Repeat the edge pixel. Used by the fixed-kernel gradient layers so
    /// image borders do not register as traces.
    Replicate(usize),
}

impl PaddingMode {
    pub fn amount(&self) -> usize {
        match self {
            PaddingMode::Zero(p) | PaddingMode::Replicate(p) => *p,
        }
    }
}

/// Training vs. inference behaviour for stateful layers (batch norm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: AtomicBool = const { AtomicBool::new(false) };
}

/// Runs `f` without recording the autodiff graph. Forward results are
/// identical; they are just not differentiable. Used by inference paths.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    NO_GRAD.with(|flag| {
        let prev = flag.swap(true, Ordering::Relaxed);
        let out = f();
        flag.store(prev, Ordering::Relaxed);
        out
    })
}

fn grad_suppressed() -> bool {
    NO_GRAD.with(|flag| flag.load(Ordering::Relaxed))
}

pub(crate) struct Inner<E: Element> {
    id: u64,
    dims: Dims,
    data: RwLock<Vec<E>>,
    grad: RwLock<Option<Vec<E>>>,
    requires_grad: bool,
    op: ops::Op<E>,
}

/// A rank-4 tensor value. Cloning is cheap (shared storage); the optimizer
/// and batch-norm running statistics mutate storage in place through the
/// shared handle.
pub struct Tensor<E: Element = f32> {
    pub(crate) inner: Arc<Inner<E>>,
}

/// The concrete training-precision tensor.
pub type Tensor4 = Tensor<f32>;

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("dims", &self.inner.dims)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

/// Chunk length for deterministic parallel elementwise work. Fixed so the
/// reduction structure (and therefore the float result) does not depend on
/// the thread count.
pub(crate) const PAR_CHUNK: usize = 16_384;

pub(crate) fn all_finite<E: Element>(data: &[E]) -> bool {
    use rayon::prelude::*;
    if data.len() <= PAR_CHUNK {
        data.iter().fold(true, |ok, v| ok & v.is_finite())
    } else {
        data.par_chunks(PAR_CHUNK)
            .all(|chunk| chunk.iter().fold(true, |ok, v| ok & v.is_finite()))
    }
}

impl<E: Element> Tensor<E> {
    fn from_parts(dims: Dims, data: Vec<E>, requires_grad: bool, op: ops::Op<E>) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                dims,
                data: RwLock::new(data),
                grad: RwLock::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// A leaf tensor from raw data. Rejects length mismatches and non-finite
    /// values.
    pub fn from_vec(dims: Dims, data: Vec<E>) -> Result<Self> {
        if data.len() != dims.count() {
            return Err(Error::shape(
                "from_vec",
                format!("data length {} does not match dims {}", data.len(), dims),
            ));
        }
        if !all_finite(&data) {
            return Err(Error::Numeric { op: "from_vec" });
        }
        Ok(Self::from_parts(dims, data, false, ops::Op::Leaf))
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::from_parts(dims, vec![E::zero(); dims.count()], false, ops::Op::Leaf)
    }

    pub fn full(dims: Dims, value: E) -> Result<Self> {
        Self::from_vec(dims, vec![value; dims.count()])
    }

    pub fn scalar(value: E) -> Result<Self> {
        Self::from_vec(Dims::new(1, 1, 1, 1), vec![value])
    }

    /// Marks a leaf tensor as a gradient sink. Only valid on leaves; graph
    /// outputs get their tracking from their inputs.
    pub fn requires_grad(self) -> Self {
        assert!(
            matches!(self.inner.op, ops::Op::Leaf),
            "requires_grad can only be set on leaf tensors"
        );
        let dims = self.inner.dims;
        let data = self.inner.data.read().expect("lock").clone();
        Self::from_parts(dims, data, true, ops::Op::Leaf)
    }

    /// Result of an operation. Verifies the produced values are finite so a
    /// numeric blow-up surfaces at its source instead of downstream.
    pub(crate) fn from_op(dims: Dims, data: Vec<E>, op_name: &'static str, op: ops::Op<E>) -> Result<Self> {
        debug_assert_eq!(data.len(), dims.count());
        if !all_finite(&data) {
            return Err(Error::Numeric { op: op_name });
        }
        let op = if grad_suppressed() || !op.tracks() {
            ops::Op::Leaf
        } else {
            op
        };
        Ok(Self::from_parts(dims, data, false, op))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn dims(&self) -> Dims {
        self.inner.dims
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Whether gradients flow through this tensor.
    pub(crate) fn tracks(&self) -> bool {
        self.inner.requires_grad || !matches!(self.inner.op, ops::Op::Leaf)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<E>> {
        self.inner.data.read().expect("lock")
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data().clone()
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        let d = self.inner.dims;
        self.data()[d.offset(n, c, h, w)]
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.inner.dims.count() != 1 {
            return Err(Error::Usage(format!(
                "item() requires a scalar tensor, got dims {}",
                self.inner.dims
            )));
        }
        Ok(self.data()[0])
    }

    /// Overwrites the stored values in place (optimizer step, checkpoint
    /// load). The shape is fixed; non-finite values are rejected.
    pub fn set_data(&self, data: &[E]) -> Result<()> {
        if data.len() != self.inner.dims.count() {
            return Err(Error::shape(
                "set_data",
                format!(
                    "data length {} does not match dims {}",
                    data.len(),
                    self.inner.dims
                ),
            ));
        }
        if !all_finite(data) {
            return Err(Error::Numeric { op: "set_data" });
        }
        self.inner.data.write().expect("lock").copy_from_slice(data);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.read().expect("lock").clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.write().expect("lock") = None;
    }

    fn accumulate_grad(&self, delta: &[E]) {
        let mut guard = self.inner.grad.write().expect("lock");
        match guard.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *guard = Some(delta.to_vec()),
        }
    }

    /// A leaf copy of this tensor: same values, no graph, no grad tracking.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.inner.dims, self.to_vec(), false, ops::Op::Leaf)
    }

    /// Reverse-mode differentiation from a scalar output.
    ///
    /// Gradients of all reachable `requires_grad` tensors are accumulated
    /// (`+=`) into their grad buffers; call [`Tensor::clear_grad`] or
    /// [`ParamStore::zero_grads`] between steps.
    pub fn backward(&self) -> Result<()> {
        if self.inner.dims.count() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar output, got dims {}",
                self.inner.dims
            )));
        }

        let order = self.topo_order();
        // Per-pass gradients live in a side table so repeated backward calls
        // accumulate correctly into persistent grads without double counting
        // through intermediates.
        let mut pass: HashMap<u64, Vec<E>> = HashMap::new();
        pass.insert(self.inner.id, vec![E::one()]);

        for node in order.iter().rev() {
            let Some(out_grad) = pass.remove(&node.inner.id) else {
                continue;
            };
            if node.inner.requires_grad {
                node.accumulate_grad(&out_grad);
            }
            ops::backprop(&node.inner, &out_grad, &mut pass)?;
        }
        Ok(())
    }

    /// Post-order over the graph reachable from `self`; parents come after
    /// all of their inputs.
    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // Iterative DFS; (node, expanded) pairs.
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.inner.id) {
                continue;
            }
            let children = node.inner.op.inputs();
            stack.push((node, true));
            for child in children {
                if child.tracks() && !visited.contains(&child.inner.id) {
                    stack.push((child, false));
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length_and_finiteness() {
        let dims = Dims::new(1, 1, 2, 2);
        assert!(Tensor::<f32>::from_vec(dims, vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::<f32>::from_vec(dims, vec![1.0, 2.0, f32::NAN, 4.0]),
            Err(Error::Numeric { .. })
        ));
        assert!(Tensor::<f32>::from_vec(dims, vec![1.0; 4]).is_ok());
    }

    #[test]
    fn offsets_are_row_major_w_innermost() {
        let d = Dims::new(2, 3, 4, 5);
        assert_eq!(d.offset(0, 0, 0, 0), 0);
        assert_eq!(d.offset(0, 0, 0, 1), 1);
        assert_eq!(d.offset(0, 0, 1, 0), 5);
        assert_eq!(d.offset(0, 1, 0, 0), 20);
        assert_eq!(d.offset(1, 0, 0, 0), 60);
        assert_eq!(d.offset(1, 2, 3, 4), 119);
    }

    #[test]
    fn backward_on_non_scalar_is_usage_error() {
        let x = Tensor::<f32>::from_vec(Dims::new(1, 1, 1, 2), vec![1.0, 2.0])
            .unwrap()
            .requires_grad();
        assert!(matches!(x.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn grad_of_sum_is_ones_and_accumulates() {
        let x = Tensor::<f32>::from_vec(Dims::new(1, 2, 2, 1), vec![1.0, -2.0, 0.5, 3.0])
            .unwrap()
            .requires_grad();
        let y = x.sum_all().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
        // Second pass accumulates.
        let y2 = x.sum_all().unwrap();
        y2.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 4]);
        x.clear_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn grad_of_square_sum_is_two_x() {
        let vals = vec![1.0f32, -2.0, 0.5, 3.0];
        let x = Tensor::<f32>::from_vec(Dims::new(1, 1, 2, 2), vals.clone())
            .unwrap()
            .requires_grad();
        let y = x.mul(&x).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        let grad = x.grad().unwrap();
        for (g, v) in grad.iter().zip(&vals) {
            assert_eq!(*g, 2.0 * v);
        }
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::<f32>::from_vec(Dims::new(1, 1, 1, 2), vec![1.0, 2.0])
            .unwrap()
            .requires_grad();
        let y = no_grad(|| x.relu().unwrap());
        assert!(!y.tracks());
        let z = x.relu().unwrap();
        assert!(z.tracks());
    }
}
