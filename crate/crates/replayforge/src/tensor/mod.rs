//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to a shape + contiguous row-major buffer.
//! Operations live on [`Graph`], which records a tape during the forward pass
//! and replays it in reverse for [`Graph::backward`]. The tape is rebuilt for
//! every training step; nothing is reused across steps.

mod checkpoint;
mod graph;
mod optim;

pub use checkpoint::{load_tensors, save_tensors};
pub use graph::Graph;
pub use optim::Optimizer;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward: loss must be a scalar, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("backward: loss tensor is not attached to this graph")]
    DetachedGraph,
    #[error("optimizer: parameter {index} has no gradient")]
    MissingGrad { index: usize },
    #[error("checkpoint: bad magic (expected \"RFTN\")")]
    CheckpointMagic,
    #[error("checkpoint: truncated or malformed file: {0}")]
    CheckpointTruncated(String),
    #[error("checkpoint: io: {0}")]
    CheckpointIo(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

struct TensorInner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Shared handle to an n-dimensional f64 array.
///
/// Cloning a `Tensor` clones the handle, not the buffer; use
/// [`Tensor::deep_clone`] for an independent copy.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorInner>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(TensorError::Invalid {
                op: "new",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "new",
                detail: format!(
                    "shape {shape:?} implies {numel} elements, got {}",
                    data.len()
                ),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::from_parts(vec![1], vec![value], false)
    }

    /// Standard-normal entries.
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| StandardNormal.sample(rng)).collect();
        Self::from_parts(shape.to_vec(), data, false)
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_parts(shape.to_vec(), data, false)
    }

    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape,
                data,
                requires_grad,
                grad: None,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |t| t.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> f64 {
        let b = self.inner.borrow();
        debug_assert_eq!(b.data.len(), 1, "scalar_value on non-scalar tensor");
        b.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Marks the tensor as a trainable leaf and returns it.
    pub fn with_grad(self) -> Tensor {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn set_requires_grad(&self, requires: bool) {
        self.inner.borrow_mut().requires_grad = requires;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut b = self.inner.borrow_mut();
        let n = b.data.len();
        match &mut b.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            none => *none = Some(vec![0.0; n]),
        }
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut b = self.inner.borrow_mut();
        let n = b.data.len();
        debug_assert_eq!(n, delta.len());
        let g = b.grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Replaces the buffer contents; shape must match.
    pub fn copy_from(&self, data: &[f64]) {
        let mut b = self.inner.borrow_mut();
        assert_eq!(b.data.len(), data.len(), "copy_from: length mismatch");
        b.data.copy_from_slice(data);
    }

    pub fn fill(&self, value: f64) {
        self.inner
            .borrow_mut()
            .data
            .iter_mut()
            .for_each(|v| *v = value);
    }

    /// In-place update used by optimizers; `f(value, grad)` per element.
    pub(crate) fn update_with_grad(&self, mut f: impl FnMut(&mut f64, f64, usize)) {
        let mut b = self.inner.borrow_mut();
        let inner = &mut *b;
        let g = inner.grad.as_ref().expect("update_with_grad: missing grad");
        for (i, (v, gi)) in inner.data.iter_mut().zip(g.iter()).enumerate() {
            f(v, *gi, i);
        }
    }

    /// Independent copy of shape + data; grad is not copied.
    pub fn deep_clone(&self) -> Tensor {
        let b = self.inner.borrow();
        Self::from_parts(b.shape.clone(), b.data.clone(), b.requires_grad)
    }

    /// Identity of the underlying buffer; used as the tape key.
    pub(crate) fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn same_buffer(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let b = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &b.shape)
            .field("requires_grad", &b.requires_grad)
            .finish()
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
