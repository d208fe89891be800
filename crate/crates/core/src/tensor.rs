//! Dense row-major f64 tensors with shared storage.
//!
//! A `Tensor` is a cheap handle: cloning it aliases the same buffer, which is
//! how child networks borrow their layers from the shared kernel bank. The
//! gradient buffer lives next to the data and is filled in by
//! [`crate::tape::Tape::backward`].

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{KforgeError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Shared n-dimensional array of f64 values.
#[derive(Clone, Debug)]
pub struct Tensor {
    id: u64,
    inner: Rc<RefCell<Inner>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(KforgeError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} does not hold {} values", shape, data.len()),
            });
        }
        Ok(Tensor {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                requires_grad: false,
                grad: None,
            })),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("zeros shape")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value]).expect("scalar")
    }

    /// A trainable parameter (participates in gradient accumulation).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    /// Stable identity of the underlying storage (optimizer state key).
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1);
        inner.data[0]
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.borrow_mut().requires_grad = value;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Add `delta` into the gradient buffer, allocating it on first use.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(delta.len(), inner.data.len());
        match inner.grad.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => inner.grad = Some(delta.to_vec()),
        }
    }

    /// Take the gradient out of the tensor, leaving it empty.
    pub(crate) fn take_grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow_mut().grad.take()
    }

    /// Multiply the gradient buffer in place (gradient clipping).
    pub(crate) fn scale_grad(&self, factor: f64) {
        if let Some(g) = self.inner.borrow_mut().grad.as_mut() {
            for v in g {
                *v *= factor;
            }
        }
    }

    /// Mutate the raw values in place (optimizer steps, running stats).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.inner.borrow_mut().data)
    }

    /// Replace the values with `data` of identical length.
    pub fn copy_from(&self, data: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len());
        inner.data.copy_from_slice(data);
    }

    /// Deep copy with fresh storage (snapshots for best-epoch tracking).
    pub fn detached_clone(&self) -> Tensor {
        let inner = self.inner.borrow();
        let t = Tensor::from_vec(&inner.shape, inner.data.clone()).expect("clone");
        t.set_requires_grad(inner.requires_grad);
        t
    }
}
