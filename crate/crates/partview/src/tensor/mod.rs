//! Dense 64-bit float tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to a row-major `f64` buffer. Operations on
//! a [`Tape`] eagerly compute values and record how to route gradients back;
//! [`Tape::backward`] then walks the recording in reverse. Each backward call
//! accumulates additively into the `grad` buffer of every tensor with
//! `requires_grad`, so two calls without a reset double every gradient.
//!
//! A tape is confined to one thread; tensors detached from a live tape are
//! plain value buffers.

mod gradcheck;
mod kernels;
mod ops;
mod tape;

pub use gradcheck::{grad_check, GradCheckItem, GradCheckReport};
pub use tape::Tape;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

struct TensorInner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Shared handle to an n-dimensional `f64` array. Cloning is cheap and
/// aliases the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorInner>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} does not describe a buffer of {} values", data.len()),
            ));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape,
                data,
                grad: None,
                requires_grad: false,
            })),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: valid shape")
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("full: valid shape")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    /// Marks the tensor as a gradient sink and returns it.
    pub fn requires_grad(self) -> Tensor {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.inner.borrow_mut().requires_grad = on;
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Value copy with the same shape that never records on a tape.
    pub fn detached(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::new(inner.shape.clone(), inner.data.clone()).expect("detached")
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

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1, "item() on non-scalar");
        inner.data[0]
    }

    pub fn value_at(&self, flat_index: usize) -> f64 {
        self.inner.borrow().data[flat_index]
    }

    /// Overwrites the buffer in place; shape must be unchanged.
    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data: length mismatch");
        inner.data.copy_from_slice(data);
    }

    pub fn nudge(&self, flat_index: usize, delta: f64) {
        self.inner.borrow_mut().data[flat_index] += delta;
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    pub(crate) fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// In-place SGD-style update; panics if the tensor is attached to a live
    /// tape borrow (never the case between steps).
    pub fn apply_update(&self, f: impl FnMut(usize, &mut f64)) {
        let mut inner = self.inner.borrow_mut();
        let mut f = f;
        for (i, v) in inner.data.iter_mut().enumerate() {
            f(i, v);
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(f, "Tensor{:?}", inner.shape)?;
        if inner.data.len() <= 8 {
            write!(f, " {:?}", inner.data)?;
        }
        Ok(())
    }
}

/// Named learnable tensor; names are unique within a model and key the
/// checkpoint index.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Parameter {
        tensor.set_requires_grad(true);
        Parameter {
            name: name.into(),
            tensor,
        }
    }
}
