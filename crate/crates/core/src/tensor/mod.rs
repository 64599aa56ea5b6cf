//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Tensors are cheap handles (`Rc`) around immutable value buffers; an
//! explicit [`Tape`] records operations during a forward pass and replays
//! them in reverse to accumulate gradients. There is no implicit global
//! graph: inference runs simply use a disabled tape.

mod batchnorm;
mod conv;
mod loss;
mod ops;
mod tape;

pub use batchnorm::{batch_norm, RunningStats};
pub use conv::{conv2d, global_avg_pool, max_pool2d};
pub use loss::cross_entropy;
pub use tape::Tape;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner<T> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<T>>>,
}

/// An n-dimensional array of `T` with optional gradient accumulation.
///
/// Values are written once by the producing operation; gradients accumulate
/// into a same-shape buffer during the tape's backward pass.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::invalid_shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::new_unchecked(shape.to_vec(), data))
    }

    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new_unchecked(shape.to_vec(), vec![T::zero(); numel])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new_unchecked(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: T) -> Self {
        Self::new_unchecked(vec![], vec![value])
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, yes: bool) {
        self.inner.requires_grad.set(yes);
    }

    /// Builder form of [`set_requires_grad`](Self::set_requires_grad).
    pub fn with_grad(self) -> Self {
        self.set_requires_grad(true);
        self
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// A new tensor with the same values and no gradient history.
    pub fn detach(&self) -> Tensor<T> {
        Self::new_unchecked(self.inner.shape.clone(), self.to_vec())
    }

    /// Accumulate an elementwise contribution into the gradient buffer.
    pub(crate) fn acc_grad_slice(&self, contrib: &[T]) {
        debug_assert_eq!(contrib.len(), self.numel());
        let mut g = self.inner.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![T::zero(); self.numel()]);
        for (b, c) in buf.iter_mut().zip(contrib) {
            *b += *c;
        }
    }

    /// Accumulate via direct access to the gradient buffer (for scatter-style
    /// backward rules).
    pub(crate) fn acc_grad_with(&self, f: impl FnOnce(&mut [T])) {
        let mut g = self.inner.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![T::zero(); self.numel()]);
        f(buf);
    }

    /// Borrow the gradient slice, if present. Backward rules use this to
    /// read the upstream cotangent without copying it.
    pub(crate) fn grad_ref(&self) -> Option<Ref<'_, [T]>> {
        let b = self.inner.grad.borrow();
        if b.is_some() {
            Some(Ref::map(b, |o| o.as_deref().unwrap()))
        } else {
            None
        }
    }

    /// Convert values elementwise to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .data()
            .iter()
            .map(|v| U::from_f64(v.as_f64()))
            .collect();
        Tensor::new_unchecked(self.inner.shape.clone(), data)
    }
}

pub(crate) fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid_shape(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
