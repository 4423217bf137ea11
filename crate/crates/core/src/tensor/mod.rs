//! Dense row-major tensors with a reverse-mode gradient record.
//!
//! A [`Tensor`] is a cheap handle (reference counted) to an immutable value.
//! Operations on tensors that require gradients record their inputs and a
//! vector-Jacobian product closure; [`Tensor::backward`] rebuilds the
//! execution order from those records (see [`GradTape`]) and replays it in
//! reverse.
//!
//! Everything runs on the calling thread with reductions evaluated in a fixed
//! sequential order, so repeated runs are bitwise identical.

mod ops;
mod tape;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

pub use ops::BinaryOp;
pub use tape::GradTape;

/// Scalar element type of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const NAME: &'static str;

    fn erf(self) -> Self;

    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }
}

#[inline]
pub(crate) fn cst<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static MACS: Cell<u64> = const { Cell::new(0) };
    static ATTENTION_MACS: Cell<u64> = const { Cell::new(0) };
    static IN_ATTENTION: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` without recording any gradient history.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Multiply-accumulate counters for matmul contractions executed on this thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCount {
    pub total: u64,
    /// Part of `total` spent in attention score / value contractions.
    pub attention: u64,
}

pub fn reset_mac_counter() {
    MACS.with(|m| m.set(0));
    ATTENTION_MACS.with(|m| m.set(0));
}

pub fn mac_counter() -> MacCount {
    MacCount {
        total: MACS.with(|m| m.get()),
        attention: ATTENTION_MACS.with(|m| m.get()),
    }
}

pub(crate) fn count_macs(n: u64) {
    MACS.with(|m| m.set(m.get() + n));
    if IN_ATTENTION.with(|a| a.get()) {
        ATTENTION_MACS.with(|m| m.set(m.get() + n));
    }
}

/// Attributes matmuls executed inside `f` to the attention bucket of [`MacCount`].
pub fn attention_scope<R>(f: impl FnOnce() -> R) -> R {
    let prev = IN_ATTENTION.with(|a| a.replace(true));
    let out = f();
    IN_ATTENTION.with(|a| a.set(prev));
    out
}

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

pub(crate) struct Record<T: Element> {
    pub(crate) name: &'static str,
    pub(crate) parents: Vec<Tensor<T>>,
    /// Maps the output gradient to one gradient per parent (`None` for parents
    /// that do not require gradients).
    pub(crate) backward: BackwardFn<T>,
}

pub(crate) struct Node<T: Element> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<T>>,
    pub(crate) grad: RefCell<Option<Vec<T>>>,
    pub(crate) requires_grad: bool,
    pub(crate) record: Option<Record<T>>,
}

/// Dense N-dimensional array.
pub struct Tensor<T: Element = f64>(pub(crate) Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite<T: Element>(data: &[T], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Element> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            record: None,
        }))
    }

    /// Builds a constant tensor. Fails when `data` does not fill `shape` or holds NaN/Inf.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            ));
        }
        check_finite(&data, "from_vec")?;
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Builds a trainable leaf.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        let node = Rc::try_unwrap(t.0).ok().expect("fresh tensor is uniquely owned");
        Ok(Self::leaf(node.shape, node.data.into_inner(), true))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| cst(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(Vec::new(), vec![v], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![T::zero(); numel(shape)], false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![T::one(); numel(shape)], false)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::leaf(shape.to_vec(), vec![v; numel(shape)], false)
    }

    /// Standard-normal constant tensor.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                cst(v)
            })
            .collect();
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Wraps the result of an operation, recording its backward closure when
    /// any parent requires gradients and recording is enabled.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: &[&Tensor<T>],
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len());
        check_finite(&data, name)?;
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let record = track.then(|| Record {
            name,
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            backward: Box::new(backward) as BackwardFn<T>,
        });
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: track,
            record,
        })))
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
        self.0.record.is_none()
    }

    /// Creation sequence number; strictly increasing in execution order.
    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Name of the operation that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.record.as_ref().map(|r| r.name)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the values of a leaf in place (optimizer steps, checkpoint loads).
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return shape_err(format!(
                "set_data on shape {:?} with {} elements",
                self.shape(),
                data.len()
            ));
        }
        check_finite(&data, "set_data")?;
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    /// Mutates the values of a leaf in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) -> Result<()> {
        let mut d = self.0.data.borrow_mut();
        f(&mut d);
        check_finite(&d, "update_data")
    }

    /// Copy of the values with no gradient history.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.to_vec(), false)
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }
}
