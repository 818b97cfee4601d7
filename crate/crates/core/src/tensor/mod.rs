//! Dense N-d tensor with reverse-mode gradient accumulation.
//!
//! Tensors form an implicit graph: every op output keeps handles to its
//! inputs plus a closure that maps the output gradient to input gradients.
//! The graph lives only as long as the output tensors and is discarded
//! after `backward`.

mod check;
mod io;
mod ops;

pub use check::grad_check;
pub use io::{read_tensor, write_tensor};

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub trait Element:
    num_traits::Float + std::iter::Sum + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = Cell::new(0);
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Gradient rule of a recorded op: (out_grad, out_data, parents).
pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E], &[E], &[Tensor<E>])>;

struct Node<E: Element> {
    parents: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    /// Leaf marker: gradients are retained here across backward calls.
    requires_grad: bool,
    /// True if a gradient has to flow through this tensor at all.
    needs_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
    op: Option<Node<E>>,
}

pub struct Tensor<E: Element> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    fn new(data: Vec<E>, shape: Vec<usize>, requires_grad: bool, op: Option<Node<E>>) -> Self {
        debug_assert_eq!(data.len(), numel_of(&shape));
        let needs_grad = requires_grad
            || op
                .as_ref()
                .map(|n| n.parents.iter().any(|p| p.inner.needs_grad))
                .unwrap_or(false);
        // Drop the op record entirely when nothing upstream wants gradients.
        let op = if needs_grad { op } else { None };
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                needs_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel_of(shape) {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::new(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor that accumulates gradients (a parameter or probed input).
    pub fn param(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel_of(shape) {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::new(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![E::zero(); numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Self::new(vec![v; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(v: E) -> Self {
        Self::new(vec![v], vec![1], false, None)
    }

    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        Self::new(data, shape, false, Some(Node { parents, backward }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place data replacement; used by the optimizer on leaf parameters.
    pub fn set_data(&self, data: Vec<E>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Shape(format!(
                "set_data length {} vs numel {}",
                data.len(),
                self.numel()
            )));
        }
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    pub fn map_data_mut(&self, f: impl FnMut(&mut E)) {
        self.inner.data.borrow_mut().iter_mut().for_each(f);
    }

    /// Constant copy with no graph history.
    pub fn detach(&self) -> Tensor<E> {
        Self::new(self.to_vec(), self.inner.shape.clone(), false, None)
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    pub(crate) fn accumulate_grad(&self, delta: &[E]) {
        if !self.inner.needs_grad {
            return;
        }
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(delta) {
                    *a = *a + *b;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate
    /// across repeated calls; interior gradients are transient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.inner.shape
            )));
        }
        // Collect every reachable recorded node.
        let mut seen: HashMap<u64, Tensor<E>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.contains_key(&t.inner.id) {
                continue;
            }
            if let Some(node) = &t.inner.op {
                for p in &node.parents {
                    stack.push(p.clone());
                }
            }
            seen.insert(t.inner.id, t);
        }
        // ids are assigned in execution order, so descending id order is a
        // reverse topological order: inputs always precede their outputs.
        let mut order: Vec<Tensor<E>> = seen.into_values().collect();
        order.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        self.accumulate_grad(&[E::one()]);
        if self.inner.op.is_none() && !self.inner.requires_grad {
            return Ok(());
        }
        for t in order {
            let Some(node) = &t.inner.op else { continue };
            let grad = t.inner.grad.borrow_mut().take();
            let Some(grad) = grad else { continue };
            let data = t.inner.data.borrow();
            (node.backward)(&grad, &data, &node.parents);
        }
        Ok(())
    }
}
