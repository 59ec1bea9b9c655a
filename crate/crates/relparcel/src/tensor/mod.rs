//! Dense f64 tensors recorded on a tape for reverse-mode differentiation.
//!
//! Memory layout is channel-major, row-major: element `(c, h, w)` of a
//! `[C, H, W]` tensor sits at flat index `c*H*W + h*W + w`. All storage is
//! double precision.
//!
//! A [`Tape`] owns the storage of every node created on it; a [`Tensor`] is
//! a cheap handle into one tape. Operations append a node and, when any
//! input requires gradients, a backward record. [`Tape::backward`] replays
//! the records in reverse, summing contributions wherever a node feeds
//! several consumers, and accumulates results into the persistent `grad`
//! buffers of the leaves.
//!
//! A tape and its tensors are confined to one thread; independent tapes on
//! different threads do not share anything.

mod gradcheck;
mod ops;
mod suite;
#[cfg(test)]
mod op_tests;

pub use gradcheck::grad_check;
pub use ops::Activation;
pub use suite::{op_gradient_suite, SuiteResult, SUITE_STEP};

use std::cell::RefCell;

use crate::error::{Error, Result};

/// Handle to one node on a [`Tape`].
///
/// Holds only the node id and a copy of the shape; values and gradients
/// live on the tape.
#[derive(Clone, Debug)]
pub struct Tensor {
    id: usize,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }
}

/// Backward rule: `(all node values, output grad, per-node grad buffers)`.
type BackwardFn = Box<dyn Fn(&[Vec<f64>], &[f64], &mut [Vec<f64>])>;

struct Record {
    out: usize,
    backward: BackwardFn,
}

#[derive(Default)]
struct Inner {
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f64>>,
    grad: Vec<Option<Vec<f64>>>,
    requires_grad: Vec<bool>,
    has_producer: Vec<bool>,
    records: Vec<Record>,
}

/// Operation tape: node storage plus backward records in topological order.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New leaf node owning `data`.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.data.len();
        inner.shapes.push(shape.to_vec());
        inner.data.push(data);
        inner.grad.push(None);
        inner.requires_grad.push(requires_grad);
        inner.has_producer.push(false);
        Ok(Tensor { id, shape: shape.to_vec() })
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    /// Constant scalar, shape `[1]`.
    pub fn scalar(&self, v: f64) -> Tensor {
        self.leaf(vec![v], &[1], false).expect("scalar leaf")
    }

    /// Copy of the node's values.
    pub fn value(&self, t: &Tensor) -> Vec<f64> {
        self.inner.borrow().data[t.id].clone()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, t: &Tensor) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data[t.id].len(), 1);
        inner.data[t.id][0]
    }

    /// Copy of the accumulated gradient, if any backward pass has reached
    /// this node.
    pub fn grad(&self, t: &Tensor) -> Option<Vec<f64>> {
        self.inner.borrow().grad[t.id].clone()
    }

    /// Clear all accumulated gradients.
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        for g in inner.grad.iter_mut() {
            *g = None;
        }
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Visits every record exactly once in reverse topological order and
    /// accumulates `d loss / d leaf` into each leaf that requires
    /// gradients. Calling it again without [`Tape::zero_grad`] adds to the
    /// existing gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let inner = &mut *self.inner.borrow_mut();
        let n = inner.data.len();
        let mut grads: Vec<Vec<f64>> = inner.data.iter().map(|d| vec![0.0; d.len()]).collect();
        grads[loss.id][0] = 1.0;
        for rec in inner.records.iter().rev() {
            // Take the output grad out of the pool so the rule can borrow
            // the rest of the buffers mutably.
            let gout = std::mem::take(&mut grads[rec.out]);
            (rec.backward)(&inner.data, &gout, &mut grads);
            grads[rec.out] = gout;
        }
        for i in 0..n {
            if inner.requires_grad[i] && !inner.has_producer[i] {
                let len = inner.data[i].len();
                let slot = inner.grad[i].get_or_insert_with(|| vec![0.0; len]);
                for (s, g) in slot.iter_mut().zip(&grads[i]) {
                    *s += g;
                }
            }
        }
        Ok(())
    }

    /// Append an op node. Records the backward rule only when some input
    /// requires gradients.
    pub(crate) fn push_op(
        &self,
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: &[&Tensor],
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by a forward op"
        );
        let mut inner = self.inner.borrow_mut();
        let requires_grad = inputs.iter().any(|t| inner.requires_grad[t.id]);
        let id = inner.data.len();
        inner.shapes.push(shape.clone());
        inner.data.push(data);
        inner.grad.push(None);
        inner.requires_grad.push(requires_grad);
        inner.has_producer.push(true);
        if requires_grad {
            inner.records.push(Record { out: id, backward });
        }
        Tensor { id, shape }
    }

    pub(crate) fn requires_grad(&self, t: &Tensor) -> bool {
        self.inner.borrow().requires_grad[t.id]
    }

    /// Run `f` with read access to all node values.
    pub(crate) fn with_values<R>(&self, f: impl FnOnce(&[Vec<f64>]) -> R) -> R {
        f(&self.inner.borrow().data)
    }
}
