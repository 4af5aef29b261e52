//! Reverse-mode tape.
//!
//! Every tracked value owns one slot on the tape; operators append a node
//! whose closure scatters the upstream gradient into the gradients of its
//! inputs. `backward` walks ids in strictly decreasing order, which is exactly
//! reverse execution order, so accumulation order is fixed and runs are
//! reproducible. One tape per thread; tensors without a tape handle may be
//! shared freely.

use std::cell::RefCell;
use std::rc::Rc;

use super::{Real, Result, Tensor, TensorError};

/// Backward closure: receives the accumulated gradient of its output value
/// and adds contributions into the input slots through [`GradStore`].
type BackFn<F> = Box<dyn Fn(&[F], &mut GradStore<F>)>;

struct Node<F: Real> {
    len: usize,
    backward: Option<BackFn<F>>,
}

pub(crate) struct TapeInner<F: Real> {
    nodes: Vec<Node<F>>,
}

/// Gradient buffers indexed by value id, allocated lazily on first touch.
pub struct GradStore<F: Real> {
    bufs: Vec<Option<Vec<F>>>,
    lens: Vec<usize>,
}

impl<F: Real> GradStore<F> {
    /// Mutable gradient buffer for value `id`, zero-initialized on demand.
    pub fn slot(&mut self, id: usize) -> &mut [F] {
        if self.bufs[id].is_none() {
            self.bufs[id] = Some(vec![F::ZERO; self.lens[id]]);
        }
        self.bufs[id].as_mut().unwrap()
    }
}

/// Cheap cloneable handle to a tape. `Rc` keeps it single-threaded by
/// construction, matching the one-tape-per-thread concurrency model.
pub struct Tape<F: Real> {
    inner: Rc<RefCell<TapeInner<F>>>,
}

impl<F: Real> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    pub fn same_tape(&self, other: &Tape<F>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a value with no backward rule (a leaf). Gradients accumulate
    /// into its slot but propagate no further.
    pub fn leaf(&self, t: &Tensor<F>) -> Tensor<F> {
        let id = self.push(t.len(), None);
        t.clone().with_node(self.clone(), id)
    }

    pub(crate) fn push(&self, len: usize, backward: Option<BackFn<F>>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { len, backward });
        inner.nodes.len() - 1
    }

    /// Run reverse accumulation from a scalar loss. Returns every gradient
    /// buffer that was touched; look leaves up by their tensor handle.
    pub fn backward(&self, loss: &Tensor<F>) -> Result<Grads<F>> {
        if loss.len() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", loss.shape()),
            });
        }
        let loss_id = match loss.node_id() {
            Some(id) => id,
            None => {
                return Err(TensorError::Contract {
                    op: "backward",
                    detail: "loss is not on the tape".into(),
                })
            }
        };
        let inner = self.inner.borrow();
        let lens: Vec<usize> = inner.nodes.iter().map(|n| n.len).collect();
        let mut store = GradStore {
            bufs: vec![None; inner.nodes.len()],
            lens,
        };
        store.slot(loss_id)[0] = F::ONE;
        for id in (0..=loss_id).rev() {
            // Take the buffer out: inputs of node `id` always have smaller
            // ids, so the closure never touches slot `id` again.
            let Some(grad) = store.bufs[id].take() else {
                continue;
            };
            if let Some(back) = inner.nodes[id].backward.as_ref() {
                back(&grad, &mut store);
            }
            store.bufs[id] = Some(grad);
        }
        Ok(Grads { bufs: store.bufs })
    }
}

/// Result of a backward pass.
pub struct Grads<F: Real> {
    bufs: Vec<Option<Vec<F>>>,
}

impl<F: Real> Grads<F> {
    /// Gradient of the loss w.r.t. a tracked tensor; `None` when no gradient
    /// reached it (which for a tracked tensor means the gradient is zero).
    pub fn get(&self, t: &Tensor<F>) -> Option<&[F]> {
        let id = t.node_id()?;
        self.bufs.get(id).and_then(|b| b.as_deref())
    }

    pub fn get_id(&self, id: usize) -> Option<&[F]> {
        self.bufs.get(id).and_then(|b| b.as_deref())
    }

    /// Gradient as an owned Vec, zeros when untouched.
    pub fn take_or_zeros(&mut self, t: &Tensor<F>) -> Vec<F> {
        match t.node_id().and_then(|id| self.bufs.get_mut(id)) {
            Some(slot) => slot.take().unwrap_or_else(|| vec![F::ZERO; t.len()]),
            None => vec![F::ZERO; t.len()],
        }
    }
}

/// Resolve the common tape of an operation's inputs. Errors if two inputs are
/// tracked on different tapes.
pub(crate) fn common_tape<F: Real>(
    op: &'static str,
    inputs: &[&Tensor<F>],
) -> Result<Option<Tape<F>>> {
    let mut found: Option<Tape<F>> = None;
    for t in inputs {
        if let Some(tape) = t.tape() {
            match &found {
                None => found = Some(tape.clone()),
                Some(existing) if existing.same_tape(tape) => {}
                Some(_) => return Err(TensorError::TapeMismatch { op }),
            }
        }
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap());
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn leaf_gradient_of_constant_is_absent() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let y = tape.leaf(&Tensor::scalar(5.0));
        let grads = tape.backward(&y).unwrap();
        assert!(grads.get(&x).is_none());
        assert_eq!(grads.get(&y).unwrap(), &[1.0]);
    }
}
