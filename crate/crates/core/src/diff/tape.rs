//! Tensor-level reverse-mode tape.
//!
//! Every operation on a [`Var`] appends a node holding a closure that maps the
//! output gradient to input gradients. [`Tape::backward`] walks the nodes in
//! reverse creation order, which is a valid topological order because nodes
//! only reference earlier ids.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Maps the output gradient to one optional gradient per parent. The `need`
/// slice flags which parents are tracked so expensive terms can be skipped.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    tracked: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// A recording of differentiable operations. Cheap to clone (shared handle).
///
/// Not `Send`: one tape belongs to one thread. Distinct tapes are independent.
pub struct Tape<T: Real = f64> {
    nodes: Rc<RefCell<Vec<Node<T>>>>,
}

impl<T: Real> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// A leaf whose gradient can be requested.
    pub fn var(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(Arc::new(value), true)
    }

    /// A leaf excluded from gradient flow.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(Arc::new(value), false)
    }

    pub(crate) fn leaf(&self, value: Arc<Tensor<T>>, tracked: bool) -> Var<T> {
        let id = self.push_node(Node {
            tracked,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self.clone(),
            id,
            value,
            tracked,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Records the result of an operation over `inputs`. The backward closure
    /// is dropped when no input is tracked.
    pub(crate) fn record(
        &self,
        inputs: &[&Var<T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var<T> {
        self.record_rc(inputs, Arc::new(value), backward)
    }

    pub(crate) fn record_rc(
        &self,
        inputs: &[&Var<T>],
        value: Arc<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Var<T> {
        debug_assert!(inputs.iter().all(|v| v.tape.same_as(self)));
        let tracked = inputs.iter().any(|v| v.tracked);
        let node = if tracked {
            Node {
                tracked,
                parents: inputs.iter().map(|v| v.id).collect(),
                backward: Some(backward),
            }
        } else {
            Node {
                tracked,
                parents: Vec::new(),
                backward: None,
            }
        };
        let id = self.push_node(node);
        Var {
            tape: self.clone(),
            id,
            value,
            tracked,
        }
    }

    pub(crate) fn same_as(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Propagates d(objective)/d(node) to every tracked node on the tape.
    pub fn backward(&self, objective: &Var<T>) -> Result<Gradients<T>> {
        if !objective.tape.same_as(self) {
            return Err(Error::DetachedInput);
        }
        if !objective.value.is_scalar() {
            return Err(Error::NonScalar(objective.value.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        if objective.tracked {
            grads[objective.id] = Some(Tensor::full(objective.value.shape().to_vec(), T::one()));
        }
        for id in (0..=objective.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            let need: Vec<bool> = node.parents.iter().map(|&p| nodes[p].tracked).collect();
            let parent_grads = backward(g, &need);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &needed) in node.parents.iter().zip(parent_grads).zip(&need) {
                let (Some(pg), true) = (pg, needed) else {
                    continue;
                };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // Interior gradients are no longer needed once propagated.
            if !node.parents.is_empty() {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            tape: self.clone(),
            grads,
        })
    }
}

/// A tensor value recorded on a tape.
#[derive(Clone)]
pub struct Var<T: Real = f64> {
    tape: Tape<T>,
    id: usize,
    value: Arc<Tensor<T>>,
    tracked: bool,
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .field("tracked", &self.tracked)
            .finish()
    }
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    /// Whether gradients flow into this value.
    pub fn requires_grad(&self) -> bool {
        self.tracked
    }

    /// Same values, excluded from further gradient flow.
    pub fn detach(&self) -> Var<T> {
        self.tape.leaf(Arc::clone(&self.value), false)
    }
}

/// Gradients of one objective with respect to all tracked tape leaves.
pub struct Gradients<T: Real> {
    tape: Tape<T>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// d(objective)/d(wrt), zeros when `wrt` did not influence the objective.
    pub fn wrt(&self, wrt: &Var<T>) -> Result<Tensor<T>> {
        if !wrt.tracked || !wrt.tape.same_as(&self.tape) {
            return Err(Error::DetachedInput);
        }
        Ok(self
            .grads
            .get(wrt.id)
            .cloned()
            .flatten()
            .unwrap_or_else(|| Tensor::zeros(wrt.shape().to_vec())))
    }

    /// Moves the gradient out, avoiding a copy.
    pub fn take(&mut self, wrt: &Var<T>) -> Result<Tensor<T>> {
        if !wrt.tracked || !wrt.tape.same_as(&self.tape) {
            return Err(Error::DetachedInput);
        }
        Ok(self
            .grads
            .get_mut(wrt.id)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(wrt.shape().to_vec())))
    }
}

/// ∂objective/∂wrt for a scalar objective.
pub fn grad<T: Real>(objective: &Var<T>, wrt: &Var<T>) -> Result<Tensor<T>> {
    if !wrt.tracked || !wrt.tape.same_as(&objective.tape) {
        return Err(Error::DetachedInput);
    }
    objective.tape.backward(objective)?.wrt(wrt)
}

/// Same values as `t`, excluded from gradient flow.
pub fn detach<T: Real>(t: &Var<T>) -> Var<T> {
    t.detach()
}
