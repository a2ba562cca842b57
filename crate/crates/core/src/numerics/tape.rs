//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation on a [`Var`] appends one node holding its value and a
//! pullback closure. [`Tape::backward`] walks the nodes in reverse creation
//! order, which is a valid topological order because a node can only refer to
//! nodes created before it. Nodes whose inputs do not require gradients keep no
//! pullback, so anything behind a constant or [`Var::stop_gradient`] receives
//! exactly zero (absent) gradient.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::Tensor;
use super::NumericsError;

/// Pullback: given the gradient of the node output and a mask of which parents
/// need a gradient, return one optional gradient per parent.
pub type Pullback = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    pullback: Option<Pullback>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients from
    /// [`Tape::backward`].
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, parents: Vec::new(), pullback: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Records a custom operation. The pullback is dropped when no parent
    /// requires a gradient.
    pub fn custom<'t>(&'t self, parents: &[Var<'t>], value: Tensor, pullback: Pullback) -> Var<'t> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            pullback: if requires_grad { Some(pullback) } else { None },
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Gradients of a single-element `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, NumericsError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "backward",
                expected: vec![],
                got: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(pullback) = node.pullback.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = pullback(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &needed) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let (Some(pg), true) = (pg, needed) else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf. `None` means the gradient is exactly zero, either
    /// because the leaf does not require gradients or the loss does not
    /// depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, materializing zeros when absent.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value, detached: the pullback through the result is exactly zero.
    pub fn stop_gradient(self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    pub(crate) fn push(self, parents: &[Var<'t>], value: Tensor, pullback: Pullback) -> Var<'t> {
        self.tape.custom(parents, value, pullback)
    }
}
