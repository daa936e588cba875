use std::cell::RefCell;
use std::rc::Rc;

use super::{Scalar, Tensor};

/// Backward rule: given the output gradient, produce one optional gradient per parent.
/// `needs[i]` tells whether parent `i` wants a gradient; rules may skip work for the others.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Linear record of executed ops. Node ids are assigned in execution order, so
/// every op's inputs precede it and a single reverse sweep is a valid
/// topological traversal.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input or parameter.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Rc::new(value), requires_grad, Vec::new(), None)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(
        &self,
        value: Rc<Tensor<T>>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert!(
            value.all_finite() || parents.iter().any(|&p| !nodes[p].value.all_finite()),
            "non-finite value produced from finite inputs"
        );
        let id = nodes.len();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var { tape: self, id }
    }

    /// Record the result of a custom op. The backward rule is kept only when
    /// some parent requires a gradient; it must return one entry per parent.
    pub fn op<'t>(
        &'t self,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids = parents.iter().map(|p| p.id).collect();
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(Rc::new(value), requires_grad, ids, backward)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from `root`, seeded with ones. Each recorded op is
    /// visited at most once.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape().to_vec()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad_out, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Interior gradients were consumed above; leaves have no backward
        // rule, so theirs are still in place.
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// First element; intended for scalar losses.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }
}
