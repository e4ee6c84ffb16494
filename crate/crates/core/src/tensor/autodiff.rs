use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{Matrix, Scalar};
use crate::error::{Error, Result};

/// Gradient rule: receives the upstream gradient, the parent tensors and the
/// node's own forward value; returns one optional gradient per parent.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Matrix<T>, &[Tensor<T>], &Matrix<T>) -> Vec<Option<Matrix<T>>>>;

struct Backward<T: Scalar> {
    parents: Vec<Tensor<T>>,
    rule: BackwardFn<T>,
}

struct Node<T: Scalar> {
    value: RefCell<Matrix<T>>,
    grad: RefCell<Option<Matrix<T>>>,
    requires_grad: bool,
    backward: Option<Backward<T>>,
}

/// A matrix-valued node in a dynamically built computation graph.
///
/// Cloning is cheap (reference counted). The graph lives as long as the
/// root tensor, so every forward pass builds a fresh tape.
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &*self.value())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Untracked constant.
    pub fn constant(value: Matrix<T>) -> Self {
        Self::leaf(value, false)
    }

    /// Trainable leaf whose gradient is accumulated by [`Tensor::backward`].
    pub fn parameter(value: Matrix<T>) -> Self {
        Self::leaf(value, true)
    }

    pub fn scalar(value: T, requires_grad: bool) -> Self {
        Self::leaf(Matrix::scalar(value), requires_grad)
    }

    fn leaf(value: Matrix<T>, requires_grad: bool) -> Self {
        Self(Rc::new(Node {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            backward: None,
        }))
    }

    /// Creates the output node of an operation. The rule is dropped when no
    /// parent is tracked.
    pub(crate) fn from_op(value: Matrix<T>, parents: Vec<Tensor<T>>, rule: BackwardFn<T>) -> Self {
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let backward = requires_grad.then(|| Backward { parents, rule });
        Self(Rc::new(Node {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            backward,
        }))
    }

    #[inline]
    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn value(&self) -> Ref<'_, Matrix<T>> {
        self.0.value.borrow()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.value.borrow().shape()
    }

    pub fn item(&self) -> Result<T> {
        self.value().item()
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Matrix<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Replaces the data of a leaf in place (optimizer updates).
    pub fn update(&self, f: impl FnOnce(&mut Matrix<T>)) {
        debug_assert!(self.is_leaf(), "only leaves may be updated in place");
        f(&mut self.0.value.borrow_mut());
    }

    /// Same data, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.value().clone())
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node<T> {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a 1x1 root. Gradients of tracked leaves are
    /// added to whatever they already hold.
    pub fn backward(&self) -> Result<()> {
        let (rows, cols) = self.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Post-order DFS gives a topological order (parents before children).
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashMap<*const Node<T>, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.insert(t.key(), ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(bw) = &t.0.backward {
                for p in &bw.parents {
                    if p.requires_grad() && !visited.contains_key(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<*const Node<T>, Matrix<T>> = HashMap::new();
        grads.insert(self.key(), Matrix::scalar(T::one()));
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => *slot = Some(g),
                    }
                }
                Some(bw) => {
                    let value = node.0.value.borrow();
                    let parent_grads = (bw.rule)(&g, &bw.parents, &value);
                    debug_assert_eq!(parent_grads.len(), bw.parents.len());
                    for (p, pg) in bw.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), p.shape());
                        match grads.get_mut(&p.key()) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                grads.insert(p.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
