//! Reverse-mode differentiation over a dynamic tape.
//!
//! A [`Tape`] records every differentiable operation applied to tracked
//! [`Var`]s, together with a closure that maps the output gradient to input
//! gradients. [`Tape::backward`] replays the record in reverse.
//!
//! ```
//! use mmrinet::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new([2], vec![-1.0, 2.0])?);
//! let loss = tape.sum(&tape.relu(&x));
//! let grads = tape.backward(&loss)?;
//! assert_eq!(grads.get(&x).unwrap().data(), &[0.0, 1.0]);
//! # Ok::<(), mmrinet::Error>(())
//! ```
//!
//! A tape built with [`Tape::no_grad`] records nothing; intermediate values are
//! freed as soon as the caller drops them.

mod ops;

pub use ops::BatchStats;

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Scalar> {
    name: &'static str,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    enabled: bool,
}

/// A value on a tape. Cloning is cheap; the tensor is shared.
#[derive(Clone)]
pub struct Var<T: Scalar = f32> {
    value: Arc<Tensor<T>>,
    id: Option<usize>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(id={:?}, {:?})", self.id, self.value)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` is untracked
    /// or does not influence the loss.
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.id.and_then(|i| self.grads.get(i)).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but with zeros for a disconnected tracked variable.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<Tensor<T>> {
        v.id.and_then(|i| self.grads.get_mut(i)).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            enabled: true,
        }
    }

    /// A tape that tracks nothing; every op returns an untracked value.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            enabled: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A tracked input (parameter or differentiable input).
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        self.leaf_shared(Arc::new(value))
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>) -> Var<T> {
        if !self.enabled {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            name: "leaf",
            parents: Vec::new(),
            backward: None,
        });
        Var {
            value,
            id: Some(nodes.len() - 1),
        }
    }

    /// An untracked value.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            value: Arc::new(value),
            id: None,
        }
    }

    pub fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var<T> {
        Var { value, id: None }
    }

    /// Record an operation with a hand-written backward rule.
    ///
    /// `backward` receives the gradient of the output and, for each input,
    /// whether that input needs a gradient; it returns one optional gradient
    /// per input with the input's shape.
    pub fn custom<F>(&self, name: &'static str, value: Tensor<T>, inputs: &[&Var<T>], backward: F) -> Var<T>
    where
        F: FnOnce(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        let value = Arc::new(value);
        if !self.enabled || inputs.iter().all(|v| v.id.is_none()) {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            name,
            parents: inputs.iter().map(|v| v.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            value,
            id: Some(nodes.len() - 1),
        }
    }

    /// Back-propagate from a scalar `loss`. The recorded closures are consumed,
    /// so a tape can be differentiated once.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let root = loss.id.ok_or_else(|| {
            Error::Backward("loss was not produced by recorded operations on this tape".into())
        })?;
        if loss.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        if root >= nodes.len() {
            return Err(Error::Backward("loss belongs to a different tape".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(loss.shape()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].as_ref() else { continue };
            let node = &mut nodes[id];
            if node.parents.is_empty() {
                continue;
            }
            let backward = node.backward.take().ok_or_else(|| {
                Error::Backward(format!("node {id} ({}) was already differentiated", node.name))
            })?;
            let need: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let input_grads = backward(g, &need)?;
            let name = node.name;
            for (parent, ig) in node.parents.clone().into_iter().zip(input_grads) {
                let (Some(p), Some(ig)) = (parent, ig) else { continue };
                match &mut grads[p] {
                    Some(acc) => {
                        if acc.shape() != ig.shape() {
                            return Err(Error::Backward(format!(
                                "{name}: gradient shape {:?} does not match input {:?}",
                                ig.shape(),
                                acc.shape()
                            )));
                        }
                        acc.add_assign(&ig);
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untracked_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(&c), Err(Error::Backward(_))));
        let x = tape.leaf(Tensor::ones([3]));
        assert!(tape.backward(&x).is_err(), "non-scalar loss");
    }

    #[test]
    fn gradients_accumulate_over_fanout() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([2], vec![1.5, -2.0]).unwrap());
        let y = tape.mul(&x, &x).unwrap();
        let z = tape.add(&y, &x).unwrap();
        let g = tape.backward(&tape.sum(&z)).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[4.0, -3.0]);
    }

    #[test]
    fn zero_scaled_loss_gives_zero_gradients() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([3], vec![0.3, -1.0, 2.0]).unwrap());
        let loss = tape.scale(&tape.sum(&tape.sigmoid(&x)), 0.0);
        let g = tape.backward(&loss).unwrap();
        assert!(g.get(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.leaf(Tensor::ones([4]));
        let y = tape.relu(&x);
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }
}
