use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};

/// Operation with a hand-written backward rule, recorded on a [`Tape`].
///
/// `backward` returns one optional gradient buffer per input, each with the
/// length of that input. Inputs whose `needs` flag is false may be skipped.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

pub(crate) struct Node {
    pub(crate) value: Arc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Define-by-run record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
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

    /// Differentiable input.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, false)
    }

    /// Leaf sharing storage with a parameter store.
    pub fn shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a custom operation whose forward value was computed by the caller.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, op: Box<dyn CustomOp>) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.any_requires_grad(&ids);
        self.push(Arc::new(value), Op::Custom { inputs: ids, op }, rg)
    }

    pub(crate) fn push(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn any_requires_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Every node is visited once, in reverse recording order; gradients of
    /// interior nodes are released as soon as they have been propagated.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        assert!(std::ptr::eq(loss.tape, self), "loss recorded on another tape");
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let out = &nodes[loss.id];
        if out.value.len() != 1 {
            return Err(Error::domain(
                "backward",
                format!("loss must have one element, got shape {:?}", out.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if !out.requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let inputs = node.op.inputs();
            let needs: Vec<bool> = inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let contribs = node.op.backward(&nodes, &node.value, &g, &needs);
            debug_assert_eq!(contribs.len(), inputs.len());
            for ((&input, contrib), need) in inputs.iter().zip(contribs).zip(&needs) {
                let Some(c) = contrib else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(c.len(), nodes[input].value.len(), "grad size for {}", node.op.name());
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient with respect to `var` (zero-filled if `var` did not influence the loss).
    pub fn get(&self, var: Var<'_>) -> Tensor {
        let shape = var.shape();
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the raw gradient buffer out, `None` if `var` did not influence the loss.
    pub fn take(&mut self, var: Var<'_>) -> Option<Vec<f64>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
