use std::cell::{Ref, RefCell};

use super::tensor::{Real, Tensor};
use crate::error::{LayaError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Computes input gradients from the output gradient.
///
/// Arguments: output gradient, input values, output value, and which
/// inputs need a gradient. Returns one entry per input.
pub(crate) type BackwardFn<F> =
    Box<dyn Fn(&Tensor<F>, &[&Tensor<F>], &Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>>;

struct Node<F: Real> {
    value: Tensor<F>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<F>>,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the
/// node list is already a topological order.
///
/// A graph is single-threaded for the duration of a forward/backward
/// pass; build a fresh graph per step.
pub struct Graph<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor<F>) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Records an op. The output is checked for non-finite values.
    pub(crate) fn push_op(
        &self,
        op: &'static str,
        value: Tensor<F>,
        inputs: &[Var],
        backward: BackwardFn<F>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(LayaError::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|i| nodes[i.0].requires_grad);
        nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Identity in the forward pass; the result is a fresh leaf that
    /// never propagates gradient back to `x`.
    pub fn stop_gradient(&self, x: Var) -> Var {
        let value = self.to_tensor(x);
        self.push_leaf(value, false)
    }

    /// Runs the backward pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(LayaError::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), F::one()));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            let input_vals: Vec<&Tensor<F>> =
                node.inputs.iter().map(|&i| &nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let input_grads = backward(&grad_out, &input_vals, &node.value, &needs);
            for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(g), true) = (g, *need) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(LayaError::NonFinite { op: "backward" });
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss w.r.t. `v`; `None` when no gradient path
    /// reaches `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient or zeros of the given shape.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<F> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}
