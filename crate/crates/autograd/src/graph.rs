//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one computation (typically one training step).  Each
//! op appends a node holding the forward value plus a closure that maps the
//! incoming gradient to parent gradients.  [`Graph::backward`] walks the tape
//! in reverse, accumulating gradients only along paths that reach a trainable
//! leaf and freeing interior gradients as soon as they have been consumed.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// grad wrt output, parent values, output value, per-parent "gradient
/// needed" flags -> per-parent gradients (None where not needed).
pub(crate) type BackwardFn =
    Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

pub(crate) struct Node {
    pub value: Tensor,
    pub parents: Vec<usize>,
    pub backward: Option<BackwardFn>,
    pub needs_grad: bool,
    pub is_leaf: bool,
}

/// Gradients for the leaves of one backward pass, keyed by [`Var`].
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_node.get(&var.0)
    }
}

pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    recording: bool,
    bound: Vec<(ParamId, Var)>,
    bound_index: HashMap<usize, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph: ops store backward closures, `backward` works.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            bound: Vec::new(),
            bound_index: HashMap::new(),
        }
    }

    /// A forward-only graph: values are computed, nothing is differentiable.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The forward value of `var`.
    pub fn val(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Adds a differentiable leaf (gradient retained after `backward`).
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = self.recording && tensor.requires_grad();
        self.push_node(tensor, Vec::new(), None, needs, true)
    }

    /// Adds a non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_node(tensor, Vec::new(), None, false, true)
    }

    /// Binds a stored parameter as a differentiable leaf.  Repeated calls
    /// with the same id return the same var, so shared weights accumulate
    /// gradients from every use site.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&var) = self.bound_index.get(&id.0) {
            return var;
        }
        let var = self.leaf(store.get(id).clone());
        self.bound.push((id, var));
        self.bound_index.insert(id.0, var);
        var
    }

    /// Binds a stored parameter as a constant (no gradient), e.g. for
    /// target networks.
    pub fn param_frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    /// Parameters bound via [`Graph::param`], in binding order.
    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.bound
    }

    pub(crate) fn push_node(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        needs_grad: bool,
        is_leaf: bool,
    ) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents,
            backward,
            needs_grad,
            is_leaf,
        });
        Var(idx)
    }

    /// Appends an op node.  When not recording, or when no parent needs a
    /// gradient, the closure is dropped and backward will skip the node.
    pub(crate) fn op(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        backward: BackwardFn,
    ) -> Var {
        let parent_idx: Vec<usize> = parents.iter().map(|v| v.0).collect();
        let needs = self.recording && parent_idx.iter().any(|&p| self.nodes[p].needs_grad);
        let back = if needs { Some(backward) } else { None };
        self.push_node(value, parent_idx, back, needs, false)
    }

    /// Reverse pass from a scalar loss; returns gradients for all
    /// differentiable leaves reached (missing leaves simply have no entry).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: "graph was built in inference mode".into(),
            });
        }
        let loss_val = self.val(loss);
        if !loss_val.is_scalar() {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: loss_val.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::ones(loss_val.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if node.is_leaf {
                continue;
            }
            let Some(back) = node.backward.as_ref() else {
                grads[idx] = None;
                continue;
            };
            // Interior gradient is consumed here and freed immediately.
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].needs_grad)
                .collect();
            let parent_grads = back(&grad_out, &parent_vals, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (slot, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[*slot].needs_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[*slot].value.shape());
                match &mut grads[*slot] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    empty => *empty = Some(pg),
                }
            }
        }

        let mut by_node = HashMap::new();
        for (idx, grad) in grads.into_iter().enumerate() {
            if let Some(g) = grad {
                if self.nodes[idx].is_leaf {
                    by_node.insert(idx, g);
                }
            }
        }
        Ok(Gradients { by_node })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_simple_chain() {
        // loss = mean((x * y) + y) with x, y scalars.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0).with_requires_grad());
        let y = g.leaf(Tensor::scalar(4.0).with_requires_grad());
        let xy = g.mul(x, y).unwrap();
        let s = g.add(xy, y).unwrap();
        let loss = g.mean_all(s);
        assert_eq!(g.val(loss).item().unwrap(), 16.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 4.0);
        assert_eq!(grads.get(y).unwrap().item().unwrap(), 3.0 + 1.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0).with_requires_grad());
        let c = g.constant(Tensor::scalar(5.0));
        let p = g.mul(x, c).unwrap();
        let loss = g.mean_all(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 5.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn inference_graph_rejects_backward() {
        let mut g = Graph::inference();
        let x = g.leaf(Tensor::scalar(2.0).with_requires_grad());
        let loss = g.mean_all(x);
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3]).with_requires_grad());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shared_param_binding_accumulates() {
        use crate::params::ParamStore;
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let w1 = g.param(&store, id);
        let w2 = g.param(&store, id);
        assert_eq!(w1, w2);
        // loss = w * w => dloss/dw = 2w = 6.
        let sq = g.mul(w1, w2).unwrap();
        let loss = g.mean_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w1).unwrap().item().unwrap(), 6.0);
    }
}
