use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Numeric precision of every value recorded on a tape.
///
/// `Wide` keeps full `f64`. `Narrow` rounds every forward value and every
/// gradient to `f32` and runs matrix products in single precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Wide,
    Narrow,
}

impl Precision {
    #[inline]
    pub(crate) fn round(self, data: &mut [f64]) {
        if self == Precision::Narrow {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }

    fn round_tensor(self, t: &mut Tensor) {
        if self == Precision::Narrow {
            self.round(t.data_mut());
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) tape: u64,
    pub(crate) id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
    pub name: Option<String>,
}

/// Append-only record of a forward computation.
///
/// Node ids are assigned in creation order, so every parent id is smaller
/// than its child's id and reverse id order is a valid reverse topological
/// order.
pub struct Tape {
    id: u64,
    precision: Precision,
    pub(crate) nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Precision::Wide)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            precision,
            nodes: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input. Never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Unnamed differentiable input; its gradient is available through
    /// [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Named differentiable input. Named leaves always appear in
    /// [`Gradients::named`], with zeros when they did not affect the loss.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push_leaf(value, true, Some(name.into()))
    }

    fn push_leaf(&mut self, mut value: Tensor, requires_grad: bool, name: Option<String>) -> Var {
        self.precision.round_tensor(&mut value);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            name,
        });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    pub(crate) fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        self.precision.round_tensor(&mut value);
        self.push_exact(value, op)
    }

    /// Record a value that is already representable at the tape precision.
    pub(crate) fn push_exact(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "variable {} does not belong to this tape",
                v.id
            )));
        }
        Ok(v.id)
    }

    /// Forward value of a recorded variable.
    ///
    /// Panics if `v` was recorded on another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        let id = self.check(v).expect("foreign variable");
        &self.nodes[id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.check(v).expect("foreign variable")].requires_grad
    }

    /// Estimated floating point operations recorded so far: matrix
    /// products count 2 per multiply-add, normalization and softmax count
    /// 5 per element, everything else is free.
    pub fn flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.op.flops(&self.nodes, &n.value)).sum()
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_id = self.check(loss)?;
        let loss_node = &self.nodes[loss_id];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss_id + 1];
        grads[loss_id] = Some(vec![1.0]);
        let mut leaves = BTreeMap::new();

        for id in (0..=loss_id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            self.precision.round(&mut g);
            if let Op::Leaf = node.op {
                leaves.insert(id, g);
                continue;
            }
            for (parent, contribution) in node.op.backward(&self.nodes, &node.value, &g, self.precision) {
                if !self.nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let mut names = BTreeMap::new();
        let mut by_node = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                continue;
            }
            let shape = node.value.shape().to_vec();
            let grad = match leaves.remove(&id) {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(shape),
            };
            if let Some(name) = &node.name {
                names.insert(name.clone(), id);
            }
            by_node.insert(id, grad);
        }
        Ok(Gradients {
            tape: self.id,
            names,
            by_node,
        })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    names: BTreeMap<String, usize>,
    by_node: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a named parameter.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|id| self.by_node.get(id))
    }

    /// Named gradients in name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|(name, id)| (name.as_str(), &self.by_node[id]))
    }

    pub fn len_named(&self) -> usize {
        self.names.len()
    }

    /// Gradient of any differentiable leaf, named or not.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.by_node.get(&v.id)
    }

    pub fn into_named(mut self) -> BTreeMap<String, Tensor> {
        self.names
            .into_iter()
            .filter_map(|(name, id)| self.by_node.remove(&id).map(|g| (name, g)))
            .collect()
    }
}
