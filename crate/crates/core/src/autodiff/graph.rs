//! Dynamic tape over whole-array operations.
//!
//! Every op appends one node holding its output value plus whatever it needs
//! for the backward pass. `backward` walks the nodes in exact reverse order.

use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Softplus,
    Exp,
    Neg,
    Relu,
}

/// Coarse op classification, used for backward-order tracing and fault
/// injection in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    Binary,
    Unary,
    Affine,
    Sum,
    LayerNorm,
    DepthwiseConv,
    Linear,
    Dropout,
    MaxPool,
    Relax,
    CfcScan,
    EulerScan,
    FocalLoss,
    IouLoss,
}

pub(crate) enum Op<F> {
    Leaf,
    Param(ParamId),
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Affine {
        x: Var,
        scale: F,
    },
    Sum {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relax {
        x: Var,
        s: Var,
        alpha: Var,
    },
    CfcScan {
        x: Var,
        s: Var,
        alpha: Var,
    },
    EulerScan {
        x: Var,
        s: Var,
        lambda: Var,
        dt: F,
        substeps: usize,
    },
    FocalLoss {
        logits: Var,
        targets: Vec<F>,
        weights: Vec<F>,
        alpha: F,
        gamma: F,
    },
    IouLoss {
        offsets: Var,
        targets: Vec<F>,
        weights: Vec<F>,
    },
}

impl<F> Op<F> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::Binary { .. } => OpKind::Binary,
            Op::Unary { .. } => OpKind::Unary,
            Op::Affine { .. } => OpKind::Affine,
            Op::Sum { .. } => OpKind::Sum,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::DepthwiseConv { .. } => OpKind::DepthwiseConv,
            Op::Linear { .. } => OpKind::Linear,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Relax { .. } => OpKind::Relax,
            Op::CfcScan { .. } => OpKind::CfcScan,
            Op::EulerScan { .. } => OpKind::EulerScan,
            Op::FocalLoss { .. } => OpKind::FocalLoss,
            Op::IouLoss { .. } => OpKind::IouLoss,
        }
    }
}

pub(crate) struct Node<F> {
    pub(crate) value: DenseArray<F>,
    pub(crate) op: Op<F>,
}

/// Recorded computation. One graph per forward pass (or per batch of
/// forward passes sharing a loss).
pub struct Graph<F> {
    pub(crate) nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    pub(crate) grad_enabled: bool,
    consumed: bool,
    fault: Option<(OpKind, F)>,
    trace: Option<Vec<usize>>,
}

/// Gradients produced by [`Graph::backward`], keyed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub(crate) by_param: Vec<(ParamId, DenseArray<F>)>,
    pub(crate) leaves: HashMap<Var, DenseArray<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&DenseArray<F>> {
        self.by_param.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn input(&self, v: Var) -> Option<&DenseArray<F>> {
        self.leaves.get(&v)
    }

    /// Adds every parameter gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) -> Result<()> {
        for (id, g) in &self.by_param {
            store.get_mut(*id).grad.add_assign(g)?;
        }
        Ok(())
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            consumed: false,
            fault: None,
            trace: None,
        }
    }

    /// A graph that skips backward-only caches. `backward` fails on it.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Non-differentiable-through constant or differentiable input leaf.
    pub fn input(&mut self, value: DenseArray<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a parameter; repeated calls within one graph reuse the node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub(crate) fn push(&mut self, value: DenseArray<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_checked(&mut self, value: DenseArray<F>, op: Op<F>, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        Ok(self.push(value, op))
    }

    /// Test hook: multiplies every input gradient produced by ops of `kind`
    /// by `factor`, simulating a broken backward rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind, factor: F) {
        self.fault = Some((kind, factor));
    }

    /// Records the node index of every op visited by the next `backward`.
    pub fn trace_backward(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn backward_trace(&self) -> Option<&[usize]> {
        self.trace.as_deref()
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.grad_enabled {
            return Err(Error::invalid("backward() on an inference graph"));
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar_like() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<DenseArray<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseArray::full(loss_value.shape(), F::one()));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            if let Some(trace) = self.trace.as_mut() {
                trace.push(idx);
            }
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(grad);
                    continue;
                }
                _ => {}
            }
            let mut contributions = super::ops::backward_rule(&self.nodes, idx, &grad)?;
            if let Some((kind, factor)) = self.fault {
                if node.op.kind() == kind {
                    for (_, g) in contributions.iter_mut() {
                        g.data_mut().iter_mut().for_each(|v| *v = *v * factor);
                    }
                }
            }
            for (target, g) in contributions {
                match grads[target.0].as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => grads[target.0] = Some(g),
                }
            }
        }

        let mut by_param = Vec::new();
        let mut leaves = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some(g) = grads[idx].take() else { continue };
            match node.op {
                Op::Param(id) => by_param.push((id, g)),
                Op::Leaf => {
                    leaves.insert(Var(idx), g);
                }
                _ => {}
            }
        }
        by_param.sort_by_key(|(id, _)| *id);
        Ok(Gradients { by_param, leaves })
    }

    /// `backward` followed by accumulation into the parameter store.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store)
    }
}
