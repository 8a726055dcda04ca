//! Tape-free reverse-mode differentiation.
//!
//! Every [`Var`] owns its value and, when any input requires a gradient, the
//! backward rule plus handles to its parents. Graphs built from inputs that
//! need no gradient keep nothing alive, so inference runs without a tape.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) trait Backward<T: Scalar> {
    /// Gradients for each parent, `None` where the parent needs none.
    fn backward(&self, grad_out: &Tensor<T>, parents: &[Var<T>]) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    op: Option<Box<dyn Backward<T>>>,
    param: Option<ParamId>,
}

#[derive(Clone)]
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            value: Arc::new(value),
            requires_grad,
            parents: Vec::new(),
            op: None,
            param: None,
        }))
    }

    pub(crate) fn param(value: Arc<Tensor<T>>, id: ParamId, requires_grad: bool) -> Self {
        Var(Rc::new(Node { value, requires_grad, parents: Vec::new(), op: None, param: Some(id) }))
    }

    pub(crate) fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, op: Box<dyn Backward<T>>) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Var(Rc::new(Node {
                value: Arc::new(value),
                requires_grad,
                parents,
                op: Some(op),
                param: None,
            }))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Detached copy of the value.
    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.0.value).clone()
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

/// Gradients of a scalar with respect to every leaf that required one.
pub struct Grads<T: Scalar> {
    by_node: HashMap<usize, Tensor<T>>,
    by_param: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a non-parameter leaf; `None` if it was unreachable.
    pub fn get(&self, leaf: &Var<T>) -> Option<&Tensor<T>> {
        self.by_node.get(&leaf.key())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(id, g)| (*id, g))
    }
}

fn topo_order<T: Scalar>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut seen = std::collections::HashSet::new();
    // (node, parents already pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.key()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in node.0.parents.iter().rev() {
            if p.requires_grad() && !seen.contains(&p.key()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Reverse-mode gradients of a scalar `loss`.
pub fn grad<T: Scalar>(loss: &Var<T>) -> Result<Grads<T>> {
    if loss.value().len() != 1 {
        return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", loss.shape())));
    }
    loss.value().ensure_finite("loss")?;
    let mut out = Grads { by_node: HashMap::new(), by_param: Vec::new() };
    if !loss.requires_grad() {
        return Ok(out);
    }
    let order = topo_order(loss);
    let mut pending: HashMap<usize, Tensor<T>> = HashMap::new();
    pending.insert(loss.key(), Tensor::full(loss.shape(), T::one()));
    for node in order.iter().rev() {
        let Some(g) = pending.remove(&node.key()) else { continue };
        match &node.0.op {
            Some(op) => {
                let parent_grads = op.backward(&g, &node.0.parents);
                for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    match pending.get_mut(&p.key()) {
                        Some(acc) => acc.add_assign(&pg)?,
                        None => {
                            pending.insert(p.key(), pg);
                        }
                    }
                }
            }
            None => {
                g.ensure_finite("gradient")?;
                match node.0.param {
                    Some(id) => out.by_param.push((id, g)),
                    None => {
                        out.by_node.insert(node.key(), g);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backpropagates `loss` and adds the parameter gradients into `params`.
/// Gradients accumulate across calls until [`ParamStore::zero_grad`].
pub fn backward<T: Scalar>(loss: &Var<T>, params: &mut ParamStore<T>) -> Result<()> {
    let grads = grad(loss)?;
    for (id, g) in grads.params() {
        params.accumulate_grad(id, g)?;
    }
    Ok(())
}
