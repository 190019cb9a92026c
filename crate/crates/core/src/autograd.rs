//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`]s. Nodes whose inputs
//! never require a gradient store only their value, so frozen networks pay no
//! backward bookkeeping.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(u64);

impl ParamKey {
    fn fresh() -> Self {
        ParamKey(NEXT_KEY.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named network tensor. Trainable parameters receive gradients; buffers
/// (batch-norm running statistics) do not.
pub struct Param<T: Float> {
    key: ParamKey,
    pub value: Tensor<T>,
    trainable: bool,
}

impl<T: Float> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param { key: ParamKey::fresh(), value, trainable: true }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Param { key: ParamKey::fresh(), value, trainable: false }
    }

    pub fn key(&self) -> ParamKey {
        self.key
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn cast<U: Float>(&self) -> Param<U> {
        Param { key: ParamKey::fresh(), value: self.value.cast(), trainable: self.trainable }
    }
}

// Clones are independent parameters: gradients of a copy never alias the original.
impl<T: Float> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param { key: ParamKey::fresh(), value: self.value.clone(), trainable: self.trainable }
    }
}

impl<T: Float> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("shape", &self.value.shape())
            .field("trainable", &self.trainable)
            .finish()
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamKey>,
    requires_grad: bool,
}

/// Batch statistics observed by a train-mode batch norm, applied to the
/// running averages after the step.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: ParamKey,
    pub running_var: ParamKey,
    pub momentum: f64,
    pub mean: Vec<T>,
    /// Unbiased batch variance.
    pub var: Vec<T>,
}

#[derive(Default)]
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), bn_updates: RefCell::new(Vec::new()) }
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            param: None,
            requires_grad: false,
        })
    }

    /// A leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            param: None,
            requires_grad: true,
        })
    }

    /// Bind a parameter. Buffers and frozen parameters bind as constants.
    pub fn param(&self, p: &Param<T>, trainable: bool) -> Var<'_, T> {
        let track = trainable && p.trainable;
        self.push(Node {
            value: Rc::new(p.value.clone()),
            parents: Vec::new(),
            backward: None,
            param: track.then_some(p.key),
            requires_grad: track,
        })
    }

    pub(crate) fn op<'g>(
        &'g self,
        value: Tensor<T>,
        parents: &[Var<'g, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'g, T> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
            param: None,
            requires_grad,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn record_bn(&self, update: BnUpdate<T>) {
        self.bn_updates.borrow_mut().push(update);
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        let mut out = Gradients { params: HashMap::new(), inputs: HashMap::new() };

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Some(key) = node.param {
                match out.params.get_mut(&key) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.params.insert(key, g);
                    }
                }
                continue;
            }
            let Some(backward) = &node.backward else {
                out.inputs.insert(id, g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }
}

impl<'g, T: Float> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.value().dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }

    pub fn item(&self) -> T {
        self.value().item()
    }
}

/// Gradients produced by [`Graph::backward`], keyed by parameter identity.
pub struct Gradients<T: Float> {
    params: HashMap<ParamKey, Tensor<T>>,
    inputs: HashMap<usize, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.params.get(&p.key)
    }

    pub fn input(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.inputs.get(&v.id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|g| g.all_finite())
    }

    pub fn global_norm(&self) -> f64 {
        // Sorted keys keep the float reduction order reproducible.
        let mut keys: Vec<_> = self.params.keys().copied().collect();
        keys.sort();
        keys.iter()
            .map(|k| self.params[k].data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = T::from_f64_lossy(max_norm / (norm + 1e-6));
            for g in self.params.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
        norm
    }
}
