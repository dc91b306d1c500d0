use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Everything a backward rule may look at.
pub(crate) struct BackwardCtx<'a> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a Tensor,
    pub inputs: &'a [Rc<Tensor>],
    pub output: &'a Tensor,
    /// Which inputs need a gradient; rules may skip the others.
    pub needs: &'a [bool],
}

type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    leaf: bool,
}

/// Records operations in creation order, which is a topological order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    finished: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&v.id)
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.remove(&v.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            finished: Cell::new(false),
        }
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input (a parameter or a value we want gradients for).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            leaf: true,
        })
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push_node(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            leaf: true,
        })
    }

    /// Records an operation. The backward rule is dropped when no parent needs a gradient.
    pub(crate) fn push<'t, F>(&'t self, value: Tensor, parents: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&BackwardCtx) -> Vec<Option<Tensor>> + 'static,
    {
        debug_assert!(
            parents.iter().all(|p| std::ptr::eq(p.tape, self)),
            "mixed tapes"
        );
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(Node {
            value: Rc::new(value),
            parents: if requires_grad {
                parents.iter().map(|p| p.id).collect()
            } else {
                Vec::new()
            },
            backward,
            requires_grad,
            leaf: false,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of `f32` values currently held by recorded nodes.
    pub fn live_values(&self) -> usize {
        self.nodes.borrow().iter().map(|n| n.value.len()).sum()
    }

    /// Drops all records so the tape can be reused.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.finished.set(false);
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// May be called once per recording; afterwards every intermediate value
    /// is released and only leaves and the loss keep their values.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.finished.get() {
            return Err(Error::Autograd(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        let mut out = Gradients::default();
        {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.len() != 1 {
                return Err(Error::Autograd(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    root.value.shape()
                )));
            }
            let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
            grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
            for i in (0..=loss.id).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &nodes[i];
                if node.leaf {
                    if node.requires_grad {
                        out.grads.insert(i, g);
                    }
                    continue;
                }
                let Some(rule) = &node.backward else { continue };
                let inputs: Vec<Rc<Tensor>> = node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].value.clone())
                    .collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect();
                let ctx = BackwardCtx {
                    grad: &g,
                    inputs: &inputs,
                    output: &node.value,
                    needs: &needs,
                };
                for (k, pg) in rule(&ctx).into_iter().enumerate() {
                    let (Some(pg), true) = (pg, needs[k]) else {
                        continue;
                    };
                    let p = node.parents[k];
                    debug_assert_eq!(
                        pg.len(),
                        nodes[p].value.len(),
                        "gradient size for parent {p}"
                    );
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        let empty = Rc::new(Tensor::zeros(&[0]));
        for (i, node) in self.nodes.borrow_mut().iter_mut().enumerate() {
            node.backward = None;
            if !node.leaf && i != loss.id {
                node.value = empty.clone();
            }
        }
        self.finished.set(true);
        Ok(out)
    }
}
