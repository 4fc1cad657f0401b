//! Define-by-run tape. Every forward op appends a node holding its value and
//! a gradient rule; `backward` replays the nodes in reverse insertion order,
//! which is a valid reverse topological order because an op's inputs always
//! exist before the op itself.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::autodiff::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// What a gradient rule sees when it runs.
pub(crate) struct BackwardCtx<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [Rc<Tensor<T>>],
    pub output: &'a Tensor<T>,
    /// Which inputs need a gradient; rules may skip the others.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Recording of one forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<String, usize>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &node.op)
            .field("shape", &node.value.shape())
            .finish()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// Tape for inference: parameters are recorded as constants, so no
    /// gradient rules are retained.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that never receives a gradient (images, labels-as-data).
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            op: "constant",
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad: false,
            backward: None,
        })
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            op: "variable",
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad: self.grad_enabled,
            backward: None,
        })
    }

    /// Leaf for a named model parameter. Repeated requests for the same name
    /// return the same node, so shared parameters accumulate one gradient.
    pub fn parameter(&self, store: &ParamStore<T>, name: &str) -> Result<Var<'_, T>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let param = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let var = self.push(Node {
            op: "parameter",
            value: Rc::new(param.value.clone()),
            inputs: Vec::new(),
            requires_grad: self.grad_enabled,
            backward: None,
        });
        self.params.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    /// Makes later `parameter(_, name)` lookups resolve to `var`.
    pub fn bind(&self, name: &str, var: Var<'_, T>) -> Result<()> {
        if !std::ptr::eq(var.tape as *const Tape<T> as *const u8, self as *const Tape<T> as *const u8) {
            return Err(Error::InvalidArgument("variable belongs to a different tape".into()));
        }
        if self.params.borrow().contains_key(name) {
            return Err(Error::InvalidArgument(format!("parameter `{name}` already bound")));
        }
        self.params.borrow_mut().insert(name.to_string(), var.id);
        Ok(())
    }

    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        self.push(Node {
            op,
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        })
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::InvalidShape {
                op: "backward",
                reason: format!("loss must be scalar, got shape {:?}", root.value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor<T>>> =
                node.inputs.iter().map(|&i| nodes[i].value.clone()).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[input].value.shape(), "{}", node.op);
                match &mut grads[input] {
                    Some(acc) => acc.accumulate(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Leaves keep their gradient; intermediate ones are released.
        }
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(name, &id)| (name.clone(), id))
            .collect();
        Ok(Grads { grads, params })
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }
}

/// Result of a backward sweep.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<String, usize>,
}

impl<T: Real> Grads<T> {
    /// Gradient for a leaf created with `variable` or `parameter`.
    pub fn wrt(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradients keyed by parameter name for every parameter in `store`.
    /// Parameters that were not on any path to the loss get zeros.
    pub fn by_name(&self, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        store
            .iter()
            .map(|p| {
                let g = self
                    .params
                    .get(&p.name)
                    .and_then(|&id| self.grads[id].clone())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
                (p.name.clone(), g)
            })
            .collect()
    }
}
