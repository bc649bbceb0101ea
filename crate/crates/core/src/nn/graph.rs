use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Maps the gradient of a node's output to gradients of its parents. The
/// flags say which parents need one; `None` entries are skipped.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
    param: Option<String>,
}

/// Tape of tensor operations recorded during a forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: true,
        }
    }

    /// A forward-only graph; `backward` on it yields no gradients.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn shared(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    fn push_leaf(&mut self, value: Rc<Tensor>, needs_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: needs_grad && self.record,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Rc::new(t), false, None)
    }

    /// A non-parameter leaf whose gradient is reported by `backward`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(Rc::new(t), true, None)
    }

    /// The named parameter, shared by every use within this graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store.shared(name);
        let v = self.push_leaf(value, true, Some(name.to_string()));
        self.params.insert(name.to_string(), v);
        v
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let needs_grad = self.record && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: needs_grad.then_some(backward),
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep seeded with the given output gradients.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(g.len(), self.nodes[v.0].value.len(), "seed gradient size mismatch");
            accumulate(&mut grads[v.0], g.clone());
            top = top.max(v.0 + 1);
        }
        let mut out = Grads::default();
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.backward {
                Some(f) => {
                    let need: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].needs_grad).collect();
                    for (p, pg) in node.parents.iter().zip(f(&g, &need)) {
                        if let Some(pg) = pg {
                            if self.nodes[p.0].needs_grad {
                                accumulate(&mut grads[p.0], pg);
                            }
                        }
                    }
                }
                None => match &node.param {
                    Some(name) => {
                        out.params.insert(name.clone(), g);
                    }
                    None => {
                        out.leaves.insert(i, g);
                    }
                },
            }
        }
        out
    }

    /// Backward pass from a scalar output with unit seed.
    pub fn backward_scalar(&self, v: Var) -> Grads {
        self.backward(&[(v, Tensor::scalar(1.0))])
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(s) => s.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Grads {
    pub params: BTreeMap<String, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Grads {
    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Sum of squares over all parameter gradients.
    pub fn param_norm_sq(&self) -> f64 {
        self.params.values().flat_map(|t| &t.data).map(|v| v * v).sum()
    }

    /// Adds another gradient set into this one.
    pub fn merge(&mut self, other: Grads) {
        for (k, v) in other.params {
            match self.params.get_mut(&k) {
                Some(t) => t.add_assign(&v),
                None => {
                    self.params.insert(k, v);
                }
            }
        }
        for (k, v) in other.leaves {
            match self.leaves.get_mut(&k) {
                Some(t) => t.add_assign(&v),
                None => {
                    self.leaves.insert(k, v);
                }
            }
        }
    }
}
