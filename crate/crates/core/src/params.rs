//! Named trainable parameters with their optimizer moments.

use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    /// First and second moment estimates, same length as `data`.
    pub(crate) first_moment: Vec<S>,
    pub(crate) second_moment: Vec<S>,
}

/// Ordered registry of parameters. Registration order is the order in which
/// initial values are drawn and the order of checkpoint arrays.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<S>) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::config(name, "parameter registered twice"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("register", shape, &[data.len()]));
        }
        self.params.push(Param {
            name: name.to_owned(),
            shape: shape.to_vec(),
            data,
            first_moment: vec![S::zero(); n],
            second_moment: vec![S::zero(); n],
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Copies every parameter into `graph` as a leaf. With `trainable` the
    /// leaves collect gradients; otherwise they are constants.
    pub fn bind(&self, graph: &mut Graph<S>, trainable: bool) -> Result<Bindings> {
        let nodes = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    graph.variable(&p.shape, p.data.clone())
                } else {
                    graph.constant(&p.shape, p.data.clone())
                }
            })
            .collect::<Result<_>>()?;
        Ok(Bindings { nodes })
    }

    /// Gradients of all parameters after a backward pass, in registration
    /// order; zeros for parameters the loss did not reach.
    pub fn gradients(&self, graph: &Graph<S>, bindings: &Bindings) -> Vec<Vec<S>> {
        bindings.nodes.iter().map(|&id| graph.grad_or_zeros(id)).collect()
    }

    /// Flat copy of every parameter value, registration order.
    pub fn flatten(&self) -> Vec<S> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    /// Overwrites all values from a flat vector produced by [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::shape("assign_flat", &[self.numel()], &[flat.len()]));
        }
        let mut at = 0;
        for p in &mut self.params {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

/// Graph nodes holding the parameters of one forward pass.
#[derive(Clone, Debug)]
pub struct Bindings {
    nodes: Vec<NodeId>,
}

impl Index<ParamId> for Bindings {
    type Output = NodeId;

    fn index(&self, id: ParamId) -> &NodeId {
        &self.nodes[id.0]
    }
}

/// Deterministic parameter initializer: fan-in scaled uniform weights,
/// zero biases.
pub struct Initializer {
    rng: ChaCha20Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    pub fn fan_in_uniform<S: Scalar>(&mut self, n: usize, fan_in: usize) -> Vec<S> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        (0..n).map(|_| S::of(self.rng.gen_range(-bound..bound))).collect()
    }

    pub fn weight<S: Scalar>(
        &mut self,
        store: &mut ParamStore<S>,
        name: &str,
        shape: &[usize],
        fan_in: usize,
    ) -> Result<ParamId> {
        let data = self.fan_in_uniform(shape.iter().product(), fan_in);
        store.register(name, shape, data)
    }

    pub fn bias<S: Scalar>(&mut self, store: &mut ParamStore<S>, name: &str, len: usize) -> Result<ParamId> {
        store.register(name, &[len], vec![S::zero(); len])
    }
}
