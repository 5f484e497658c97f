use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, TensorError, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bindings {
        Bindings(self.values.iter().map(|v| graph.leaf(v.clone(), trainable)).collect())
    }

    /// Overwrites values from `other`, which must carry the same names and
    /// shapes in the same order.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(TensorError::InvalidArgument {
                op: "assign_from",
                reason: format!("expected {} parameters, found {}", self.len(), other.len()),
            });
        }
        for i in 0..self.len() {
            if self.names[i] != other.names[i] {
                return Err(TensorError::InvalidArgument {
                    op: "assign_from",
                    reason: format!("parameter {i}: expected `{}`, found `{}`", self.names[i], other.names[i]),
                });
            }
            if self.values[i].shape() != other.values[i].shape() {
                return Err(TensorError::GradientShape {
                    param: self.names[i].clone(),
                    expected: self.values[i].shape().to_vec(),
                    got: other.values[i].shape().to_vec(),
                });
            }
        }
        self.values.clone_from(&other.values);
        Ok(())
    }
}

/// Graph handles for a bound [`ParamStore`], indexed by [`ParamId`].
pub struct Bindings(Vec<Var>);

impl Bindings {
    /// Wraps graph handles laid out in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients of every bound parameter after `graph.backward`.
    pub fn grads(&self, graph: &Graph) -> Vec<Tensor> {
        self.0
            .iter()
            .map(|&v| graph.grad(v).unwrap_or_else(|| Tensor::zeros(graph.shape(v))))
            .collect()
    }
}

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Parameter initializers.
pub struct Init;

impl Init {
    /// Uniform Glorot initialization for a `[fan_in, fan_out]` matrix.
    pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        Tensor { shape: vec![fan_in, fan_out], data }
    }

    pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        Tensor { shape: shape.to_vec(), data }
    }
}
