use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Precision, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How a parameter was (or will be) initialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn {
        fan_in: usize,
    },
}

impl Init {
    fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        match *self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    /// Hierarchical path such as `encoder.0.sa1.mlp.0.weight`.
    pub name: String,
    pub tensor: Tensor,
    pub init: Init,
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered registry of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let shape = shape.into();
        let data = init.sample(shape.iter().product(), rng);
        let tensor = Tensor::new(shape, data)?;
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, tensor, init });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_id(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        let slot = &mut self.params[i].tensor;
        if slot.shape() != tensor.shape() {
            return Err(Error::Dimension {
                op: "set parameter",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    /// Record every parameter as a named leaf on a fresh tape.
    pub fn bind(&self, precision: Precision) -> Graph {
        let mut tape = Tape::new(precision);
        let vars = self
            .params
            .iter()
            .map(|p| tape.param(p.name.clone(), p.tensor.clone()))
            .collect();
        Graph { tape, vars }
    }
}

/// A tape with every parameter of a store already bound.
pub struct Graph {
    pub tape: Tape,
    vars: Vec<Var>,
}

impl Graph {
    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
