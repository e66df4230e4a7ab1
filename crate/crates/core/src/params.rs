//! Named parameter collections.

use indexmap::IndexMap;

use crate::graph::{Graph, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Ordered mapping from parameter name to tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(TensorError::Domain {
                op: "param_set",
                reason: format!("duplicate parameter name `{name}`"),
            });
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn replace(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        t.expect_shape("param_set", slot.shape())?;
        *slot = t;
        Ok(())
    }

    /// Checks that `other` has the same names, order and shapes.
    pub fn check_layout(&self, other: &ParamSet, op: &'static str) -> Result<()> {
        if self.len() != other.len() {
            return Err(TensorError::Domain {
                op,
                reason: format!("{} parameters vs {}", self.len(), other.len()),
            });
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(TensorError::UnknownParam(nb.clone()));
            }
            tb.expect_shape(op, ta.shape())?;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Registers every tensor in a graph, as differentiable parameters when
    /// `trainable` and as constants otherwise.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let v = if trainable { g.param(n, t.clone()) } else { g.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        ParamVars(vars)
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Graph handles for a registered [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamVars(IndexMap<String, Var>);

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}
