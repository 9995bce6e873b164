//! Named learnable parameters.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Record every parameter as a differentiable leaf on `graph`.
    pub fn register(&self, graph: &mut Graph) -> ParamVars {
        let vars = self.entries.iter().map(|(_, t)| graph.leaf(t.clone().with_grad())).collect();
        ParamVars { vars, index: self.index.clone() }
    }
}

/// Graph handles for a registered [`ModelParams`], in the same order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients after a backward pass; parameters the pass never reached get zeros.
    pub fn grads(&self, graph: &Graph) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| graph.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; graph.value(v).len()]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ModelParams::new();
        p.insert("a", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(p.insert("a", Tensor::zeros([1, 1, 1, 1])).is_err());
        assert_eq!(p.num_scalars(), 1);
    }
}
