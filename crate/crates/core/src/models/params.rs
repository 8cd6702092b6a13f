use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    tensors: IndexMap<String, Arc<Tensor>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .map(|t| t.as_ref())
            .ok_or_else(|| Error::Index(format!("no parameter named {name:?}")))
    }

    pub fn get_arc(&self, name: &str) -> Result<Arc<Tensor>> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Index(format!("no parameter named {name:?}")))
    }

    /// Mutable access; clones the tensor first if it is shared.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Index(format!("no parameter named {name:?}")))
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Index(format!("no parameter named {name:?}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Dimension(format!(
                "{name}: shape {:?} replaced by {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = Arc::new(t);
        Ok(())
    }

    /// Mutable access to every tensor accepted by `keep`, in set order.
    pub fn iter_mut_where(&mut self, keep: impl Fn(&str) -> bool) -> Vec<(&str, &mut Tensor)> {
        self.tensors
            .iter_mut()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
            .collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// True when every tensor is bitwise identical, names and order included.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }
}

/// Low-rank adapter factors attached to one weight matrix `M` (`in×out`):
/// the effective weight is `M + q·r` with `q` of shape `in×rank`.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub q: Var,
    pub r: Var,
}

/// Graph handles for one model's parameters, plus any attached adapters.
#[derive(Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
    adapters: HashMap<String, AdapterVars>,
}

impl Bound {
    /// Inserts every parameter as a leaf; `trainable` decides which leaves
    /// receive gradients.
    pub fn bind(g: &mut Graph, params: &ParamSet, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = params
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(Arc::clone(t), trainable(name))))
            .collect();
        Bound {
            vars,
            adapters: HashMap::new(),
        }
    }

    /// Binds existing graph nodes under parameter names.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Bound {
        Bound {
            vars: vars.into_iter().collect(),
            adapters: HashMap::new(),
        }
    }

    pub fn constants(g: &mut Graph, params: &ParamSet) -> Bound {
        Bound::bind(g, params, |_| false)
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Index(format!("parameter {name:?} not bound")))
    }

    pub fn attach_adapter(&mut self, weight: impl Into<String>, adapter: AdapterVars) {
        self.adapters.insert(weight.into(), adapter);
    }

    pub fn adapter(&self, weight: &str) -> Option<&AdapterVars> {
        self.adapters.get(weight)
    }
}
