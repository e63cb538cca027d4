//! Named parameter collections.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type Grads<T> = BTreeMap<String, Vec<T>>;

/// Parameters keyed by dotted names such as `blocks.0.fwd.w_b`, iterated in
/// name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real = f64> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { map: BTreeMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(invalid(format!("parameter {name} already exists")));
        }
        self.map.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| invalid(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| invalid(format!("no parameter named {name}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every parameter on `tape` as a differentiable parameter.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundParams> {
        let map = self
            .map
            .iter()
            .map(|(k, v)| Ok((k.clone(), tape.param(v)?)))
            .collect::<Result<_>>()?;
        Ok(BoundParams { map })
    }

    /// Records every parameter on `tape` as a constant.
    pub fn bind_constant(&self, tape: &mut Tape<T>) -> Result<BoundParams> {
        let map = self
            .map
            .iter()
            .map(|(k, v)| Ok((k.clone(), tape.constant(v)?)))
            .collect::<Result<_>>()?;
        Ok(BoundParams { map })
    }

    /// Zero gradients shaped like every parameter.
    pub fn zero_grads(&self) -> Grads<T> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), vec![T::zero(); v.len()]))
            .collect()
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    map: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            map: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    /// The same bindings with `name` pointing at `var`.
    pub fn with(mut self, name: &str, var: Var) -> Self {
        self.map.insert(name.to_string(), var);
        self
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.map.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Adds the gradient of every bound parameter into `acc`.
    pub fn accumulate_grads<T: Real>(&self, tape: &Tape<T>, acc: &mut Grads<T>) -> Result<()> {
        for (name, &var) in &self.map {
            let Some(g) = tape.grad(var)? else { continue };
            let slot = acc
                .get_mut(name)
                .ok_or_else(|| invalid(format!("no gradient slot for {name}")))?;
            slot.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
        Ok(())
    }
}
