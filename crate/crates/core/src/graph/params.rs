use std::collections::BTreeMap;

use super::{Gradients, GraphValue};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named trainable arrays. Iteration is lexicographic by path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Moves every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }

    /// Creates graph leaves for every entry. With `requires_grad = false`
    /// the parameters act as constants and evaluation records no graph.
    pub fn bind(&self, requires_grad: bool) -> Bound {
        let leaves = self
            .entries
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    GraphValue::leaf(v.clone(), requires_grad, Some(k)),
                )
            })
            .collect();
        Bound { leaves }
    }
}

/// Graph leaves for one evaluation of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    leaves: BTreeMap<String, GraphValue>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<&GraphValue> {
        self.leaves
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }
}

/// Central-difference gradient of `f` with respect to every scalar in `params`.
pub fn finite_diff_grad<F>(f: F, params: &ParamSet, epsilon: f64) -> Result<Gradients>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Invalid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let eval = |p: &ParamSet| -> Result<f64> {
        let v = f(p)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("finite-difference objective".into()))
        }
    };
    let mut work = params.clone();
    let mut out = Gradients::new();
    for (name, value) in params.iter() {
        let mut grad = Tensor::zeros(value.shape());
        for i in 0..value.len() {
            let orig = value.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + epsilon;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - epsilon;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * epsilon);
        }
        out.insert(name.clone(), grad);
    }
    Ok(out)
}
