use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::scalar::Scalar;

/// Which part of the model a tensor belongs to; stages freeze by group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Classifier,
    Threshold,
    SubClassifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix<T>,
    pub frozen: bool,
}

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group, value, frozen: false });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// Freezes every tensor whose group is not accepted by `trainable`.
    pub fn train_only(&mut self, trainable: impl Fn(ParamGroup) -> bool) {
        for p in &mut self.params {
            p.frozen = !trainable(p.group);
        }
    }

    /// Copies of all tensors in `group`, for bit-level comparisons.
    pub fn snapshot(&self, group: ParamGroup) -> Vec<(String, Matrix<T>)> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

/// Per-parameter gradient accumulator indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn new(len: usize) -> Self {
        Self { grads: (0..len).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &ParamGrads<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// A tape bound to a parameter set. Each parameter becomes a leaf the first
/// time it is requested; frozen parameters enter as constants.
pub struct Graph<'p, T> {
    tape: Tape<T>,
    params: &'p ParameterSet<T>,
    bound: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParameterSet<T>) -> Self {
        Self::with_tape(params, Tape::new())
    }

    pub fn inference(params: &'p ParameterSet<T>) -> Self {
        Self::with_tape(params, Tape::inference())
    }

    fn with_tape(params: &'p ParameterSet<T>, tape: Tape<T>) -> Self {
        Self { tape, params, bound: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParameterSet<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let v = if p.frozen {
            self.tape.constant(p.value.clone())
        } else {
            self.tape.variable(p.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Runs backward from `loss` and collects gradients of the bound parameters.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads<T>> {
        let mut grads: Gradients<T> = self.tape.backward(loss)?;
        let mut out = ParamGrads::new(self.params.len());
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(g) = v.and_then(|v| grads.take(v)) {
                out.grads[i] = Some(g);
            }
        }
        Ok(out)
    }
}

impl<T> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}
