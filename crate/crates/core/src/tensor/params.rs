use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::{Tensor, TensorError};

/// Identifier written into every serialized parameter container.
pub const CHECKPOINT_FORMAT: &str = "rtcan-params/1";

/// Serialized form of one named tensor: shape plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named trainable tensors, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

/// Tape handles of a [`ParamSet`] attached to one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var, TensorError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.with_grad(true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn attach(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let leaf = Tensor::new(t.shape().to_vec(), t.data().to_vec())
                    .expect("valid tensor")
                    .with_grad(t.requires_grad());
                (k.clone(), tape.leaf(leaf))
            })
            .collect();
        ParamVars { vars }
    }

    /// Adds the gradients of the attached leaves into each parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &ParamVars) -> Result<(), TensorError> {
        for (name, t) in self.tensors.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let v = vars.get(name)?;
            match tape.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn to_records(&self) -> IndexMap<String, TensorRecord> {
        self.tensors
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    TensorRecord {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect()
    }

    pub fn from_records(records: IndexMap<String, TensorRecord>) -> Result<Self, TensorError> {
        let mut set = ParamSet::new();
        for (k, r) in records {
            set.insert(k, Tensor::new(r.shape, r.data)?);
        }
        Ok(set)
    }

    /// Writes values from `records` into matching parameters, checking shapes.
    pub fn load_records(&mut self, records: &IndexMap<String, TensorRecord>) -> Result<(), TensorError> {
        for (name, t) in self.tensors.iter() {
            let r = records
                .get(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if r.shape != t.shape() || r.data.len() != t.numel() {
                return Err(TensorError::ShapeMismatch(format!(
                    "checkpoint tensor '{name}' has shape {:?}, model expects {:?}",
                    r.shape,
                    t.shape()
                )));
            }
        }
        if let Some(extra) = records.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(TensorError::UnknownParam(extra.clone()));
        }
        for (name, t) in self.tensors.iter_mut() {
            t.data_mut().copy_from_slice(&records[name].data);
        }
        Ok(())
    }
}

/// Plain gradient descent: `p <- p - lr * grad`, then zeroes the gradients.
/// Nothing is updated if any parameter lacks a gradient.
pub fn sgd_step<'a, I>(params: I, lr: f64) -> Result<(), TensorError>
where
    I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
{
    let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
    if let Some((name, _)) = params.iter().find(|(_, p)| p.requires_grad() && p.grad().is_none()) {
        return Err(TensorError::MissingGrad(name.to_string()));
    }
    for (_, p) in params {
        if !p.requires_grad() {
            continue;
        }
        let g = p.grad.take().expect("checked above");
        for (v, gv) in p.data.iter_mut().zip(&g) {
            *v -= lr * gv;
        }
        p.grad = Some(g);
        p.zero_grad();
        if !p.is_finite() {
            return Err(TensorError::NonFinite("sgd_step"));
        }
    }
    Ok(())
}
