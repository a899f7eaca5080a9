use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Role of a named array; decides initialization, optimization and decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvKernel,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    /// Running statistics are buffers, not optimized.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<f32>,
}

/// All named arrays of a network, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an array filled with its kind's neutral value (ones for
    /// gammas and running variances, zeros otherwise).
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind) {
        let name = name.into();
        let len = shape.iter().product();
        let fill = match kind {
            ParamKind::BnGamma | ParamKind::BnRunningVar => 1.0,
            _ => 0.0,
        };
        let prev = self.params.insert(
            name.clone(),
            Param {
                shape: shape.to_vec(),
                kind,
                data: vec![fill; len],
            },
        );
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.params.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> &[f32] {
        &self.param(name).data
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f32] {
        match self.params.get_mut(name) {
            Some(p) => &mut p.data,
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn param(&self, name: &str) -> &Param {
        match self.params.get(name) {
            Some(p) => p,
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.kind.trainable())
            .map(|p| p.data.len())
            .sum()
    }
}

/// Gradient buffers for the trainable arrays of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Vec<f32>>,
}

impl Gradients {
    pub fn zeros_for(store: &ParamStore) -> Self {
        let grads = store
            .iter()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(n, p)| (n.to_string(), vec![0.0; p.data.len()]))
            .collect();
        Gradients { grads }
    }

    pub fn slot(&mut self, name: &str) -> &mut [f32] {
        match self.grads.get_mut(name) {
            Some(g) => g,
            None => panic!("no gradient slot for {name}"),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().flatten().all(|v| v.is_finite())
    }

    pub fn clear(&mut self) {
        for g in self.grads.values_mut() {
            g.fill(0.0);
        }
    }
}
