//! Named parameter tensors, deterministic initialization, and checkpoint IO.
//!
//! Parameter names are hierarchical (`encoder/edgeconv0/weight`,
//! `decoder/block0/p2q/wq`, ...). Each tensor is initialized from its own
//! ChaCha stream derived from the global seed and the name hash, so adding a
//! parameter never shifts the initialization of the others.

use crate::autodiff::{Arr, Tape, Var};
use crate::container::{
    read_container, write_container, ArrayData, ContainerError, NamedArray, WEIGHTS_MAGIC,
};
use crate::seeds;
use ndarray::IxDyn;
use rand::Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// Ordered map of parameter name to tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Remove every parameter under `prefix/`, returning how many were dropped.
    pub fn remove_namespace(&mut self, prefix: &str) -> usize {
        let keys: Vec<String> = self
            .map
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        for k in &keys {
            self.map.remove(k);
        }
        keys.len()
    }

    /// Copy every parameter under `prefix/` from `other` into `self`.
    pub fn adopt_namespace(&mut self, other: &ParamStore, prefix: &str) {
        for (k, v) in other.map.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.map.insert(k.clone(), v.clone());
        }
    }

    /// Uniform init in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`, stream derived
    /// from `(seed, name)`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = seeds::rng(&[seed, seeds::stream::PARAM_INIT, seeds::hash_str(name)]);
        let value = Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound));
        self.insert(name, value);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Arr::zeros(IxDyn(shape)));
    }
}

/// Parameters bound onto a tape as differentiable leaves for one forward pass.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Bind every parameter in the store onto the tape.
    pub fn bind(tape: &mut Tape, store: &ParamStore) -> Self {
        let mut vars = BTreeMap::new();
        for (name, value) in store.iter() {
            vars.insert(name.to_string(), tape.leaf(value.clone()));
        }
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    /// Collect gradients per parameter name. Parameters the loss never
    /// touched are absent from the result.
    pub fn gradients(&self, grads: &crate::autodiff::Grads) -> BTreeMap<String, Arr> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.vars {
            if let Some(g) = grads.get(var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Write all parameters (f64, lossless) plus an echoed JSON config.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    config: &serde_json::Value,
) -> Result<(), ContainerError> {
    let arrays: Vec<NamedArray> = store
        .iter()
        .map(|(name, value)| {
            NamedArray::new(
                name,
                value.shape().to_vec(),
                ArrayData::F64(value.iter().copied().collect()),
            )
        })
        .collect();
    write_container(path, &WEIGHTS_MAGIC, config, &arrays)
}

/// Load a checkpoint back into a store plus the echoed config.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value), ContainerError> {
    let (config, arrays): (serde_json::Value, Vec<NamedArray>) =
        read_container(path, &WEIGHTS_MAGIC)?;
    let mut store = ParamStore::new();
    for a in arrays {
        let ArrayData::F64(data) = a.data else {
            return Err(ContainerError::Array {
                name: a.name.clone(),
                reason: "checkpoint arrays must be f64".into(),
            });
        };
        let value = Arr::from_shape_vec(IxDyn(&a.shape), data).map_err(|e| {
            ContainerError::Array {
                name: a.name.clone(),
                reason: e.to_string(),
            }
        })?;
        store.insert(a.name, value);
    }
    Ok((store, config))
}
