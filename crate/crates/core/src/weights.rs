//! Named parameter storage shared by the networks, the optimizer and checkpoints.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Expected name and shape of one parameter array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    /// Uniform in `±0.01`.
    Small,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightMeta {
    pub config_hash: String,
    pub seed: u64,
}

/// Ordered map of parameter name to array. Also used for gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, ArrayD<f64>>,
    pub meta: WeightMeta,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every parameter from its initializer, in spec order, from `rng`.
    pub fn initialize(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut ws = WeightStore::new();
        for spec in specs {
            let shape = IxDyn(&spec.shape);
            let arr = match spec.init {
                Init::Zeros => ArrayD::zeros(shape),
                Init::Ones => ArrayD::ones(shape),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    ArrayD::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
                }
                Init::Small => ArrayD::from_shape_simple_fn(shape, || rng.gen_range(-0.01..0.01)),
            };
            ws.insert(spec.name.clone(), arr);
        }
        ws.round_to_f32();
        ws
    }

    pub fn zeros_like(other: &WeightStore) -> Self {
        WeightStore {
            entries: other
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
            meta: other.meta.clone(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Adds `value` into the entry `name`, creating it if absent.
    pub fn accumulate(&mut self, name: &str, value: &ArrayD<f64>) {
        match self.entries.get_mut(name) {
            Some(acc) => *acc += value,
            None => {
                self.entries.insert(name.to_string(), value.clone());
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
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

    /// Total number of scalars across all entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.entries.values_mut() {
            *v *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &WeightStore) {
        for (k, v) in &other.entries {
            self.accumulate(k, v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for v in self.entries.values_mut() {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    /// Checks names and shapes against `specs`: nothing missing, nothing extra.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let arr = self.get(&spec.name)?;
            if arr.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "weight `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    arr.shape(),
                    spec.shape
                )));
            }
        }
        if self.len() != specs.len() {
            let known: std::collections::BTreeSet<_> =
                specs.iter().map(|s| s.name.as_str()).collect();
            let orphans: Vec<_> = self
                .names()
                .filter(|n| !known.contains(n.as_str()))
                .collect();
            return Err(Error::Shape(format!("orphan weights: {orphans:?}")));
        }
        Ok(())
    }

    /// Sets every entry whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in self.entries.iter_mut() {
            if k.starts_with(prefix) {
                v.fill(0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn initialize_is_seeded_and_f32_exact() {
        let specs = vec![
            ParamSpec::new("a.weight", vec![3, 4], Init::FanIn(4)),
            ParamSpec::new("a.bias", vec![3], Init::Zeros),
        ];
        let a = WeightStore::initialize(&specs, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let b = WeightStore::initialize(&specs, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.numel(), 15);
        assert!(a
            .get("a.weight")
            .unwrap()
            .iter()
            .all(|v| (*v as f32) as f64 == *v));
        a.check_against(&specs).unwrap();
    }

    #[test]
    fn check_detects_orphans_and_shapes() {
        let specs = vec![ParamSpec::new("w", vec![2], Init::Zeros)];
        let mut ws = WeightStore::new();
        ws.insert("w", ArrayD::zeros(IxDyn(&[3])));
        assert!(ws.check_against(&specs).is_err());
        ws.insert("w", ArrayD::zeros(IxDyn(&[2])));
        ws.insert("extra", ArrayD::zeros(IxDyn(&[1])));
        assert!(ws.check_against(&specs).is_err());
    }
}
