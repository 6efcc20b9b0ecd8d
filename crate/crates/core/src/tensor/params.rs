use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{contract_err, dim_err, Result};

/// FNV-1a over a byte string; used to derive per-parameter seeds from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// How a freshly declared parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamInit {
    /// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
    FanIn(usize),
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: Tensor,
    trainable: bool,
}

/// Named tensors of a model: trainable parameters plus non-trainable buffers
/// such as batch-norm running statistics. Iteration order is by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    seed: u64,
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { seed, entries: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Declares a trainable parameter. The random stream depends only on the
    /// store seed and the parameter name, not on declaration order.
    pub fn declare(&mut self, name: &str, shape: &[usize], init: ParamInit) -> Result<()> {
        let value = match init {
            ParamInit::Constant(c) => Tensor::full(shape, c),
            ParamInit::FanIn(fan_in) => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())?
            }
        };
        self.insert(name, value, true)
    }

    pub fn declare_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, false)
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(contract_err!("parameter `{name}` declared twice"));
        }
        self.entries.insert(name.to_string(), Entry { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    /// Overwrites an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self.entries.get_mut(name).ok_or_else(|| contract_err!("unknown parameter `{name}`"))?;
        if e.value.shape() != value.shape() {
            return Err(dim_err!(
                "parameter `{name}` has shape {:?}, refusing {:?}",
                e.value.shape(),
                value.shape()
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    /// All entries, trainable or not, by name.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().filter(|(_, e)| e.trainable).map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable().map(|(k, _)| k.to_string()).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replaces every value from `entries`; names and shapes must match exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.entries.len() {
            return Err(contract_err!(
                "checkpoint has {} entries, model expects {}",
                entries.len(),
                self.entries.len()
            ));
        }
        for (name, value) in entries {
            self.set(&name, value)?;
        }
        Ok(())
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries.iter().find(|(_, e)| !e.value.is_finite()).map(|(k, _)| k.as_str())
    }
}
