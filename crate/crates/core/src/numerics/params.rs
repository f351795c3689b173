use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Half-width of the uniform range used for weight matrices.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `[-INIT_SCALE, INIT_SCALE]`.
    Uniform,
    Zeros,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Matrix,
}

/// Named, uniquely keyed collection of learnable matrices.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a new parameter. Names must be unique.
    pub fn register(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
    ) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Matrix::zeros((rows, cols)),
            Init::Uniform => {
                let rng = &mut self.rng;
                Matrix::from_shape_simple_fn((rows, cols), || {
                    rng.random_range(-INIT_SCALE..=INIT_SCALE)
                })
            }
        };
        self.insert(name, value)
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Copies values from `other` for every name present in both stores.
    /// Shapes must agree.
    pub fn load_from(&mut self, other: &ParameterStore) -> Result<()> {
        for (name, &i) in &self.index {
            let Some(src) = other.by_name(name) else {
                return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
            };
            let dst = &mut self.entries[i].value;
            if src.dim() != dst.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.dim(),
                    dst.dim()
                )));
            }
            dst.assign(src);
        }
        Ok(())
    }

    /// Bitwise equality of names, order and values.
    pub fn bit_eq(&self, other: &ParameterStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.dim() == b.value.dim()
                    && a.value
                        .iter()
                        .zip(b.value.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::new(1);
        store.register("w", 2, 2, Init::Uniform).unwrap();
        assert!(store.register("w", 1, 1, Init::Zeros).is_err());
    }

    #[test]
    fn init_ranges_and_determinism() {
        let mut a = ParameterStore::new(7);
        let mut b = ParameterStore::new(7);
        let wa = a.register("w", 10, 10, Init::Uniform).unwrap();
        let ba = a.register("b", 1, 10, Init::Zeros).unwrap();
        b.register("w", 10, 10, Init::Uniform).unwrap();
        b.register("b", 1, 10, Init::Zeros).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.get(wa).iter().all(|x| x.abs() <= INIT_SCALE));
        assert!(a.get(ba).iter().all(|&x| x == 0.0));
    }
}
