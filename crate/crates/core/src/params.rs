//! Named parameter storage with order-independent seeded initialization.
//!
//! Each parameter draws its initial values from a generator seeded by the
//! model seed and the parameter's name. Two models that share a parameter
//! name and shape therefore share its initial value, regardless of which
//! other parameters exist. The drop-in comparisons between a plain backbone
//! and one with object-region blocks rely on this.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{read_container, write_container, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

/// Seed derived from a base seed and a label. Stable across platforms and
/// toolchains.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        if let Some(id) = self.index.get(name) {
            panic!("duplicate parameter name {name} (id {})", id.0);
        }
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn add_init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> ParamId {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
            Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..=a)).collect(),
        };
        self.add(name, Tensor::new(shape.to_vec(), data).expect("init shape"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Parameters whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.index
            .range(prefix.to_string()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(_, id)| *id)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Writes one tensor container per parameter, named `<param>.orvt`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, id) in &self.index {
            write_container(&dir.join(format!("{name}.orvt")), self.get(*id))?;
        }
        Ok(())
    }

    /// Overwrites every parameter from `<param>.orvt` files in `dir`.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        for i in 0..self.values.len() {
            let path = dir.join(format!("{}.orvt", self.names[i]));
            let t = read_container(&path)
                .map_err(|e| Error::data(format!("loading {}: {e}", path.display())))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::data(format!(
                    "parameter {} has shape {:?} in checkpoint but {:?} in model",
                    self.names[i],
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t;
        }
        Ok(())
    }
}
