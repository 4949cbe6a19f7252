//! Named parameter storage and the builder that layers use to declare weights.

use std::cell::RefCell;
use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Insertion-ordered collection of trainable tensors.
#[derive(Clone)]
pub struct ParamStore {
    dtype: DType,
    entries: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("tensors", &self.entries.len())
            .field("scalars", &self.num_scalars())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, var));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Deep copy: the returned store does not share storage with `self`.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = ParamStore::new(self.dtype);
        for (name, var) in self.iter() {
            out.insert(name, Var::from_tensor(&var.as_tensor().copy()?)?)?;
        }
        Ok(out)
    }

    /// Builds a module, drawing every declared parameter from a seeded initializer.
    pub fn init<M>(
        dtype: DType,
        seed: u64,
        f: impl FnOnce(&ParamBuilder) -> Result<M>,
    ) -> Result<(M, ParamStore)> {
        let state = RefCell::new(BuildState {
            store: ParamStore::new(dtype),
            source: Source::Init(ChaCha8Rng::seed_from_u64(seed)),
        });
        let module = f(&ParamBuilder {
            state: &state,
            prefix: String::new(),
        })?;
        Ok((module, state.into_inner().store))
    }

    /// Rebuilds a module from tensors already in the store. With `detach`, the
    /// module holds gradient-free views (used for inference).
    pub fn bind<M>(&self, detach: bool, f: impl FnOnce(&ParamBuilder) -> Result<M>) -> Result<M> {
        let state = RefCell::new(BuildState {
            store: self.clone(),
            source: Source::Existing { detach },
        });
        f(&ParamBuilder {
            state: &state,
            prefix: String::new(),
        })
    }
}

/// How a freshly declared parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Normal { std: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Init {
    /// He/Kaiming normal scaling for a layer with the given fan-in.
    pub fn he(fan_in: usize) -> Self {
        Init::Normal {
            std: (2.0 / fan_in as f64).sqrt(),
        }
    }

    /// `U(±1/√fan_in)`, the customary default for convolution weights and biases.
    pub fn fan_in_uniform(fan_in: usize) -> Self {
        let b = 1.0 / (fan_in as f64).sqrt();
        Init::Uniform { lo: -b, hi: b }
    }

    pub fn lecun(fan_in: usize) -> Self {
        Init::Normal {
            std: (1.0 / fan_in as f64).sqrt(),
        }
    }
}

enum Source {
    Init(ChaCha8Rng),
    Existing { detach: bool },
}

struct BuildState {
    store: ParamStore,
    source: Source,
}

/// Hands out named parameters under a dotted prefix.
pub struct ParamBuilder<'a> {
    state: &'a RefCell<BuildState>,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn pp(&self, name: &str) -> ParamBuilder<'a> {
        ParamBuilder {
            state: self.state,
            prefix: self.full_name(name),
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.borrow().store.dtype
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut state = self.state.borrow_mut();
        let dtype = state.store.dtype;
        match &mut state.source {
            Source::Init(rng) => {
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Normal { std } => {
                        let dist = Normal::new(0.0, std)
                            .map_err(|e| Error::Config(format!("{full}: {e}")))?;
                        (0..n).map(|_| dist.sample(rng)).collect()
                    }
                    Init::Uniform { lo, hi } => (0..n).map(|_| rng.random_range(lo..=hi)).collect(),
                };
                let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?;
                let var = Var::from_tensor(&t)?;
                let out = var.as_tensor().clone();
                state.store.insert(full, var)?;
                Ok(out)
            }
            Source::Existing { detach } => {
                let detach = *detach;
                let var = state
                    .store
                    .get(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{full}`")))?;
                if var.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{full}` has shape {:?}, expected {shape:?}",
                        var.dims()
                    )));
                }
                Ok(if detach {
                    var.as_tensor().detach()
                } else {
                    var.as_tensor().clone()
                })
            }
        }
    }
}
