//! Named parameter storage shared by all model layers.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical names like
//! `"backbone/sa0/mlp1/w"`. Layers request them with `get_or_init`, so
//! loading a checkpoint first and building the model afterwards reuses the
//! loaded values. Entries are either trainable (updated by the optimizer,
//! counted by the census) or buffers (running statistics, fixed projections).
//!
//! Initialization draws from an RNG stream derived from `(seed, name)`;
//! parameter values therefore do not depend on registration order.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Gradients, Matrix, Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub value: Matrix,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    /// Root seed for derived initializer streams.
    init_seed: u64,
}

impl ParamStore {
    pub fn new(init_seed: u64) -> Self {
        ParamStore { entries: BTreeMap::new(), init_seed }
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Fetch `name`, initializing it with `init` on first use. The shape of
    /// an existing entry must match, which catches config/checkpoint drift.
    pub fn get_or_init(
        &mut self,
        name: &str,
        trainable: bool,
        init: impl FnOnce(&mut rand_chacha::ChaCha12Rng) -> Matrix,
    ) -> Result<&Matrix> {
        if !self.entries.contains_key(name) {
            let mut rng = rng::stream(self.init_seed, &format!("init/{name}"));
            let value = init(&mut rng);
            self.entries.insert(name.to_string(), ParamEntry { value, trainable });
        }
        let entry = self.entries.get(name).expect("just inserted");
        Ok(&entry.value)
    }

    /// Like `get_or_init` but verifies the resulting shape.
    pub fn get_or_init_shaped(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        trainable: bool,
        init: impl FnOnce(&mut rand_chacha::ChaCha12Rng) -> Matrix,
    ) -> Result<&Matrix> {
        let v = self.get_or_init(name, trainable, init)?;
        if v.rows() != rows || v.cols() != cols {
            return Err(Error::shape(
                "param",
                format!("{name}: expected {rows}x{cols}, found {}", v.shape_str()),
            ));
        }
        Ok(self.entries.get(name).map(|e| &e.value).expect("present"))
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if !entry.value.same_shape(&value) {
            return Err(Error::shape(
                "param set",
                format!("{name}: {} vs {}", entry.value.shape_str(), value.shape_str()),
            ));
        }
        entry.value = value;
        Ok(())
    }

    /// Names of trainable entries, sorted (BTreeMap order).
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Number of trainable scalar parameters under a name prefix.
    pub fn census(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, e)| e.trainable && n.starts_with(prefix))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }
}

/// He-style uniform initializer for a linear layer of shape out x in:
/// U(-sqrt(6/fan_in), sqrt(6/fan_in)).
pub fn init_linear(rng: &mut rand_chacha::ChaCha12Rng, out: usize, fan_in: usize) -> Matrix {
    use rand::Rng;
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(out, fan_in, |_, _| rng.gen_range(-bound..bound))
}

/// Uniform initializer with explicit bound.
pub fn init_uniform(rng: &mut rand_chacha::ChaCha12Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    use rand::Rng;
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

/// Binds parameters into a tape, one leaf per name per tape, and maps
/// adjoints back to names after backward.
#[derive(Default)]
pub struct Binder {
    bound: HashMap<String, Var>,
}

impl Binder {
    pub fn new() -> Self {
        Binder { bound: HashMap::new() }
    }

    /// Leaf var carrying the current value of `name`. Repeated binds of the
    /// same name on the same tape share one leaf, so adjoints accumulate.
    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = tape.leaf(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Adjoints of all trainable bound parameters. Bound params the loss
    /// never touched come back as zeros (their Adam state still advances).
    pub fn collect_grads(
        &self,
        tape: &Tape,
        store: &ParamStore,
        grads: &Gradients,
    ) -> Result<BTreeMap<String, Matrix>> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.bound {
            let entry = store.get(name)?;
            let trainable = store
                .entries
                .get(name)
                .map(|e| e.trainable)
                .unwrap_or(false);
            if !trainable {
                continue;
            }
            let _ = tape; // values verified at bind time
            out.insert(name.clone(), grads.get_or_zeros(var, entry.rows(), entry.cols()));
        }
        Ok(out)
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(|s| s.as_str())
    }
}
