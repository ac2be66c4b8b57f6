//! Named parameter storage, Adam updates, and checkpoint round-tripping.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Gradients, Tape, TensorId};

pub const CHECKPOINT_FORMAT: &str = "topoevo-ckpt-v1";

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint format tag {0:?}")]
    BadFormat(String),
    #[error("unknown parameter {0:?}")]
    Unknown(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Flat map of named parameter arrays plus optimizer state.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    adam: IndexMap<String, AdamSlot>,
    step: u64,
}

/// Leaves bound onto a tape for one forward pass, by parameter name.
#[derive(Debug, Default)]
pub struct Bindings {
    entries: Vec<(String, TensorId)>,
}

impl Bindings {
    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.entries.iter().map(|(n, id)| (n.as_str(), *id))
    }

    pub fn lookup(&self, name: &str) -> Option<TensorId> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Create `name` if absent, initialized uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) {
        if self.params.contains_key(name) {
            return;
        }
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                values,
            },
        );
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        if self.params.contains_key(name) {
            return;
        }
        let n: usize = shape.iter().product();
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                values: vec![0.0; n],
            },
        );
    }

    pub fn set(&mut self, name: &str, shape: &[usize], values: Vec<f64>) {
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                values,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Put `name` on the tape as a grad-requiring leaf and record the binding.
    pub fn bind(&self, tape: &mut Tape, bindings: &mut Bindings, name: &str) -> TensorId {
        let p = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not initialized"));
        let id = tape.leaf(&p.shape, p.values.clone(), true);
        bindings.entries.push((name.to_string(), id));
        id
    }

    /// Like `bind`, but reuses an existing binding for `name` so repeated uses
    /// on one tape share a single leaf and accumulate gradients.
    pub fn bind_cached(&self, tape: &mut Tape, bindings: &mut Bindings, name: &str) -> TensorId {
        if let Some(id) = bindings.lookup(name) {
            return id;
        }
        self.bind(tape, bindings, name)
    }

    /// One Adam step over every bound parameter, reading gradients from `grads`.
    pub fn adam_step(&mut self, grads: &Gradients, bindings: &Bindings, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        for (name, id) in &bindings.entries {
            let g = grads.get(*id);
            let param = self.params.get_mut(name).expect("bound param exists");
            let slot = self
                .adam
                .entry(name.clone())
                .or_insert_with(|| AdamSlot {
                    m: vec![0.0; param.values.len()],
                    v: vec![0.0; param.values.len()],
                });
            for k in 0..param.values.len() {
                slot.m[k] = cfg.beta1 * slot.m[k] + (1.0 - cfg.beta1) * g[k];
                slot.v[k] = cfg.beta2 * slot.v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let m_hat = slot.m[k] / (1.0 - cfg.beta1.powf(t));
                let v_hat = slot.v[k] / (1.0 - cfg.beta2.powf(t));
                param.values[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }

    /// Squared L2 distance to another store over shared parameter names.
    pub fn sq_distance(&self, other: &ParamStore) -> f64 {
        let mut acc = 0.0;
        for (name, p) in &self.params {
            if let Some(q) = other.params.get(name) {
                for (a, b) in p.values.iter().zip(&q.values) {
                    acc += (a - b) * (a - b);
                }
            }
        }
        acc
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            params: self.params.clone(),
        };
        serde_json::to_writer(&mut w, &ckpt)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(ParamError::BadFormat(ckpt.format));
        }
        Ok(Self {
            params: ckpt.params,
            adam: IndexMap::new(),
            step: 0,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    params: IndexMap<String, Param>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.init_uniform("w", &[3, 4], 4, &mut rng);
        store.init_uniform("b", &[4], 4, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        for name in ["w", "b"] {
            let a = &store.get(name).unwrap().values;
            let b = &loaded.get(name).unwrap().values;
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn bad_format_tag_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, r#"{"format":"other","params":{}}"#).unwrap();
        assert!(matches!(
            ParamStore::load(&path),
            Err(ParamError::BadFormat(_))
        ));
    }

    #[test]
    fn adam_moves_toward_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.init_uniform("x", &[1], 1, &mut rng);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        for _ in 0..200 {
            let mut tape = Tape::new();
            let mut bindings = Bindings::default();
            let x = store.bind(&mut tape, &mut bindings, "x");
            let shifted = tape.add_const(x, -3.0);
            let loss = tape.mul(shifted, shifted).unwrap();
            let grads = tape.backward(loss).unwrap();
            store.adam_step(&grads, &bindings, &cfg);
        }
        assert!((store.get("x").unwrap().values[0] - 3.0).abs() < 0.05);
    }
}
