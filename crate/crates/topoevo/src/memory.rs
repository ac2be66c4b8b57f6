//! Hierarchical incident memory with similarity-aware stochastic forgetting,
//! level-dependent refresh, and conservative test-time adaptation anchored to
//! pre-deployment parameters.

use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::Encoders;
use crate::graph::Level;
use crate::het::{Hypothesis, Verdict};
use crate::localizer::{forward_incident, joint_loss, Localizer, LocalizerError, TrainingExample};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tape;

pub const MEMORY_FORMAT: &str = "topoevo-mem-v1";

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("memory file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported memory format tag {0:?}")]
    BadFormat(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub id: u64,
    /// Mean of the candidate-subgraph topology-aware states.
    pub fingerprint: Vec<f64>,
    /// Level of the validated root.
    pub level: Level,
    pub token_set: Vec<usize>,
    pub hypothesis: Hypothesis,
    pub evidence_refs: Vec<String>,
    pub outcome_note: String,
    /// Seconds on the harness clock.
    pub insert_time: f64,
}

/// Per-level refresh half-lives in seconds; retrieval weight halves per
/// elapsed half-life and records past four half-lives are evicted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefreshPolicy {
    pub pod_half_life_s: f64,
    pub service_half_life_s: f64,
    pub node_half_life_s: f64,
}

const DAY_S: f64 = 86_400.0;

impl Default for RefreshPolicy {
    fn default() -> Self {
        Self {
            pod_half_life_s: 7.0 * DAY_S,
            service_half_life_s: 30.0 * DAY_S,
            node_half_life_s: 90.0 * DAY_S,
        }
    }
}

impl RefreshPolicy {
    pub fn half_life(&self, level: Level) -> f64 {
        match level {
            Level::Pod => self.pod_half_life_s,
            Level::Service => self.service_half_life_s,
            Level::Node => self.node_half_life_s,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub capacity_per_level: usize,
    pub tau_mem: f64,
    pub gamma: f64,
    pub refresh: RefreshPolicy,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity_per_level: 256,
            tau_mem: 0.85,
            gamma: 0.1,
            refresh: RefreshPolicy::default(),
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean of the rows selected by `indices` (candidate-subgraph fingerprint).
pub fn fingerprint_from_states(states: &[Vec<f64>], indices: &[usize]) -> Vec<f64> {
    if indices.is_empty() || states.is_empty() {
        return Vec::new();
    }
    let dim = states[0].len();
    let mut out = vec![0.0; dim];
    for &i in indices {
        for (o, v) in out.iter_mut().zip(&states[i]) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= indices.len() as f64;
    }
    out
}

/// Softmax over `sims / gamma`: the probability each similar record is the
/// one forgotten.
pub fn forgetting_distribution(sims: &[f64], gamma: f64) -> Vec<f64> {
    assert!(gamma > 0.0);
    if sims.is_empty() {
        return Vec::new();
    }
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| ((s - max) / gamma).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

#[derive(Debug, Clone)]
pub struct MemoryStore {
    pub config: MemoryConfig,
    records: Vec<MemoryRecord>,
    rng: ChaCha8Rng,
    seed: u64,
    next_id: u64,
}

impl MemoryStore {
    pub fn new(seed: u64, config: MemoryConfig) -> Self {
        assert!(config.tau_mem > 0.0 && config.tau_mem < 1.0);
        assert!(config.gamma > 0.0);
        Self {
            config,
            records: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            next_id: 0,
        }
    }

    pub fn records(&self) -> &[MemoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn level_count(&self, level: Level) -> usize {
        self.records.iter().filter(|r| r.level == level).count()
    }

    /// Indices and forget probabilities of same-level records above the
    /// similarity threshold.
    pub fn forget_candidates(&self, fingerprint: &[f64], level: Level) -> Vec<(usize, f64)> {
        let similar: Vec<(usize, f64)> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.level == level)
            .map(|(i, r)| (i, cosine(fingerprint, &r.fingerprint)))
            .filter(|(_, s)| *s > self.config.tau_mem)
            .collect();
        let probs = forgetting_distribution(
            &similar.iter().map(|(_, s)| *s).collect::<Vec<f64>>(),
            self.config.gamma,
        );
        similar
            .into_iter()
            .zip(probs)
            .map(|((i, _), p)| (i, p))
            .collect()
    }

    /// Insert with similarity-aware stochastic forgetting: at most one
    /// sufficiently similar same-level record is forgotten, chosen by a
    /// softmax over similarities; at capacity with no similar record the
    /// oldest is evicted instead. Returns the forgotten record's id.
    pub fn insert(&mut self, mut record: MemoryRecord) -> Option<u64> {
        record.id = self.next_id;
        self.next_id += 1;
        let candidates = self.forget_candidates(&record.fingerprint, record.level);
        let mut forgotten = None;
        if !candidates.is_empty() {
            let u: f64 = self.rng.gen();
            let mut acc = 0.0;
            let mut chosen = candidates.last().unwrap().0;
            for (i, p) in &candidates {
                acc += p;
                if u < acc {
                    chosen = *i;
                    break;
                }
            }
            forgotten = Some(self.records.remove(chosen).id);
        } else if self.level_count(record.level) >= self.config.capacity_per_level {
            let oldest = self
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.level == record.level)
                .min_by(|a, b| {
                    a.1.insert_time
                        .partial_cmp(&b.1.insert_time)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.1.id.cmp(&b.1.id))
                })
                .map(|(i, _)| i)
                .expect("level at capacity has records");
            forgotten = Some(self.records.remove(oldest).id);
        }
        self.records.push(record);
        forgotten
    }

    /// Retrieval weight after level-dependent decay: halves per half-life.
    pub fn retrieval_weight(&self, record: &MemoryRecord, now: f64) -> f64 {
        let age = (now - record.insert_time).max(0.0);
        let hl = self.config.refresh.half_life(record.level);
        0.5f64.powf(age / hl)
    }

    /// Top-k by decay-weighted cosine similarity; ties broken by recency.
    pub fn retrieve(&self, fingerprint: &[f64], k: usize, now: f64) -> Vec<&MemoryRecord> {
        let mut scored: Vec<(f64, &MemoryRecord)> = self
            .records
            .iter()
            .map(|r| (cosine(fingerprint, &r.fingerprint) * self.retrieval_weight(r, now), r))
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(
                    b.1.insert_time
                        .partial_cmp(&a.1.insert_time)
                        .unwrap_or(std::cmp::Ordering::Equal),
                )
                .then(b.1.id.cmp(&a.1.id))
        });
        scored.into_iter().take(k).map(|(_, r)| r).collect()
    }

    /// Evict records older than four half-lives for their level.
    pub fn refresh(&mut self, now: f64) -> usize {
        let before = self.records.len();
        let refresh = self.config.refresh.clone();
        self.records
            .retain(|r| (now - r.insert_time).max(0.0) <= 4.0 * refresh.half_life(r.level));
        before - self.records.len()
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let header = StoreHeader {
            format: MEMORY_FORMAT.to_string(),
            config: self.config.clone(),
            seed: self.seed,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            next_id: self.next_id,
        };
        serde_json::to_writer(&mut w, &header).map_err(io_err)?;
        writeln!(w)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(io_err)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reload including the PRNG position so subsequent forget choices are
    /// bit-exact continuations of the saved store.
    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let head = lines.next().ok_or(MemoryError::Parse {
            line: 1,
            msg: "empty file".to_string(),
        })??;
        let header: StoreHeader = serde_json::from_str(&head).map_err(|e| MemoryError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        if header.format != MEMORY_FORMAT {
            return Err(MemoryError::BadFormat(header.format));
        }
        let mut rng = ChaCha8Rng::from_seed(header.rng_seed);
        rng.set_word_pos(header.rng_word_pos);
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: MemoryRecord = serde_json::from_str(&line).map_err(|e| MemoryError::Parse {
                line: i + 2,
                msg: e.to_string(),
            })?;
            records.push(r);
        }
        Ok(Self {
            config: header.config,
            records,
            rng,
            seed: header.seed,
            next_id: header.next_id,
        })
    }
}

fn io_err(e: serde_json::Error) -> MemoryError {
    MemoryError::Parse {
        line: 0,
        msg: e.to_string(),
    }
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    format: String,
    config: MemoryConfig,
    seed: u64,
    rng_seed: [u8; 32],
    rng_word_pos: u128,
    next_id: u64,
}

// ---------------------------------------------------------------------------
// Test-time adaptation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TtaConfig {
    pub confidence_threshold: f64,
    pub batch_size: usize,
    pub lambda_reg: f64,
    pub lambda_cls: f64,
    pub lr: f64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.6,
            batch_size: 8,
            lambda_reg: 0.01,
            lambda_cls: 1.0,
            lr: 0.0003,
        }
    }
}

/// Pseudo-labeled incidents that passed the confidence gate.
#[derive(Debug, Default)]
pub struct TtaBuffer {
    entries: Vec<TrainingExample>,
}

impl TtaBuffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Gate: verdict accepted with every check passing strictly (all three
    /// fault signatures present, nothing missing) and a confident root score.
    pub fn admit(
        &mut self,
        verdict: &Verdict,
        p_root: f64,
        threshold: f64,
        example: TrainingExample,
    ) -> bool {
        let strict_pass = verdict.outcome == crate::het::Outcome::Accepted
            && verdict.temporal_precedence.pass
            && verdict.path_consistency.pass
            && verdict.template_consistency.pass
            && verdict.missing_expected.is_empty();
        if strict_pass && p_root >= threshold {
            self.entries.push(example);
            true
        } else {
            false
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// One conservative step on the pseudo-labeled batch objective
/// `mean joint loss + lambda_reg * ||theta - theta_0||^2`.
///
/// The anchor term is applied implicitly (proximal update): with task
/// gradient `g`,
/// `theta_new = (theta/lr + 2*lambda_reg*theta_0 - g) / (1/lr + 2*lambda_reg)`.
/// This reduces to plain gradient descent at `lambda_reg = 0` and contracts
/// the update toward `theta_0` as `lambda_reg` grows, so a very large
/// regularizer leaves parameters essentially frozen at the anchor.
/// Returns whether a step was taken; below batch size the model is left
/// bitwise unchanged.
pub fn tta_step(
    enc: &Encoders,
    loc: &Localizer,
    store: &mut ParamStore,
    anchor: &ParamStore,
    buffer: &mut TtaBuffer,
    cfg: &TtaConfig,
) -> Result<bool, LocalizerError> {
    if buffer.entries.len() < cfg.batch_size {
        return Ok(false);
    }
    let mut tape = Tape::new();
    let mut bindings = Bindings::default();
    let mut losses = Vec::new();
    for example in &buffer.entries {
        let out = forward_incident(&mut tape, store, &mut bindings, enc, loc, example, true)?;
        let loss = joint_loss(
            &mut tape,
            out.p_rcl,
            out.y_hat,
            example.root_index,
            example.fault_index,
            cfg.lambda_cls,
        )?;
        losses.push(loss);
    }
    let stacked = tape.concat(&losses)?;
    let total = tape.mean(stacked);
    let grads = tape.backward(total)?;
    let denom = 1.0 / cfg.lr + 2.0 * cfg.lambda_reg;
    let names: Vec<(String, crate::tensor::TensorId)> = bindings
        .iter()
        .map(|(n, id)| (n.to_string(), id))
        .collect();
    for (name, id) in names {
        let g = grads.get(id).to_vec();
        let theta0 = anchor.get(&name).expect("anchor has bound param").values.clone();
        let param = store.get(&name).expect("bound param exists").clone();
        let values: Vec<f64> = param
            .values
            .iter()
            .zip(theta0.iter().zip(&g))
            .map(|(&t, (&t0, &gk))| (t / cfg.lr + 2.0 * cfg.lambda_reg * t0 - gk) / denom)
            .collect();
        store.set(&name, &param.shape, values);
    }
    buffer.clear();
    Ok(true)
}
