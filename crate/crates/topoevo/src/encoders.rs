//! Per-entity modality encoders: patched temporal convolutions for metrics,
//! template mining plus PF-IDF for logs, sub-interval statistics for traces,
//! and a fusion map producing node features.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Bindings, ParamStore};
use crate::sim::{Incident, LogEvent, SpanStatus, KPIS};
use crate::stats::{percentile, zscores_self};
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("series length {len} shorter than patch width {width}")]
    SeriesTooShort { len: usize, width: usize },
    #[error("modality dims {got:?} do not match configured {want:?}")]
    DimMismatch { got: Vec<usize>, want: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_width: usize,
    pub patch_stride: usize,
    pub conv_channels: usize,
    pub metric_dim: usize,
    pub log_dim: usize,
    pub trace_dim: usize,
    pub fused_dim: usize,
    pub template_cap: usize,
    pub trace_intervals: usize,
    pub trace_timeout_ms: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_width: 16,
            patch_stride: 8,
            conv_channels: 8,
            metric_dim: 32,
            log_dim: 16,
            trace_dim: 16,
            fused_dim: 64,
            template_cap: 256,
            trace_intervals: 8,
            trace_timeout_ms: 1000.0,
        }
    }
}

pub fn patch_count(len: usize, width: usize, stride: usize) -> Result<usize, EncoderError> {
    if len < width {
        return Err(EncoderError::SeriesTooShort { len, width });
    }
    Ok((len - width) / stride.max(1) + 1)
}

// ---------------------------------------------------------------------------
// Template mining (Drain-style fixed-depth prefix tree)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Template {
    pub id: usize,
    pub tokens: Vec<String>,
}

impl Template {
    pub fn pattern(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateMiner {
    pub depth: usize,
    pub sim_threshold: f64,
    pub max_children: usize,
    pub cap: usize,
    templates: Vec<Template>,
    #[serde(skip)]
    leaves: BTreeMap<Vec<String>, Vec<usize>>,
    #[serde(skip)]
    children: BTreeMap<Vec<String>, BTreeSet<String>>,
}

fn tokenize(message: &str) -> Vec<String> {
    message
        .split_whitespace()
        .map(|t| {
            if t.chars().any(|c| c.is_ascii_digit()) {
                "<*>".to_string()
            } else {
                t.to_string()
            }
        })
        .collect()
}

impl Default for TemplateMiner {
    fn default() -> Self {
        Self::new(4, 0.5, 32, 256)
    }
}

impl TemplateMiner {
    pub fn new(depth: usize, sim_threshold: f64, max_children: usize, cap: usize) -> Self {
        Self {
            depth,
            sim_threshold,
            max_children,
            cap,
            templates: Vec::new(),
            leaves: BTreeMap::new(),
            children: BTreeMap::new(),
        }
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Rebuild the skipped prefix-tree indexes; call after deserialization.
    pub fn rebuild_index(&mut self) {
        self.leaves.clear();
        self.children.clear();
        for i in 0..self.templates.len() {
            let key = self.key_for(&self.templates[i].tokens.clone());
            self.leaves.entry(key).or_default().push(i);
        }
    }

    /// Path key: token count, then the first `depth - 2` tokens, each capped
    /// by the per-level branching limit.
    fn key_for(&mut self, tokens: &[String]) -> Vec<String> {
        let mut key = vec![tokens.len().to_string()];
        let levels = self.depth.saturating_sub(2).min(tokens.len());
        for tok in tokens.iter().take(levels) {
            let seen = self.children.entry(key.clone()).or_default();
            let branch = if seen.contains(tok) || seen.len() < self.max_children {
                seen.insert(tok.clone());
                tok.clone()
            } else {
                "<*>".to_string()
            };
            key.push(branch);
        }
        key
    }

    fn similarity(template: &[String], tokens: &[String]) -> f64 {
        if template.len() != tokens.len() || tokens.is_empty() {
            return 0.0;
        }
        let matches = template
            .iter()
            .zip(tokens)
            .filter(|(a, b)| *a == *b || a.as_str() == "<*>")
            .count();
        matches as f64 / tokens.len() as f64
    }

    /// Parse a message, creating or merging a template. Returns the id.
    pub fn train(&mut self, message: &str) -> usize {
        let tokens = tokenize(message);
        let key = self.key_for(&tokens);
        let candidates = self.leaves.entry(key.clone()).or_default().clone();
        let best = candidates
            .iter()
            .map(|&i| (i, Self::similarity(&self.templates[i].tokens, &tokens)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        if let Some((i, sim)) = best {
            if sim >= self.sim_threshold || self.templates.len() >= self.cap {
                for (slot, tok) in self.templates[i].tokens.iter_mut().zip(&tokens) {
                    if slot != tok {
                        *slot = "<*>".to_string();
                    }
                }
                return i;
            }
        }
        if self.templates.len() >= self.cap {
            // no same-shape candidate: fall back to the globally best match
            return self
                .templates
                .iter()
                .enumerate()
                .max_by(|a, b| {
                    Self::similarity(&a.1.tokens, &tokens)
                        .partial_cmp(&Self::similarity(&b.1.tokens, &tokens))
                        .unwrap()
                })
                .map(|(i, _)| i)
                .unwrap_or(0);
        }
        let id = self.templates.len();
        self.templates.push(Template { id, tokens });
        self.leaves.entry(key).or_default().push(id);
        id
    }

    /// Best matching template without mutating the miner.
    pub fn lookup(&self, message: &str) -> Option<usize> {
        let tokens = tokenize(message);
        self.templates
            .iter()
            .map(|t| (t.id, Self::similarity(&t.tokens, &tokens)))
            .filter(|(_, sim)| *sim >= self.sim_threshold)
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(id, _)| id)
    }
}

pub fn mine_templates<'a>(messages: impl IntoIterator<Item = &'a str>) -> TemplateMiner {
    let mut miner = TemplateMiner::default();
    for m in messages {
        miner.train(m);
    }
    miner
}

// ---------------------------------------------------------------------------
// PF-IDF
// ---------------------------------------------------------------------------

/// Per-template document frequency over training windows. A document is one
/// entity's log window within one incident.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_windows: usize,
    pub df: BTreeMap<usize, usize>,
}

pub fn window_template_ids(events: &[LogEvent], miner: &TemplateMiner) -> Vec<usize> {
    events
        .iter()
        .filter_map(|e| miner.lookup(&e.message))
        .collect()
}

pub fn fit_corpus_stats(windows: &[Vec<usize>]) -> CorpusStats {
    let mut df = BTreeMap::new();
    for w in windows {
        let uniq: BTreeSet<usize> = w.iter().copied().collect();
        for t in uniq {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    CorpusStats {
        n_windows: windows.len(),
        df,
    }
}

/// `tf * log((N + 1) / (df + 1))`, floored at zero.
pub fn pf_idf(tf: f64, df: usize, n_windows: usize) -> f64 {
    (tf * ((n_windows as f64 + 1.0) / (df as f64 + 1.0)).ln()).max(0.0)
}

/// Fixed-length PF-IDF vector for one entity's log window.
pub fn pfidf_vector(
    events: &[LogEvent],
    miner: &TemplateMiner,
    stats: &CorpusStats,
    cap: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; cap];
    let ids = window_template_ids(events, miner);
    if ids.is_empty() {
        return out;
    }
    let total = ids.len() as f64;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for id in ids {
        *counts.entry(id).or_insert(0) += 1;
    }
    for (id, c) in counts {
        if id >= cap {
            continue;
        }
        let df = stats.df.get(&id).copied().unwrap_or(0);
        out[id] = pf_idf(c as f64 / total, df, stats.n_windows);
    }
    out
}

// ---------------------------------------------------------------------------
// Trace features
// ---------------------------------------------------------------------------

/// Raw per-sub-interval span statistics for one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFeatureTable {
    pub in_counts: Vec<f64>,
    pub out_counts: Vec<f64>,
    pub mean_ms: Vec<f64>,
    pub p95_ms: Vec<f64>,
    pub error_rate: Vec<f64>,
    pub timeout_rate: Vec<f64>,
}

pub fn trace_feature_table(
    incident_spans: &[crate::sim::TraceSpan],
    entity: &str,
    window: (f64, f64),
    intervals: usize,
) -> TraceFeatureTable {
    let n = intervals.max(1);
    let step = (window.1 - window.0) / n as f64;
    let mut table = TraceFeatureTable {
        in_counts: vec![0.0; n],
        out_counts: vec![0.0; n],
        mean_ms: vec![0.0; n],
        p95_ms: vec![0.0; n],
        error_rate: vec![0.0; n],
        timeout_rate: vec![0.0; n],
    };
    let mut durations: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut errors = vec![0usize; n];
    let mut timeouts = vec![0usize; n];
    let mut touching = vec![0usize; n];
    for s in incident_spans {
        if s.caller != entity && s.callee != entity {
            continue;
        }
        let i = (((s.start - window.0) / step.max(1e-9)) as usize).min(n - 1);
        if s.callee == entity {
            table.in_counts[i] += 1.0;
        }
        if s.caller == entity {
            table.out_counts[i] += 1.0;
        }
        touching[i] += 1;
        durations[i].push(s.duration_ms);
        match s.status {
            SpanStatus::Error => errors[i] += 1,
            SpanStatus::Timeout => timeouts[i] += 1,
            SpanStatus::Ok => {}
        }
    }
    for i in 0..n {
        if touching[i] > 0 {
            table.mean_ms[i] = crate::stats::mean(&durations[i]);
            table.p95_ms[i] = percentile(&durations[i], 95.0);
            table.error_rate[i] = errors[i] as f64 / touching[i] as f64;
            table.timeout_rate[i] = timeouts[i] as f64 / touching[i] as f64;
        }
    }
    table
}

/// Flatten to a `[6, intervals]` row-major channel matrix with counts squashed
/// and latencies scaled by the timeout.
pub fn trace_features_normalized(table: &TraceFeatureTable, timeout_ms: f64) -> Vec<f64> {
    let squash = |c: f64| c / (c + 10.0);
    let lat = |ms: f64| (ms / timeout_ms.max(1e-9)).min(2.0);
    let mut out = Vec::with_capacity(6 * table.in_counts.len());
    out.extend(table.in_counts.iter().map(|&c| squash(c)));
    out.extend(table.out_counts.iter().map(|&c| squash(c)));
    out.extend(table.mean_ms.iter().map(|&m| lat(m)));
    out.extend(table.p95_ms.iter().map(|&m| lat(m)));
    out.extend(table.error_rate.iter().copied());
    out.extend(table.timeout_rate.iter().copied());
    out
}

// ---------------------------------------------------------------------------
// Input preparation
// ---------------------------------------------------------------------------

/// Preprocessed raw inputs for one entity: z-scored metric matrix `[D, L]`,
/// PF-IDF vector, and normalized trace statistic matrix `[6, intervals]`.
#[derive(Debug, Clone)]
pub struct EntityInputs {
    pub entity: String,
    pub metric: Vec<Vec<f64>>,
    pub pfidf: Vec<f64>,
    pub trace: Vec<f64>,
}

pub fn prepare_incident_inputs(
    incident: &Incident,
    miner: &TemplateMiner,
    stats: &CorpusStats,
    cfg: &EncoderConfig,
) -> Vec<EntityInputs> {
    let len = incident
        .telemetry
        .metrics
        .values()
        .flat_map(|list| list.iter().map(|s| s.values.len()))
        .max()
        .unwrap_or(1);
    incident
        .graph
        .entities()
        .iter()
        .map(|e| {
            let metric = KPIS
                .iter()
                .map(|kpi| {
                    incident
                        .telemetry
                        .series(&e.id, kpi)
                        .map(|s| zscores_self(&s.values))
                        .unwrap_or_else(|| vec![0.0; len])
                })
                .collect();
            let pfidf = pfidf_vector(
                incident.telemetry.logs_for(&e.id),
                miner,
                stats,
                cfg.template_cap,
            );
            let table = trace_feature_table(
                &incident.telemetry.spans,
                &e.id,
                incident.window,
                cfg.trace_intervals,
            );
            EntityInputs {
                entity: e.id.clone(),
                metric,
                pfidf,
                trace: trace_features_normalized(&table, cfg.trace_timeout_ms),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Differentiable encoders
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Encoders {
    pub cfg: EncoderConfig,
}

impl Encoders {
    pub fn new(cfg: EncoderConfig) -> Self {
        Self { cfg }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = self.cfg.conv_channels;
        let d = KPIS.len();
        store.init_uniform("enc.metric.conv1.w", &[c, d * 3], d * 3, rng);
        store.init_zeros("enc.metric.conv1.b", &[c]);
        store.init_uniform("enc.metric.conv2.w", &[c, c * 3], c * 3, rng);
        store.init_zeros("enc.metric.conv2.b", &[c]);
        store.init_uniform("enc.metric.proj.w", &[self.cfg.metric_dim, c], c, rng);
        store.init_zeros("enc.metric.proj.b", &[self.cfg.metric_dim]);
        store.init_uniform(
            "enc.log.w",
            &[self.cfg.log_dim, self.cfg.template_cap],
            self.cfg.template_cap,
            rng,
        );
        store.init_zeros("enc.log.b", &[self.cfg.log_dim]);
        store.init_uniform("enc.trace.conv.w", &[c, 6 * 3], 6 * 3, rng);
        store.init_zeros("enc.trace.conv.b", &[c]);
        store.init_uniform("enc.trace.proj.w", &[self.cfg.trace_dim, c], c, rng);
        store.init_zeros("enc.trace.proj.b", &[self.cfg.trace_dim]);
        let fused_in = self.cfg.metric_dim + self.cfg.log_dim + self.cfg.trace_dim;
        store.init_uniform("enc.fuse.w", &[self.cfg.fused_dim, fused_in], fused_in, rng);
        store.init_zeros("enc.fuse.b", &[self.cfg.fused_dim]);
    }

    pub fn encode_metrics(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bindings: &mut Bindings,
        metric: &[Vec<f64>],
    ) -> Result<TensorId, EncoderError> {
        let d = metric.len().max(1);
        let len = metric.first().map(|r| r.len()).unwrap_or(0);
        let w = self.cfg.patch_width;
        let n_patches = patch_count(len, w, self.cfg.patch_stride)?;
        let conv1_w = store.bind_cached(tape, bindings, "enc.metric.conv1.w");
        let conv1_b = store.bind_cached(tape, bindings, "enc.metric.conv1.b");
        let conv2_w = store.bind_cached(tape, bindings, "enc.metric.conv2.w");
        let conv2_b = store.bind_cached(tape, bindings, "enc.metric.conv2.b");
        let proj_w = store.bind_cached(tape, bindings, "enc.metric.proj.w");
        let proj_b = store.bind_cached(tape, bindings, "enc.metric.proj.b");
        let mut patch_embs = Vec::with_capacity(n_patches);
        for p in 0..n_patches {
            let start = p * self.cfg.patch_stride;
            let mut values = Vec::with_capacity(d * w);
            for row in metric {
                values.extend_from_slice(&row[start..start + w]);
            }
            let patch = tape.constant(&[d, w], values);
            let h = tape.conv1d(patch, conv1_w, 3, 1)?;
            let h = tape.broadcast_add_col(h, conv1_b)?;
            let h = tape.elu(h);
            let h = tape.conv1d(h, conv2_w, 3, 2)?;
            let h = tape.broadcast_add_col(h, conv2_b)?;
            let h = tape.elu(h);
            patch_embs.push(tape.mean_over_cols(h)?);
        }
        let stacked = tape.stack_rows(&patch_embs)?;
        let pooled = tape.mean_over_rows(stacked)?;
        let out = tape.matvec(proj_w, pooled)?;
        let out = tape.add(out, proj_b)?;
        Ok(tape.tanh(out))
    }

    pub fn encode_logs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bindings: &mut Bindings,
        pfidf: &[f64],
    ) -> Result<TensorId, EncoderError> {
        if pfidf.len() != self.cfg.template_cap {
            return Err(EncoderError::DimMismatch {
                got: vec![pfidf.len()],
                want: vec![self.cfg.template_cap],
            });
        }
        let w = store.bind_cached(tape, bindings, "enc.log.w");
        let b = store.bind_cached(tape, bindings, "enc.log.b");
        let x = tape.constant(&[pfidf.len()], pfidf.to_vec());
        let out = tape.matvec(w, x)?;
        let out = tape.add(out, b)?;
        Ok(tape.tanh(out))
    }

    pub fn encode_traces(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bindings: &mut Bindings,
        trace: &[f64],
    ) -> Result<TensorId, EncoderError> {
        let n = self.cfg.trace_intervals;
        if trace.len() != 6 * n {
            return Err(EncoderError::DimMismatch {
                got: vec![trace.len()],
                want: vec![6 * n],
            });
        }
        let conv_w = store.bind_cached(tape, bindings, "enc.trace.conv.w");
        let conv_b = store.bind_cached(tape, bindings, "enc.trace.conv.b");
        let proj_w = store.bind_cached(tape, bindings, "enc.trace.proj.w");
        let proj_b = store.bind_cached(tape, bindings, "enc.trace.proj.b");
        let x = tape.constant(&[6, n], trace.to_vec());
        let h = tape.conv1d(x, conv_w, 3, 1)?;
        let h = tape.broadcast_add_col(h, conv_b)?;
        let h = tape.elu(h);
        let pooled = tape.mean_over_cols(h)?;
        let out = tape.matvec(proj_w, pooled)?;
        let out = tape.add(out, proj_b)?;
        Ok(tape.tanh(out))
    }

    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bindings: &mut Bindings,
        metric: TensorId,
        log: TensorId,
        trace: TensorId,
    ) -> Result<TensorId, EncoderError> {
        let got = vec![
            tape.shape(metric).to_vec(),
            tape.shape(log).to_vec(),
            tape.shape(trace).to_vec(),
        ];
        let want = vec![
            vec![self.cfg.metric_dim],
            vec![self.cfg.log_dim],
            vec![self.cfg.trace_dim],
        ];
        if got != want {
            return Err(EncoderError::DimMismatch {
                got: got.into_iter().flatten().collect(),
                want: want.into_iter().flatten().collect(),
            });
        }
        let w = store.bind_cached(tape, bindings, "enc.fuse.w");
        let b = store.bind_cached(tape, bindings, "enc.fuse.b");
        let x = tape.concat(&[metric, log, trace])?;
        let out = tape.matvec(w, x)?;
        let out = tape.add(out, b)?;
        Ok(tape.tanh(out))
    }

    /// Per-entity modality embeddings plus the fused feature.
    pub fn encode_entity(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bindings: &mut Bindings,
        inputs: &EntityInputs,
    ) -> Result<EntityEmbedding, EncoderError> {
        let metric = self.encode_metrics(tape, store, bindings, &inputs.metric)?;
        let log = self.encode_logs(tape, store, bindings, &inputs.pfidf)?;
        let trace = self.encode_traces(tape, store, bindings, &inputs.trace)?;
        let fused = self.fuse(tape, store, bindings, metric, log, trace)?;
        Ok(EntityEmbedding {
            metric,
            log,
            trace,
            fused,
        })
    }

    pub fn encode_all(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bindings: &mut Bindings,
        inputs: &[EntityInputs],
    ) -> Result<Vec<EntityEmbedding>, EncoderError> {
        inputs
            .iter()
            .map(|x| self.encode_entity(tape, store, bindings, x))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EntityEmbedding {
    pub metric: TensorId,
    pub log: TensorId,
    pub trace: TensorId,
    pub fused: TensorId,
}
