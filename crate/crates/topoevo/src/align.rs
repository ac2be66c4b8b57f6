//! Contrastive pretraining that splits each metric embedding into two
//! orthogonally regularized components and aligns logs with one and traces
//! with the other.

use serde::{Deserialize, Serialize};

use crate::encoders::{Encoders, EntityInputs};
use crate::params::{AdamConfig, Bindings, ParamStore};
use crate::tensor::{Result, Tape, TensorId};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub proj_dim: usize,
    pub metric_dim: usize,
    pub tau: f64,
    pub lambda_orth: f64,
    pub eps: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            proj_dim: 16,
            metric_dim: 32,
            tau: 0.2,
            lambda_orth: 0.1,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Alignment {
    pub cfg: AlignmentConfig,
}

impl Alignment {
    pub fn new(cfg: AlignmentConfig) -> Self {
        Self { cfg }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        store.init_uniform(
            "align.u.w",
            &[self.cfg.proj_dim, self.cfg.metric_dim],
            self.cfg.metric_dim,
            rng,
        );
        store.init_uniform(
            "align.v.w",
            &[self.cfg.proj_dim, self.cfg.metric_dim],
            self.cfg.metric_dim,
            rng,
        );
    }

    /// Bias-free component maps: `u = W_u x`, `v = W_v x`.
    pub fn project(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bindings: &mut Bindings,
        x_metric: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let wu = store.bind_cached(tape, bindings, "align.u.w");
        let wv = store.bind_cached(tape, bindings, "align.v.w");
        Ok((tape.matvec(wu, x_metric)?, tape.matvec(wv, x_metric)?))
    }
}

/// Cosine similarity with an epsilon-guarded denominator; zero-norm inputs
/// give a value near zero instead of an error.
pub fn cosine(tape: &mut Tape, a: TensorId, b: TensorId, eps: f64) -> Result<TensorId> {
    let num = tape.dot(a, b)?;
    let aa = tape.dot(a, a)?;
    let bb = tape.dot(b, b)?;
    let na = tape.sqrt(aa);
    let nb = tape.sqrt(bb);
    let denom = tape.mul(na, nb)?;
    let denom = tape.add_const(denom, eps);
    tape.div(num, denom)
}

/// Unit-normalized copy of a vector, with epsilon-guarded norm.
fn normalize(tape: &mut Tape, x: TensorId, eps: f64) -> Result<TensorId> {
    let sq = tape.dot(x, x)?;
    let norm = tape.sqrt(sq);
    let norm = tape.add_const(norm, eps);
    let one = tape.constant(&[1], vec![1.0]);
    let inv = tape.div(one, norm)?;
    tape.scale_by(x, inv)
}

/// Sum of squared cosines over paired `(u, v)` batch items.
pub fn orthogonality_loss(
    tape: &mut Tape,
    pairs: &[(TensorId, TensorId)],
    eps: f64,
) -> Result<TensorId> {
    let mut terms = Vec::with_capacity(pairs.len());
    for &(u, v) in pairs {
        let c = cosine(tape, u, v, eps)?;
        terms.push(tape.mul(c, c)?);
    }
    if terms.is_empty() {
        return Ok(tape.constant(&[1], vec![0.0]));
    }
    let stacked = tape.concat(&terms)?;
    Ok(tape.sum(stacked))
}

/// InfoNCE over a batch of paired embeddings with cosine similarity:
/// `-sum_i log softmax_j(sim(a_i, b_j)/tau)[i]`.
pub fn info_nce(
    tape: &mut Tape,
    a: &[TensorId],
    b: &[TensorId],
    tau: f64,
    eps: f64,
) -> Result<TensorId> {
    assert_eq!(a.len(), b.len(), "info_nce needs equal-size batches");
    let batch = a.len();
    if batch == 0 {
        return Ok(tape.constant(&[1], vec![0.0]));
    }
    let a_norm: Vec<TensorId> = a
        .iter()
        .map(|&x| normalize(tape, x, eps))
        .collect::<Result<_>>()?;
    let b_norm: Vec<TensorId> = b
        .iter()
        .map(|&x| normalize(tape, x, eps))
        .collect::<Result<_>>()?;
    let am = tape.stack_rows(&a_norm)?;
    let bm = tape.stack_rows(&b_norm)?;
    let bt = tape.transpose(bm)?;
    let sim = tape.matmul(am, bt)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let mut diag_terms = Vec::with_capacity(batch);
    for i in 0..batch {
        let row = tape.row(sim, i)?;
        let logp = tape.log_softmax(row)?;
        diag_terms.push(tape.index(logp, i)?);
    }
    let stacked = tape.concat(&diag_terms)?;
    let total = tape.sum(stacked);
    Ok(tape.neg(total))
}

/// Combined pretraining loss over one batch of per-entity modality
/// embeddings: logs are pulled toward `u`, traces toward `v`, and the two
/// components are pushed orthogonal.
pub fn align_loss(
    tape: &mut Tape,
    align: &Alignment,
    store: &ParamStore,
    bindings: &mut Bindings,
    metric: &[TensorId],
    logs: &[TensorId],
    traces: &[TensorId],
) -> Result<TensorId> {
    let mut us = Vec::with_capacity(metric.len());
    let mut vs = Vec::with_capacity(metric.len());
    for &m in metric {
        let (u, v) = align.project(tape, store, bindings, m)?;
        us.push(u);
        vs.push(v);
    }
    let nce_log = info_nce(tape, logs, &us, align.cfg.tau, align.cfg.eps)?;
    let nce_trace = info_nce(tape, traces, &vs, align.cfg.tau, align.cfg.eps)?;
    let pairs: Vec<(TensorId, TensorId)> = us.iter().copied().zip(vs.iter().copied()).collect();
    let orth = orthogonality_loss(tape, &pairs, align.cfg.eps)?;
    let contrastive = tape.add(nce_log, nce_trace)?;
    let orth_scaled = tape.scale(orth, align.cfg.lambda_orth);
    tape.add(contrastive, orth_scaled)
}

/// Pretrain encoders plus alignment maps with the alignment loss only.
/// One optimization step per incident (batch = that incident's entities);
/// returns the per-step loss history.
pub fn pretrain_alignment(
    enc: &Encoders,
    align: &Alignment,
    store: &mut ParamStore,
    incidents: &[Vec<EntityInputs>],
    epochs: usize,
    adam: &AdamConfig,
) -> Vec<f64> {
    let mut history = Vec::new();
    for _ in 0..epochs {
        for inputs in incidents {
            let mut tape = Tape::new();
            let mut bindings = Bindings::default();
            let embs = enc
                .encode_all(&mut tape, store, &mut bindings, inputs)
                .expect("encode batch");
            let metric: Vec<TensorId> = embs.iter().map(|e| e.metric).collect();
            let logs: Vec<TensorId> = embs.iter().map(|e| e.log).collect();
            let traces: Vec<TensorId> = embs.iter().map(|e| e.trace).collect();
            let loss = align_loss(
                &mut tape,
                align,
                store,
                &mut bindings,
                &metric,
                &logs,
                &traces,
            )
            .expect("alignment loss");
            history.push(tape.scalar(loss));
            let grads = tape.backward(loss).expect("backward");
            store.adam_step(&grads, &bindings, adam);
        }
    }
    history
}
