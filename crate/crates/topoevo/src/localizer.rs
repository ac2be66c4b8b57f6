//! Topology-aware representation learning over the dependency graph and the
//! two supervised heads: per-entity root-cause scoring and graph-level fault
//! classification.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{Encoders, EncoderError, EntityInputs};
use crate::graph::{DependencyGraph, Saliency};
use crate::params::{AdamConfig, Bindings, ParamStore};
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum LocalizerError {
    #[error("empty graph")]
    EmptyGraph,
    #[error("feature count {features} does not match entity count {entities}")]
    FeatureMismatch { features: usize, entities: usize },
    #[error("label index {index} out of range {len}")]
    LabelOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizerConfig {
    pub in_dim: usize,
    pub heads: usize,
    pub hidden_head_dim: usize,
    pub out_dim: usize,
    pub mlp_hidden: usize,
    pub n_classes: usize,
    pub leaky_slope: f64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            in_dim: 64,
            heads: 8,
            hidden_head_dim: 8,
            out_dim: 32,
            mlp_hidden: 16,
            n_classes: 5,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Localizer {
    pub cfg: LocalizerConfig,
}

/// In-neighbors plus a self-loop, as entity positions, per entity.
pub fn in_neighbors_with_self(g: &DependencyGraph) -> Vec<Vec<usize>> {
    let n = g.len();
    let mut neigh: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for e in g.edges() {
        let src = g.position(&e.src).expect("edge src in graph");
        let dst = g.position(&e.dst).expect("edge dst in graph");
        neigh[dst].push(src);
    }
    for list in &mut neigh {
        list.sort_unstable();
        list.dedup();
    }
    neigh
}

/// Self-loops only: the topology-ablated neighborhood structure.
pub fn self_loops_only(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| vec![i]).collect()
}

/// Per-layer attention, averaged over heads, keyed by `(src, dst)` position.
pub type AttentionMaps = Vec<BTreeMap<(usize, usize), f64>>;

pub struct GatOutput {
    /// Per-entity topology-aware state, `[out_dim]` each.
    pub states: Vec<TensorId>,
    pub attention: AttentionMaps,
}

impl Localizer {
    pub fn new(cfg: LocalizerConfig) -> Self {
        Self { cfg }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = &self.cfg;
        for h in 0..c.heads {
            store.init_uniform(
                &format!("gat.l1.h{h}.w"),
                &[c.hidden_head_dim, c.in_dim],
                c.in_dim,
                rng,
            );
            store.init_uniform(&format!("gat.l1.h{h}.a1"), &[c.hidden_head_dim], c.hidden_head_dim, rng);
            store.init_uniform(&format!("gat.l1.h{h}.a2"), &[c.hidden_head_dim], c.hidden_head_dim, rng);
        }
        let l2_in = c.heads * c.hidden_head_dim;
        for h in 0..c.heads {
            store.init_uniform(&format!("gat.l2.h{h}.w"), &[c.out_dim, l2_in], l2_in, rng);
            store.init_uniform(&format!("gat.l2.h{h}.a1"), &[c.out_dim], c.out_dim, rng);
            store.init_uniform(&format!("gat.l2.h{h}.a2"), &[c.out_dim], c.out_dim, rng);
        }
        store.init_uniform("rcl.w1", &[c.mlp_hidden, c.out_dim], c.out_dim, rng);
        store.init_zeros("rcl.b1", &[c.mlp_hidden]);
        store.init_uniform("rcl.w2", &[1, c.mlp_hidden], c.mlp_hidden, rng);
        store.init_zeros("rcl.b2", &[1]);
        store.init_uniform("cls.pool.w", &[1, c.out_dim], c.out_dim, rng);
        store.init_uniform("cls.w1", &[c.mlp_hidden, c.out_dim], c.out_dim, rng);
        store.init_zeros("cls.b1", &[c.mlp_hidden]);
        store.init_uniform("cls.w2", &[c.n_classes, c.mlp_hidden], c.mlp_hidden, rng);
        store.init_zeros("cls.b2", &[c.n_classes]);
    }

    fn gat_layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bindings: &mut Bindings,
        layer: &str,
        x: TensorId,
        neigh: &[Vec<usize>],
        final_layer: bool,
    ) -> Result<(TensorId, BTreeMap<(usize, usize), f64>), LocalizerError> {
        let n = neigh.len();
        let mut head_outputs: Vec<Vec<TensorId>> = Vec::with_capacity(self.cfg.heads);
        let mut attn_acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for h in 0..self.cfg.heads {
            let w = store.bind_cached(tape, bindings, &format!("gat.{layer}.h{h}.w"));
            let a1 = store.bind_cached(tape, bindings, &format!("gat.{layer}.h{h}.a1"));
            let a2 = store.bind_cached(tape, bindings, &format!("gat.{layer}.h{h}.a2"));
            let wt = tape.transpose(w)?;
            let wh = tape.matmul(x, wt)?;
            let s1 = tape.matvec(wh, a1)?;
            let s2 = tape.matvec(wh, a2)?;
            let mut per_entity = Vec::with_capacity(n);
            for (i, js) in neigh.iter().enumerate() {
                let s1_i = tape.index(s1, i)?;
                let s2_j = tape.gather(s2, js)?;
                let e = tape.add_scalar(s2_j, s1_i)?;
                let e = tape.leaky_relu(e, self.cfg.leaky_slope);
                let alpha = tape.softmax(e)?;
                for (k, &j) in js.iter().enumerate() {
                    *attn_acc.entry((j, i)).or_insert(0.0) +=
                        tape.values(alpha)[k] / self.cfg.heads as f64;
                }
                let rows = tape.gather_rows(wh, js)?;
                let rows_t = tape.transpose(rows)?;
                let agg = tape.matvec(rows_t, alpha)?;
                per_entity.push(if final_layer { agg } else { tape.elu(agg) });
            }
            head_outputs.push(per_entity);
        }
        let mut out_rows = Vec::with_capacity(n);
        for i in 0..n {
            if final_layer {
                // average heads
                let mut acc = head_outputs[0][i];
                for head in head_outputs.iter().skip(1) {
                    acc = tape.add(acc, head[i])?;
                }
                out_rows.push(tape.scale(acc, 1.0 / self.cfg.heads as f64));
            } else {
                // concatenate heads
                let parts: Vec<TensorId> = head_outputs.iter().map(|head| head[i]).collect();
                out_rows.push(tape.concat(&parts)?);
            }
        }
        Ok((tape.stack_rows(&out_rows)?, attn_acc))
    }

    /// Two attention layers over the given neighborhood structure. Features
    /// are stacked per entity in graph order.
    pub fn gat_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bindings: &mut Bindings,
        features: &[TensorId],
        neigh: &[Vec<usize>],
    ) -> Result<GatOutput, LocalizerError> {
        if features.is_empty() {
            return Err(LocalizerError::EmptyGraph);
        }
        if features.len() != neigh.len() {
            return Err(LocalizerError::FeatureMismatch {
                features: features.len(),
                entities: neigh.len(),
            });
        }
        let x = tape.stack_rows(features)?;
        let (h1, attn1) = self.gat_layer(tape, store, bindings, "l1", x, neigh, false)?;
        let (h2, attn2) = self.gat_layer(tape, store, bindings, "l2", h1, neigh, true)?;
        let states = (0..features.len())
            .map(|i| tape.row(h2, i))
            .collect::<crate::tensor::Result<_>>()?;
        Ok(GatOutput {
            states,
            attention: vec![attn1, attn2],
        })
    }

    /// Per-entity root-cause distribution: shared MLP logit per entity,
    /// softmax across the incident's entities.
    pub fn localize(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bindings: &mut Bindings,
        states: &[TensorId],
    ) -> Result<TensorId, LocalizerError> {
        if states.is_empty() {
            return Err(LocalizerError::EmptyGraph);
        }
        let w1 = store.bind_cached(tape, bindings, "rcl.w1");
        let b1 = store.bind_cached(tape, bindings, "rcl.b1");
        let w2 = store.bind_cached(tape, bindings, "rcl.w2");
        let b2 = store.bind_cached(tape, bindings, "rcl.b2");
        let mut logits = Vec::with_capacity(states.len());
        for &h in states {
            let z = tape.matvec(w1, h)?;
            let z = tape.add(z, b1)?;
            let z = tape.elu(z);
            let z = tape.matvec(w2, z)?;
            let z = tape.add(z, b2)?;
            logits.push(z);
        }
        let stacked = tape.concat(&logits)?;
        Ok(tape.softmax(stacked)?)
    }

    /// Attentive pooling over entity states followed by a fault-type MLP.
    pub fn classify(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bindings: &mut Bindings,
        states: &[TensorId],
    ) -> Result<TensorId, LocalizerError> {
        if states.is_empty() {
            return Err(LocalizerError::EmptyGraph);
        }
        let pool_w = store.bind_cached(tape, bindings, "cls.pool.w");
        let w1 = store.bind_cached(tape, bindings, "cls.w1");
        let b1 = store.bind_cached(tape, bindings, "cls.b1");
        let w2 = store.bind_cached(tape, bindings, "cls.w2");
        let b2 = store.bind_cached(tape, bindings, "cls.b2");
        let mut scores = Vec::with_capacity(states.len());
        for &h in states {
            scores.push(tape.matvec(pool_w, h)?);
        }
        let stacked = tape.concat(&scores)?;
        let alpha = tape.softmax(stacked)?;
        let hmat = tape.stack_rows(states)?;
        let hmat_t = tape.transpose(hmat)?;
        let g = tape.matvec(hmat_t, alpha)?;
        let z = tape.matvec(w1, g)?;
        let z = tape.add(z, b1)?;
        let z = tape.elu(z);
        let z = tape.matvec(w2, z)?;
        let z = tape.add(z, b2)?;
        Ok(tape.softmax(z)?)
    }
}

/// `-ln p_rcl[root] + lambda_cls * (-ln y_hat[fault])`.
pub fn joint_loss(
    tape: &mut Tape,
    p_rcl: TensorId,
    y_hat: TensorId,
    root_index: usize,
    fault_index: usize,
    lambda_cls: f64,
) -> Result<TensorId, LocalizerError> {
    let n = tape.values(p_rcl).len();
    if root_index >= n {
        return Err(LocalizerError::LabelOutOfRange {
            index: root_index,
            len: n,
        });
    }
    let c = tape.values(y_hat).len();
    if fault_index >= c {
        return Err(LocalizerError::LabelOutOfRange {
            index: fault_index,
            len: c,
        });
    }
    let p = tape.index(p_rcl, root_index)?;
    let lp = tape.ln(p);
    let l_rcl = tape.neg(lp);
    let q = tape.index(y_hat, fault_index)?;
    let lq = tape.ln(q);
    let l_cls = tape.neg(lq);
    let l_cls = tape.scale(l_cls, lambda_cls);
    Ok(tape.add(l_rcl, l_cls)?)
}

/// Attention-derived edge weights and score-derived node weights for path
/// ranking, using the final layer's head-averaged attention.
pub fn saliency_from(
    g: &DependencyGraph,
    attention: &AttentionMaps,
    p_rcl: &[f64],
) -> Saliency {
    let mut saliency = Saliency::default();
    if let Some(last) = attention.last() {
        for (&(j, i), &a) in last {
            let src = g.entities()[j].id.clone();
            let dst = g.entities()[i].id.clone();
            saliency.edge.insert((src, dst), a);
        }
    }
    for (i, e) in g.entities().iter().enumerate() {
        saliency.node.insert(e.id.clone(), p_rcl.get(i).copied().unwrap_or(0.0));
    }
    saliency
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One labeled incident, preprocessed for the differentiable pipeline.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub graph: DependencyGraph,
    pub inputs: Vec<EntityInputs>,
    pub root_index: usize,
    pub fault_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub lambda_cls: f64,
    pub adam: AdamConfig,
    /// When false, attention sees self-loops only (topology ablation).
    pub use_topology: bool,
    pub metrics_csv: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            seed: 42,
            lambda_cls: 1.0,
            adam: AdamConfig::default(),
            use_topology: true,
            metrics_csv: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub acc_at_1: f64,
}

/// Full differentiable forward pass for one incident.
pub struct ForwardOutput {
    pub states: Vec<TensorId>,
    pub p_rcl: TensorId,
    pub y_hat: TensorId,
    pub attention: AttentionMaps,
}

pub fn forward_incident(
    tape: &mut Tape,
    store: &ParamStore,
    bindings: &mut Bindings,
    enc: &Encoders,
    loc: &Localizer,
    example: &TrainingExample,
    use_topology: bool,
) -> Result<ForwardOutput, LocalizerError> {
    let embs = enc.encode_all(tape, store, bindings, &example.inputs)?;
    let features: Vec<TensorId> = embs.iter().map(|e| e.fused).collect();
    let neigh = if use_topology {
        in_neighbors_with_self(&example.graph)
    } else {
        self_loops_only(example.graph.len())
    };
    let gat = loc.gat_forward(tape, store, bindings, &features, &neigh)?;
    let p_rcl = loc.localize(tape, store, bindings, &gat.states)?;
    let y_hat = loc.classify(tape, store, bindings, &gat.states)?;
    Ok(ForwardOutput {
        states: gat.states,
        p_rcl,
        y_hat,
        attention: gat.attention,
    })
}

/// Minimize the joint objective over the training examples; returns
/// per-epoch metrics and optionally writes them as CSV.
pub fn train(
    enc: &Encoders,
    loc: &Localizer,
    store: &mut ParamStore,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>, LocalizerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for &i in &order {
            let example = &examples[i];
            let mut tape = Tape::new();
            let mut bindings = Bindings::default();
            let out = forward_incident(
                &mut tape,
                store,
                &mut bindings,
                enc,
                loc,
                example,
                cfg.use_topology,
            )?;
            let loss = joint_loss(
                &mut tape,
                out.p_rcl,
                out.y_hat,
                example.root_index,
                example.fault_index,
                cfg.lambda_cls,
            )?;
            loss_sum += tape.scalar(loss);
            let p = tape.values(out.p_rcl);
            let argmax = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(k, _)| k)
                .unwrap_or(0);
            if argmax == example.root_index {
                hits += 1;
            }
            let grads = tape.backward(loss)?;
            store.adam_step(&grads, &bindings, &cfg.adam);
        }
        history.push(EpochMetrics {
            epoch,
            mean_loss: loss_sum / examples.len().max(1) as f64,
            acc_at_1: hits as f64 / examples.len().max(1) as f64,
        });
    }
    if let Some(path) = &cfg.metrics_csv {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "epoch,mean_loss,acc_at_1")?;
        for m in &history {
            writeln!(f, "{},{},{}", m.epoch, m.mean_loss, m.acc_at_1)?;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DependencyGraph, Edge, Entity, Level, Relation};

    fn entity(id: &str) -> Entity {
        Entity {
            id: id.to_string(),
            level: Level::Service,
            parent_service: None,
            host_node: None,
        }
    }

    fn call(src: &str, dst: &str) -> Edge {
        Edge {
            src: src.to_string(),
            dst: dst.to_string(),
            relation: Relation::Call,
        }
    }

    fn setup() -> (Localizer, ParamStore) {
        let loc = Localizer::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        loc.init(&mut store, &mut rng);
        (loc, store)
    }

    fn random_features(tape: &mut Tape, n: usize, dim: usize, seed: u64) -> Vec<TensorId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
                tape.constant(&[dim], v)
            })
            .collect()
    }

    #[test]
    fn singleton_self_loop_attention_one() {
        let (loc, store) = setup();
        let mut tape = Tape::new();
        let mut bindings = Bindings::default();
        let feats = random_features(&mut tape, 1, 64, 1);
        let out = loc
            .gat_forward(&mut tape, &store, &mut bindings, &feats, &self_loops_only(1))
            .unwrap();
        for layer in &out.attention {
            assert!((layer[&(0, 0)] - 1.0).abs() < 1e-12);
        }
        assert_eq!(tape.values(out.states[0]).len(), 32);
    }

    #[test]
    fn identical_neighbors_share_attention() {
        let g = DependencyGraph::from_parts(
            vec![entity("a"), entity("b"), entity("c")],
            vec![call("a", "c"), call("b", "c")],
        )
        .unwrap();
        let (loc, store) = setup();
        let mut tape = Tape::new();
        let mut bindings = Bindings::default();
        let shared: Vec<f64> = (0..64).map(|i| (i as f64 * 0.1).sin()).collect();
        let feats: Vec<TensorId> = (0..3).map(|_| tape.constant(&[64], shared.clone())).collect();
        let out = loc
            .gat_forward(
                &mut tape,
                &store,
                &mut bindings,
                &feats,
                &in_neighbors_with_self(&g),
            )
            .unwrap();
        let a_to_c = out.attention[0][&(0, 2)];
        let b_to_c = out.attention[0][&(1, 2)];
        assert!((a_to_c - b_to_c).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let g = DependencyGraph::from_parts(
            vec![entity("a"), entity("b"), entity("c"), entity("d")],
            vec![call("a", "b"), call("b", "c"), call("c", "d"), call("a", "d")],
        )
        .unwrap();
        let (loc, store) = setup();
        let mut tape = Tape::new();
        let mut bindings = Bindings::default();
        let feats = random_features(&mut tape, 4, 64, 2);
        let out = loc
            .gat_forward(
                &mut tape,
                &store,
                &mut bindings,
                &feats,
                &in_neighbors_with_self(&g),
            )
            .unwrap();
        for layer in &out.attention {
            let mut row_sums: BTreeMap<usize, f64> = BTreeMap::new();
            for (&(_, i), &a) in layer {
                *row_sums.entry(i).or_insert(0.0) += a;
            }
            for (_, s) in row_sums {
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn localize_uniform_for_identical_states() {
        let (loc, store) = setup();
        let mut tape = Tape::new();
        let mut bindings = Bindings::default();
        let state: Vec<f64> = (0..32).map(|i| (i as f64).cos()).collect();
        let states: Vec<TensorId> = (0..8).map(|_| tape.constant(&[32], state.clone())).collect();
        let p = loc.localize(&mut tape, &store, &mut bindings, &states).unwrap();
        let v = tape.values(p);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for &x in v {
            assert!((x - 0.125).abs() < 1e-9);
        }
        assert!(matches!(
            loc.localize(&mut tape, &store, &mut bindings, &[]),
            Err(LocalizerError::EmptyGraph)
        ));
    }

    #[test]
    fn classify_sums_to_one_and_uniform_when_flat() {
        let (loc, mut store) = setup();
        let mut tape = Tape::new();
        let mut bindings = Bindings::default();
        let states = random_features(&mut tape, 5, 32, 3);
        let y = loc.classify(&mut tape, &store, &mut bindings, &states).unwrap();
        assert!((tape.values(y).iter().sum::<f64>() - 1.0).abs() < 1e-9);

        store.set("cls.w2", &[5, 16], vec![0.0; 80]);
        store.set("cls.b2", &[5], vec![0.0; 5]);
        let mut tape = Tape::new();
        let mut bindings = Bindings::default();
        let states = random_features(&mut tape, 5, 32, 3);
        let y = loc.classify(&mut tape, &store, &mut bindings, &states).unwrap();
        for &p in tape.values(y) {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_loss_uniform_and_lambda_zero() {
        let mut tape = Tape::new();
        let n = 56;
        let p = tape.constant(&[n], vec![1.0 / n as f64; n]);
        let y = tape.constant(&[5], vec![0.2; 5]);
        let loss = joint_loss(&mut tape, p, y, 0, 0, 0.0).unwrap();
        assert!((tape.scalar(loss) - (n as f64).ln()).abs() < 1e-9);
        assert!(((n as f64).ln() - 4.0254).abs() < 1e-3);
        let loss_full = joint_loss(&mut tape, p, y, 0, 0, 1.0).unwrap();
        assert!((tape.scalar(loss_full) - ((n as f64).ln() + (5.0f64).ln())).abs() < 1e-9);
        assert!(matches!(
            joint_loss(&mut tape, p, y, 99, 0, 1.0),
            Err(LocalizerError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            joint_loss(&mut tape, p, y, 0, 7, 1.0),
            Err(LocalizerError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn relabeling_permutes_scores() {
        let entities = vec![entity("a"), entity("b"), entity("c")];
        let edges = vec![call("a", "b"), call("b", "c")];
        let g = DependencyGraph::from_parts(entities, edges.clone()).unwrap();
        let perm = [2usize, 0, 1];
        let permuted_entities: Vec<Entity> = perm.iter().map(|&i| entity(["a", "b", "c"][i])).collect();
        let g2 = DependencyGraph::from_parts(permuted_entities, edges).unwrap();

        let (loc, store) = setup();
        let feat_rows: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..64).map(|j| ((i * 64 + j) as f64 * 0.01).sin()).collect())
            .collect();

        let mut tape = Tape::new();
        let mut bindings = Bindings::default();
        let feats: Vec<TensorId> = feat_rows.iter().map(|r| tape.constant(&[64], r.clone())).collect();
        let out = loc
            .gat_forward(&mut tape, &store, &mut bindings, &feats, &in_neighbors_with_self(&g))
            .unwrap();
        let p1_id = loc.localize(&mut tape, &store, &mut bindings, &out.states).unwrap();
        let p1 = tape.values(p1_id).to_vec();

        let mut tape = Tape::new();
        let mut bindings = Bindings::default();
        let feats2: Vec<TensorId> = perm
            .iter()
            .map(|&i| tape.constant(&[64], feat_rows[i].clone()))
            .collect();
        let out2 = loc
            .gat_forward(&mut tape, &store, &mut bindings, &feats2, &in_neighbors_with_self(&g2))
            .unwrap();
        let p2_id = loc.localize(&mut tape, &store, &mut bindings, &out2.states).unwrap();
        let p2 = tape.values(p2_id).to_vec();

        for (k, &i) in perm.iter().enumerate() {
            assert!((p2[k] - p1[i]).abs() < 1e-9, "permuted prob mismatch");
        }
    }

    #[test]
    fn saliency_covers_graph() {
        let g = DependencyGraph::from_parts(
            vec![entity("a"), entity("b")],
            vec![call("a", "b")],
        )
        .unwrap();
        let (loc, store) = setup();
        let mut tape = Tape::new();
        let mut bindings = Bindings::default();
        let feats = random_features(&mut tape, 2, 64, 5);
        let out = loc
            .gat_forward(&mut tape, &store, &mut bindings, &feats, &in_neighbors_with_self(&g))
            .unwrap();
        let p = loc.localize(&mut tape, &store, &mut bindings, &out.states).unwrap();
        let saliency = saliency_from(&g, &out.attention, tape.values(p));
        assert!(saliency.edge.contains_key(&("a".into(), "b".into())));
        assert_eq!(saliency.node.len(), 2);
    }
}
