//! Shared finite-difference machinery for the gradient-check and acceptance
//! test targets.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use topoevo::align::{align_loss, Alignment, AlignmentConfig};
use topoevo::encoders::{EncoderConfig, Encoders, EntityInputs};
use topoevo::graph::{build_graph, ServiceSpec, TopologySpec};
use topoevo::localizer::{
    forward_incident, joint_loss, Localizer, LocalizerConfig, TrainingExample,
};
use topoevo::params::{Bindings, ParamStore};
use topoevo::tensor::Tape;
use topoevo::vq::vq_loss;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
pub const COORDS_PER_PARAM: usize = 3;

/// Evaluate `loss_of` under central differences for a sample of coordinates
/// of every parameter touched by the analytic pass and compare gradients.
pub fn check<F>(store: &mut ParamStore, rng: &mut ChaCha8Rng, family: &str, loss_of: F)
where
    F: Fn(&ParamStore) -> (f64, Vec<(String, Vec<f64>)>),
{
    let (_, grads) = loss_of(store);
    assert!(!grads.is_empty(), "{family}: no parameters bound");
    for (name, grad) in &grads {
        let param = store.get(name).expect("bound param exists").clone();
        let n = param.values.len();
        assert_eq!(grad.len(), n, "{family}: gradient shape for {name}");
        let mut coords: Vec<usize> = (0..n).collect();
        // sample without replacement
        for i in 0..coords.len().min(COORDS_PER_PARAM) {
            let j = rng.gen_range(i..coords.len());
            coords.swap(i, j);
        }
        for &c in coords.iter().take(COORDS_PER_PARAM.min(n)) {
            let orig = param.values[c];
            let mut bumped = param.values.clone();
            bumped[c] = orig + FD_STEP;
            store.set(name, &param.shape, bumped.clone());
            let (plus, _) = loss_of(store);
            bumped[c] = orig - FD_STEP;
            store.set(name, &param.shape, bumped);
            let (minus, _) = loss_of(store);
            store.set(name, &param.shape, param.values.clone());
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grad[c];
            // floor guards against FD truncation noise on near-zero slopes
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            assert!(
                (analytic - numeric).abs() / denom < REL_TOL,
                "{family} {name}[{c}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}

pub fn small_encoder_cfg() -> EncoderConfig {
    EncoderConfig {
        patch_width: 4,
        patch_stride: 2,
        conv_channels: 2,
        metric_dim: 6,
        log_dim: 4,
        trace_dim: 4,
        fused_dim: 8,
        template_cap: 5,
        trace_intervals: 4,
        trace_timeout_ms: 1000.0,
    }
}

pub fn random_inputs(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, name: &str) -> EntityInputs {
    EntityInputs {
        entity: name.to_string(),
        metric: (0..6)
            .map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
        pfidf: (0..cfg.template_cap)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect(),
        trace: (0..6 * cfg.trace_intervals)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    }
}

pub fn grads_of(
    bindings: &Bindings,
    grads: &topoevo::tensor::Gradients,
) -> Vec<(String, Vec<f64>)> {
    bindings
        .iter()
        .map(|(name, id)| (name.to_string(), grads.get(id).to_vec()))
        .collect()
}

pub fn family_encoders(seeds: u64) {
    let cfg = small_encoder_cfg();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoders::new(cfg.clone());
        let mut store = ParamStore::default();
        enc.init(&mut store, &mut rng);
        let inputs = random_inputs(&mut rng, &cfg, "e");
        check(&mut store, &mut rng, "encoders", |store| {
            let mut tape = Tape::new();
            let mut bindings = Bindings::default();
            let emb = enc
                .encode_entity(&mut tape, store, &mut bindings, &inputs)
                .unwrap();
            // sum of all four outputs exercises every encoder path
            let parts = tape
                .concat(&[emb.metric, emb.log, emb.trace, emb.fused])
                .unwrap();
            let loss = tape.sum(parts);
            let g = tape.backward(loss).unwrap();
            (tape.scalar(loss), grads_of(&bindings, &g))
        });
    }
}

pub fn family_alignment(seeds: u64) {
    let cfg = small_encoder_cfg();
    let align_cfg = AlignmentConfig {
        proj_dim: 4,
        metric_dim: cfg.metric_dim,
        ..AlignmentConfig::default()
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let enc = Encoders::new(cfg.clone());
        let align = Alignment::new(align_cfg.clone());
        let mut store = ParamStore::default();
        enc.init(&mut store, &mut rng);
        align.init(&mut store, &mut rng);
        let inputs: Vec<EntityInputs> = (0..3)
            .map(|i| random_inputs(&mut rng, &cfg, &format!("e{i}")))
            .collect();
        check(&mut store, &mut rng, "alignment", |store| {
            let mut tape = Tape::new();
            let mut bindings = Bindings::default();
            let embs: Vec<_> = inputs
                .iter()
                .map(|x| enc.encode_entity(&mut tape, store, &mut bindings, x).unwrap())
                .collect();
            let metric: Vec<_> = embs.iter().map(|e| e.metric).collect();
            let logs: Vec<_> = embs.iter().map(|e| e.log).collect();
            let traces: Vec<_> = embs.iter().map(|e| e.trace).collect();
            let loss = align_loss(
                &mut tape,
                &align,
                store,
                &mut bindings,
                &metric,
                &logs,
                &traces,
            )
            .unwrap();
            let g = tape.backward(loss).unwrap();
            (tape.scalar(loss), grads_of(&bindings, &g))
        });
    }
}

pub fn family_localizer(seeds: u64) {
    let cfg = small_encoder_cfg();
    let loc_cfg = LocalizerConfig {
        in_dim: cfg.fused_dim,
        heads: 2,
        hidden_head_dim: 3,
        out_dim: 6,
        mlp_hidden: 5,
        n_classes: 5,
        ..LocalizerConfig::default()
    };
    let spec = TopologySpec {
        services: vec![
            ServiceSpec {
                name: "a".into(),
                replicas: 1,
            },
            ServiceSpec {
                name: "b".into(),
                replicas: 2,
            },
        ],
        nodes: vec!["n0".into()],
        calls: vec![("a".into(), "b".into())],
    };
    let g = build_graph(&spec, 0).unwrap();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let enc = Encoders::new(cfg.clone());
        let loc = Localizer::new(loc_cfg.clone());
        let mut store = ParamStore::default();
        enc.init(&mut store, &mut rng);
        loc.init(&mut store, &mut rng);
        let inputs: Vec<EntityInputs> = g
            .entities()
            .iter()
            .map(|e| random_inputs(&mut rng, &cfg, &e.id))
            .collect();
        let example = TrainingExample {
            graph: g.clone(),
            inputs,
            root_index: rng.gen_range(0..g.len()),
            fault_index: rng.gen_range(0..loc_cfg.n_classes),
        };
        check(&mut store, &mut rng, "localizer", |store| {
            let mut tape = Tape::new();
            let mut bindings = Bindings::default();
            let out = forward_incident(&mut tape, store, &mut bindings, &enc, &loc, &example, true)
                .unwrap();
            let loss = joint_loss(
                &mut tape,
                out.p_rcl,
                out.y_hat,
                example.root_index,
                example.fault_index,
                1.0,
            )
            .unwrap();
            let g = tape.backward(loss).unwrap();
            (tape.scalar(loss), grads_of(&bindings, &g))
        });
    }
}

pub fn family_vq(seeds: u64) {
    // The dictionary term carries a stop-gradient on the state, so plain
    // finite differences on the full loss would also see the frozen branch.
    // The FD oracle therefore targets the commitment surrogate
    // beta * ||h - c||^2 built from the same tape ops, and the full loss's
    // analytic state gradient must coincide with the surrogate's.
    let beta = 0.25;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let dim = 5;
        let mut store = ParamStore::default();
        for i in 0..3 {
            store.set(
                &format!("vq.h{i}"),
                &[dim],
                (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
        }
        let codes: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        check(&mut store, &mut rng, "vq", |store| {
            let mut tape = Tape::new();
            let mut bindings = Bindings::default();
            let mut terms = Vec::new();
            for (i, code) in codes.iter().enumerate() {
                let h = store.bind(&mut tape, &mut bindings, &format!("vq.h{i}"));
                let c = tape.constant(&[dim], code.clone());
                let d = tape.sub(h, c).unwrap();
                let dsq = tape.mul(d, d).unwrap();
                let s = tape.sum(dsq);
                terms.push(tape.scale(s, beta));
            }
            let stacked = tape.concat(&terms).unwrap();
            let loss = tape.sum(stacked);
            let g = tape.backward(loss).unwrap();
            (tape.scalar(loss), grads_of(&bindings, &g))
        });

        // full vq_loss: state gradient equals the commitment surrogate's
        let mut tape = Tape::new();
        let mut bindings = Bindings::default();
        let states: Vec<_> = (0..3)
            .map(|i| store.bind(&mut tape, &mut bindings, &format!("vq.h{i}")))
            .collect();
        let code_ids: Vec<_> = codes
            .iter()
            .map(|c| tape.constant(&[dim], c.clone()))
            .collect();
        let loss = vq_loss(&mut tape, &states, &code_ids, beta).unwrap();
        let g = tape.backward(loss).unwrap();
        for (i, &h) in states.iter().enumerate() {
            let hv = &store.get(&format!("vq.h{i}")).unwrap().values;
            for (c, (&hc, &cc)) in hv.iter().zip(&codes[i]).enumerate() {
                let expected = 2.0 * beta * (hc - cc);
                assert!(
                    (g.get(h)[c] - expected).abs() < 1e-12,
                    "vq state grad [{i}][{c}]"
                );
            }
        }
    }
}
