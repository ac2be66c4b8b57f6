//! Experiment orchestration: end-to-end pipeline training, diagnosis with
//! optional memory priors, evaluation, ablations, codebook-size sweeps, and
//! evolution rounds with test-time adaptation.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{pretrain_alignment, Alignment, AlignmentConfig};
use crate::encoders::{
    fit_corpus_stats, mine_templates, prepare_incident_inputs, window_template_ids, CorpusStats,
    EncoderConfig, Encoders, TemplateMiner,
};
use crate::eval::{
    eval_classification, eval_localization, topology_faithfulness, ClassificationEval,
    LocalizationEval,
};
use crate::graph::Saliency;
use crate::het::{
    build_context, decide, gather_evidence, judge, plan_hypotheses, ContextConfig,
    DiagnosisContext, DiagnosisReport, FaultSignatures, Hypothesis, JudgeConfig, ReasonerBackend,
    Verdict,
};
use crate::lexicon::{build_lexicon, sha256_hex, Provenance, SymptomLexicon, VocabQuality};
use crate::localizer::{
    forward_incident, Localizer, LocalizerConfig, TrainConfig, TrainingExample,
};
use crate::memory::{
    fingerprint_from_states, tta_step, MemoryRecord, MemoryStore, TtaBuffer, TtaConfig,
};
use crate::params::{AdamConfig, Bindings, ParamStore};
use crate::sim::{FaultType, Incident};
use crate::tensor::Tape;
use crate::vq::{fit_codebook, Codebook};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("localizer error: {0}")]
    Localizer(#[from] crate::localizer::LocalizerError),
    #[error("diagnosis error: {0}")]
    Het(#[from] crate::het::HetError),
    #[error("lexicon error: {0}")]
    Lexicon(#[from] crate::lexicon::LexiconError),
    #[error("quantization error: {0}")]
    Vq(#[from] crate::vq::VqError),
    #[error("simulator error: {0}")]
    Sim(#[from] crate::sim::SimError),
    #[error("graph error: {0}")]
    Graph(#[from] crate::graph::GraphError),
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Component toggles; all true is the full system.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Contrastive multimodal alignment pretraining.
    pub moma: bool,
    /// Vector-quantized symptom tokens (off: raw per-entity summaries).
    pub vq: bool,
    /// Hypothesis-evidence-test verification (off: localizer ranking final).
    pub het: bool,
    /// Self-evolving memory and test-time adaptation.
    pub sem: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            moma: true,
            vq: true,
            het: true,
            sem: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub localizer: LocalizerConfig,
    pub alignment: AlignmentConfig,
    pub vq_k: usize,
    pub vq_epochs: usize,
    pub vq_beta: f64,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub lambda_cls: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub context: ContextConfig,
    pub judge: JudgeConfig,
    pub max_hypotheses: usize,
    pub tta: TtaConfig,
    pub ablation: AblationFlags,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            localizer: LocalizerConfig::default(),
            alignment: AlignmentConfig::default(),
            vq_k: 128,
            vq_epochs: 20,
            vq_beta: 0.25,
            pretrain_epochs: 5,
            train_epochs: 10,
            lambda_cls: 1.0,
            adam: AdamConfig::default(),
            seed: 42,
            context: ContextConfig::default(),
            judge: JudgeConfig::default(),
            max_hypotheses: 6,
            tta: TtaConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

/// Stable hex digest of a serialized config, recorded in run outputs.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    sha256_hex(json.as_bytes())[..16].to_string()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

pub struct TrainedPipeline {
    pub cfg: PipelineConfig,
    pub enc: Encoders,
    pub loc: Localizer,
    pub align: Alignment,
    pub store: ParamStore,
    pub miner: TemplateMiner,
    pub stats: CorpusStats,
    pub codebook: Codebook,
    pub lexicon: SymptomLexicon,
}

fn dataset_hash(incidents: &[Incident]) -> String {
    let mut acc = String::new();
    for i in incidents {
        acc.push_str(&i.label_root);
        acc.push(':');
        acc.push_str(i.label_fault.name());
        acc.push(';');
    }
    sha256_hex(acc.as_bytes())[..16].to_string()
}

pub fn fit_template_miner(incidents: &[Incident]) -> (TemplateMiner, CorpusStats) {
    let miner = mine_templates(
        incidents
            .iter()
            .flat_map(|i| i.telemetry.logs.values().flatten())
            .map(|e| e.message.as_str())
            .collect::<Vec<_>>(),
    );
    let mut windows = Vec::new();
    for incident in incidents {
        for e in incident.graph.entities() {
            windows.push(window_template_ids(
                incident.telemetry.logs_for(&e.id),
                &miner,
            ));
        }
    }
    let stats = fit_corpus_stats(&windows);
    (miner, stats)
}

pub fn make_examples(
    incidents: &[Incident],
    miner: &TemplateMiner,
    stats: &CorpusStats,
    enc_cfg: &EncoderConfig,
) -> Result<Vec<TrainingExample>, HarnessError> {
    incidents
        .iter()
        .map(|incident| {
            let inputs = prepare_incident_inputs(incident, miner, stats, enc_cfg);
            let root_index = incident.graph.position(&incident.label_root)?;
            Ok(TrainingExample {
                graph: incident.graph.clone(),
                inputs,
                root_index,
                fault_index: incident.label_fault.index(),
            })
        })
        .collect()
}

/// Non-differentiating forward pass products for one incident.
pub struct EvalForward {
    pub states: Vec<Vec<f64>>,
    pub p_rcl: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub saliency: Saliency,
    /// Entity ids ranked by root-cause score, descending (ties by id).
    pub ranking: Vec<String>,
}

pub fn forward_eval(
    pipeline: &TrainedPipeline,
    example: &TrainingExample,
) -> Result<EvalForward, HarnessError> {
    let mut tape = Tape::new();
    let mut bindings = Bindings::default();
    let out = forward_incident(
        &mut tape,
        &pipeline.store,
        &mut bindings,
        &pipeline.enc,
        &pipeline.loc,
        example,
        true,
    )?;
    let p_rcl = tape.values(out.p_rcl).to_vec();
    let y_hat = tape.values(out.y_hat).to_vec();
    let states: Vec<Vec<f64>> = out.states.iter().map(|&s| tape.values(s).to_vec()).collect();
    let saliency = crate::localizer::saliency_from(&example.graph, &out.attention, &p_rcl);
    let mut ranked: Vec<(String, f64)> = example
        .graph
        .entities()
        .iter()
        .zip(&p_rcl)
        .map(|(e, &s)| (e.id.clone(), s))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(EvalForward {
        states,
        p_rcl,
        y_hat,
        saliency,
        ranking: ranked.into_iter().map(|(id, _)| id).collect(),
    })
}

/// Per-entity cluster labels used for vocabulary quality: roots labeled by
/// fault type, propagation victims as one class, healthy entities as another.
pub fn entity_labels(incidents: &[Incident]) -> Vec<usize> {
    let mut labels = Vec::new();
    for incident in incidents {
        for e in incident.graph.entities() {
            let l = if e.id == incident.label_root {
                incident.label_fault.index()
            } else if incident.propagation_path.contains(&e.id) {
                FaultType::ALL.len()
            } else {
                FaultType::ALL.len() + 1
            };
            labels.push(l);
        }
    }
    labels
}

/// Collect topology-aware entity states for every incident, in entity order.
pub fn collect_states(
    pipeline: &TrainedPipeline,
    examples: &[TrainingExample],
) -> Result<Vec<Vec<f64>>, HarnessError> {
    let mut all = Vec::new();
    for example in examples {
        let fwd = forward_eval(pipeline, example)?;
        all.extend(fwd.states);
    }
    Ok(all)
}

/// Train the full pipeline: template mining, optional alignment pretraining,
/// joint localizer training, codebook fitting, and lexicon construction.
pub fn train_pipeline(
    incidents: &[Incident],
    cfg: &PipelineConfig,
) -> Result<TrainedPipeline, HarnessError> {
    if incidents.is_empty() {
        return Err(HarnessError::Invalid("empty training set".to_string()));
    }
    let (miner, stats) = fit_template_miner(incidents);
    let examples = make_examples(incidents, &miner, &stats, &cfg.encoder)?;

    let enc = Encoders::new(cfg.encoder.clone());
    let loc = Localizer::new(cfg.localizer.clone());
    let align = Alignment::new(cfg.alignment.clone());
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    enc.init(&mut store, &mut rng);
    loc.init(&mut store, &mut rng);
    align.init(&mut store, &mut rng);

    if cfg.ablation.moma && cfg.pretrain_epochs > 0 {
        let batches: Vec<Vec<crate::encoders::EntityInputs>> =
            examples.iter().map(|e| e.inputs.clone()).collect();
        pretrain_alignment(&enc, &align, &mut store, &batches, cfg.pretrain_epochs, &cfg.adam);
    }

    let train_cfg = TrainConfig {
        epochs: cfg.train_epochs,
        seed: cfg.seed,
        lambda_cls: cfg.lambda_cls,
        adam: cfg.adam,
        use_topology: true,
        metrics_csv: None,
    };
    crate::localizer::train(&enc, &loc, &mut store, &examples, &train_cfg)?;

    let mut pipeline = TrainedPipeline {
        cfg: cfg.clone(),
        enc,
        loc,
        align,
        store,
        miner,
        stats,
        codebook: Codebook::new(vec![vec![0.0; cfg.localizer.out_dim]], cfg.vq_beta),
        lexicon: SymptomLexicon {
            tokens: Vec::new(),
            provenance: Provenance {
                dataset_hash: String::new(),
                codebook_hash: String::new(),
            },
        },
    };
    let states = collect_states(&pipeline, &examples)?;
    let (codebook, _) = fit_codebook(&states, cfg.vq_k.min(states.len()), cfg.vq_epochs, cfg.vq_beta, cfg.seed);
    let mut offset = 0usize;
    let mut assignments = Vec::new();
    for incident in incidents {
        let n = incident.graph.len();
        let slice = &states[offset..offset + n];
        assignments.push(codebook.assign_batch(&slice.to_vec())?);
        offset += n;
    }
    let provenance = Provenance {
        dataset_hash: dataset_hash(incidents),
        codebook_hash: sha256_hex(
            serde_json::to_string(&codebook)
                .map_err(HarnessError::Serde)?
                .as_bytes(),
        )[..16]
            .to_string(),
    };
    let lexicon = build_lexicon(incidents, &assignments, &codebook, &pipeline.miner, provenance)?;
    pipeline.codebook = codebook;
    pipeline.lexicon = lexicon;
    Ok(pipeline)
}

/// Everything needed to rebuild a pipeline besides the parameter checkpoint.
#[derive(Serialize, Deserialize)]
struct PipelineSidecar {
    cfg: PipelineConfig,
    miner: TemplateMiner,
    stats: CorpusStats,
    codebook: Codebook,
}

/// Persist a trained pipeline as `checkpoint.json` + `model.json` +
/// `lexicon.json` under `dir`.
pub fn save_pipeline(pipeline: &TrainedPipeline, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    pipeline
        .store
        .save(&dir.join("checkpoint.json"))
        .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let sidecar = PipelineSidecar {
        cfg: pipeline.cfg.clone(),
        miner: pipeline.miner.clone(),
        stats: pipeline.stats.clone(),
        codebook: pipeline.codebook.clone(),
    };
    let f = std::fs::File::create(dir.join("model.json"))?;
    serde_json::to_writer(std::io::BufWriter::new(f), &sidecar)?;
    pipeline.lexicon.save(&dir.join("lexicon.json"))?;
    Ok(())
}

pub fn load_pipeline(dir: &Path) -> Result<TrainedPipeline, HarnessError> {
    let store = ParamStore::load(&dir.join("checkpoint.json"))
        .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let f = std::fs::File::open(dir.join("model.json"))?;
    let mut sidecar: PipelineSidecar = serde_json::from_reader(std::io::BufReader::new(f))?;
    sidecar.miner.rebuild_index();
    let lexicon = SymptomLexicon::load(&dir.join("lexicon.json"))?;
    Ok(TrainedPipeline {
        enc: Encoders::new(sidecar.cfg.encoder.clone()),
        loc: Localizer::new(sidecar.cfg.localizer.clone()),
        align: Alignment::new(sidecar.cfg.alignment.clone()),
        cfg: sidecar.cfg,
        store,
        miner: sidecar.miner,
        stats: sidecar.stats,
        codebook: sidecar.codebook,
        lexicon,
    })
}

// ---------------------------------------------------------------------------
// Diagnosis
// ---------------------------------------------------------------------------

fn classifier_argmax(y_hat: &[f64]) -> FaultType {
    y_hat
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .and_then(|(i, _)| FaultType::from_index(i))
        .unwrap_or(FaultType::CpuHog)
}

/// Context plus the lexicon the planner should consult: the trained global
/// lexicon, or — with VQ ablated — a per-incident lexicon of raw per-entity
/// telemetry summaries (each entity is its own token).
fn context_and_lexicon(
    pipeline: &TrainedPipeline,
    incident: &Incident,
) -> Result<(DiagnosisContext, Option<SymptomLexicon>), HarnessError> {
    if pipeline.cfg.ablation.vq {
        let ctx = build_context(
            incident,
            &pipeline.enc,
            &pipeline.cfg.encoder,
            &pipeline.loc,
            &pipeline.store,
            &pipeline.miner,
            &pipeline.stats,
            &pipeline.codebook,
            &pipeline.cfg.context,
        )?;
        Ok((ctx, None))
    } else {
        let inputs = prepare_incident_inputs(incident, &pipeline.miner, &pipeline.stats, &pipeline.cfg.encoder);
        let root_index = 0;
        let example = TrainingExample {
            graph: incident.graph.clone(),
            inputs,
            root_index,
            fault_index: 0,
        };
        let fwd = forward_eval(pipeline, &example)?;
        let raw_codebook = Codebook::new(fwd.states.clone(), pipeline.cfg.vq_beta);
        let assignments: Vec<usize> = (0..incident.graph.len()).collect();
        let raw_lexicon = build_lexicon(
            std::slice::from_ref(incident),
            &[assignments],
            &raw_codebook,
            &pipeline.miner,
            Provenance {
                dataset_hash: "raw".to_string(),
                codebook_hash: "raw".to_string(),
            },
        )?;
        let ctx = build_context(
            incident,
            &pipeline.enc,
            &pipeline.cfg.encoder,
            &pipeline.loc,
            &pipeline.store,
            &pipeline.miner,
            &pipeline.stats,
            &raw_codebook,
            &pipeline.cfg.context,
        )?;
        Ok((ctx, Some(raw_lexicon)))
    }
}

/// Validated hypotheses retrieved from memory, appended as planner priors.
fn memory_priors(
    ctx: &DiagnosisContext,
    memory: &MemoryStore,
    fingerprint: &[f64],
    now: f64,
) -> Vec<Hypothesis> {
    memory
        .retrieve(fingerprint, 2, now)
        .into_iter()
        .filter(|r| {
            ctx.subgraph.contains(&r.hypothesis.root)
                && r.hypothesis
                    .route
                    .windows(2)
                    .all(|w| ctx.subgraph.has_call_edge(&w[0], &w[1]))
        })
        .map(|r| r.hypothesis.clone())
        .collect()
}

pub struct DiagnosisOutcome {
    pub report: DiagnosisReport,
    pub forward: EvalForward,
    pub context: DiagnosisContext,
    /// Verdict backing the reported root, if any was accepted.
    pub winning: Option<Verdict>,
}

/// Diagnose one incident with the trained pipeline, optionally consulting
/// the incident memory for planner priors.
pub fn diagnose_incident(
    pipeline: &TrainedPipeline,
    incident: &Incident,
    backend: &ReasonerBackend,
    memory: Option<(&MemoryStore, f64)>,
) -> Result<DiagnosisOutcome, HarnessError> {
    let example = {
        let inputs = prepare_incident_inputs(incident, &pipeline.miner, &pipeline.stats, &pipeline.cfg.encoder);
        TrainingExample {
            graph: incident.graph.clone(),
            inputs,
            root_index: 0,
            fault_index: 0,
        }
    };
    let forward = forward_eval(pipeline, &example)?;
    let (ctx, raw_lexicon) = context_and_lexicon(pipeline, incident)?;
    let lexicon = raw_lexicon.as_ref().unwrap_or(&pipeline.lexicon);

    let mut plan = plan_hypotheses(&ctx, lexicon, backend, pipeline.cfg.max_hypotheses)?;
    if let Some((store, now)) = memory {
        let indices: Vec<usize> = ctx
            .candidates
            .iter()
            .filter_map(|(id, _)| incident.graph.position(id).ok())
            .collect();
        let fp = fingerprint_from_states(&forward.states, &indices);
        for h in memory_priors(&ctx, store, &fp, now) {
            if !plan.hypotheses.contains(&h) {
                plan.hypotheses.push(h);
            }
        }
    }
    let packets = gather_evidence(&ctx, &plan.hypotheses, incident, &pipeline.miner);
    let signatures = FaultSignatures::from_miner(&pipeline.miner);
    let verdicts = judge(&ctx, &plan.hypotheses, &packets, &signatures, &pipeline.cfg.judge);
    let report = decide(&ctx, verdicts, packets);
    let winning = report
        .hypotheses
        .iter()
        .find(|v| {
            v.outcome == crate::het::Outcome::Accepted
                && v.hypothesis.root == report.root
                && v.hypothesis.fault_type.name() == report.fault_type
        })
        .cloned();
    Ok(DiagnosisOutcome {
        report,
        forward,
        context: ctx,
        winning,
    })
}

/// Final entity ranking after diagnosis: the verified root is promoted to
/// rank 1, the rest keep localizer order.
pub fn final_ranking(report: &DiagnosisReport, localizer_ranking: &[String]) -> Vec<String> {
    if !report.verified {
        return localizer_ranking.to_vec();
    }
    let mut out = vec![report.root.clone()];
    out.extend(
        localizer_ranking
            .iter()
            .filter(|e| **e != report.root)
            .cloned(),
    );
    out
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub truth_root: String,
    pub truth_fault: usize,
    pub predicted_root: String,
    pub predicted_fault: usize,
    pub rank_of_truth: Option<usize>,
    pub verified: bool,
    pub faithfulness: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub localization: LocalizationEval,
    pub classification: ClassificationEval,
    pub mean_faithfulness: f64,
    /// Analytic random baseline for acc@1: mean of 1/|V|.
    pub random_baseline_acc1: f64,
    pub per_incident: Vec<IncidentRecord>,
}

pub fn run_evaluation(
    pipeline: &TrainedPipeline,
    incidents: &[Incident],
    backend: &ReasonerBackend,
    memory: Option<(&MemoryStore, f64)>,
) -> Result<EvaluationSummary, HarnessError> {
    let mut rankings = Vec::new();
    let mut truths = Vec::new();
    let mut pred_faults = Vec::new();
    let mut truth_faults = Vec::new();
    let mut per_incident = Vec::new();
    let mut faith_sum = 0.0;
    let mut baseline_sum = 0.0;
    for incident in incidents {
        let (ranking, pred_fault, verified, faith) = if pipeline.cfg.ablation.het {
            let out = diagnose_incident(pipeline, incident, backend, memory)?;
            let ranking = final_ranking(&out.report, &out.forward.ranking);
            let fault = FaultType::ALL
                .iter()
                .copied()
                .find(|f| f.name() == out.report.fault_type)
                .unwrap_or(classifier_argmax(&out.forward.y_hat));
            let faith = topology_faithfulness(&out.report, &incident.graph, &out.forward.saliency);
            (ranking, fault, out.report.verified, faith)
        } else {
            let inputs = prepare_incident_inputs(incident, &pipeline.miner, &pipeline.stats, &pipeline.cfg.encoder);
            let example = TrainingExample {
                graph: incident.graph.clone(),
                inputs,
                root_index: 0,
                fault_index: 0,
            };
            let fwd = forward_eval(pipeline, &example)?;
            (fwd.ranking.clone(), classifier_argmax(&fwd.y_hat), false, 0.0)
        };
        let rank = crate::eval::rank_of(&ranking, &incident.label_root);
        per_incident.push(IncidentRecord {
            truth_root: incident.label_root.clone(),
            truth_fault: incident.label_fault.index(),
            predicted_root: ranking.first().cloned().unwrap_or_default(),
            predicted_fault: pred_fault.index(),
            rank_of_truth: rank,
            verified,
            faithfulness: faith,
        });
        faith_sum += faith;
        baseline_sum += 1.0 / incident.graph.len() as f64;
        rankings.push(ranking);
        truths.push(incident.label_root.clone());
        pred_faults.push(pred_fault.index());
        truth_faults.push(incident.label_fault.index());
    }
    let n = incidents.len().max(1) as f64;
    Ok(EvaluationSummary {
        localization: eval_localization(&rankings, &truths),
        classification: eval_classification(&pred_faults, &truth_faults, FaultType::ALL.len()),
        mean_faithfulness: faith_sum / n,
        random_baseline_acc1: baseline_sum / n,
        per_incident,
    })
}

// ---------------------------------------------------------------------------
// Evolution (memory + TTA rounds)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub acc_at_1: f64,
    pub tta_steps: usize,
    pub admitted: usize,
    pub memory_size: usize,
}

/// Stream the incidents `rounds` times: diagnose, admit confident verified
/// diagnoses as pseudo-labels, adapt, and record validated hypotheses in
/// memory. The harness clock advances one hour per incident.
pub fn evolve(
    pipeline: &mut TrainedPipeline,
    incidents: &[Incident],
    rounds: usize,
    memory: &mut MemoryStore,
    backend: &ReasonerBackend,
) -> Result<Vec<RoundMetrics>, HarnessError> {
    let anchor = pipeline.store.clone();
    let mut buffer = TtaBuffer::default();
    let mut clock = 0.0f64;
    let mut history = Vec::new();
    for round in 0..rounds {
        let mut hits = 0usize;
        let mut tta_steps = 0usize;
        let mut admitted = 0usize;
        for incident in incidents {
            let out = diagnose_incident(pipeline, incident, backend, Some((memory, clock)))?;
            let ranking = final_ranking(&out.report, &out.forward.ranking);
            if ranking.first() == Some(&incident.label_root) {
                hits += 1;
            }
            if let Some(verdict) = &out.winning {
                let root_pos = incident.graph.position(&out.report.root);
                let p_root = root_pos
                    .as_ref()
                    .ok()
                    .and_then(|&i| out.forward.p_rcl.get(i).copied())
                    .unwrap_or(0.0);
                if let Ok(root_index) = root_pos {
                    let fault = verdict.hypothesis.fault_type;
                    let example = TrainingExample {
                        graph: incident.graph.clone(),
                        inputs: prepare_incident_inputs(
                            incident,
                            &pipeline.miner,
                            &pipeline.stats,
                            &pipeline.cfg.encoder,
                        ),
                        root_index,
                        fault_index: fault.index(),
                    };
                    if buffer.admit(verdict, p_root, pipeline.cfg.tta.confidence_threshold, example)
                    {
                        admitted += 1;
                    }
                    // record the validated diagnosis
                    let indices: Vec<usize> = out
                        .context
                        .candidates
                        .iter()
                        .filter_map(|(id, _)| incident.graph.position(id).ok())
                        .collect();
                    let level = incident.graph.entity(&out.report.root)?.level;
                    let record = MemoryRecord {
                        id: 0,
                        fingerprint: fingerprint_from_states(&out.forward.states, &indices),
                        level,
                        token_set: out.report.token_trace.values().copied().collect(),
                        hypothesis: verdict.hypothesis.clone(),
                        evidence_refs: verdict
                            .supporting
                            .iter()
                            .filter_map(|&i| out.report.evidence.get(i))
                            .flat_map(|p| p.references.clone())
                            .collect(),
                        outcome_note: "verified".to_string(),
                        insert_time: clock,
                    };
                    memory.insert(record);
                }
            }
            if pipeline.cfg.ablation.sem
                && tta_step(
                    &pipeline.enc,
                    &pipeline.loc,
                    &mut pipeline.store,
                    &anchor,
                    &mut buffer,
                    &pipeline.cfg.tta,
                )?
            {
                tta_steps += 1;
            }
            clock += 3600.0;
        }
        history.push(RoundMetrics {
            round,
            acc_at_1: hits as f64 / incidents.len().max(1) as f64,
            tta_steps,
            admitted,
            memory_size: memory.len(),
        });
        memory.refresh(clock);
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Ablations and sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub acc_at_1: f64,
    pub acc_at_3: f64,
    pub acc_at_5: f64,
    pub mrr: f64,
    pub random_baseline_acc1: f64,
    /// Acc@1 restricted to incidents whose fault propagates downstream
    /// (the amplification-biased subset); None when the subset is empty.
    pub amp_acc_at_1: Option<f64>,
}

/// Acc@1 over the incidents whose fault family propagates symptoms
/// downstream, i.e. where amplified victims can outshine the root.
pub fn amplified_subset_acc1(summary: &EvaluationSummary) -> Option<f64> {
    let subset: Vec<&IncidentRecord> = summary
        .per_incident
        .iter()
        .filter(|r| {
            FaultType::from_index(r.truth_fault).is_some_and(|f| f.symptom_propagates())
        })
        .collect();
    if subset.is_empty() {
        return None;
    }
    let hits = subset.iter().filter(|r| r.rank_of_truth == Some(1)).count();
    Some(hits as f64 / subset.len() as f64)
}

pub const ABLATION_SETTINGS: [&str; 5] = ["full", "no_moma", "no_vq", "no_het", "no_sem"];

/// Flags for one named ablation setting from [`ABLATION_SETTINGS`].
pub fn ablation_flags(setting: &str) -> AblationFlags {
    let mut f = AblationFlags::default();
    match setting {
        "full" => {}
        "no_moma" => f.moma = false,
        "no_vq" => f.vq = false,
        "no_het" => f.het = false,
        "no_sem" => f.sem = false,
        other => panic!("unknown ablation setting {other:?}"),
    }
    f
}

/// Train and evaluate each component ablation. When SEM is enabled the
/// pipeline first adapts over the evaluation stream (one evolution round)
/// before scoring, mirroring deployment.
pub fn run_ablation(
    train_set: &[Incident],
    eval_set: &[Incident],
    base_cfg: &PipelineConfig,
    backend: &ReasonerBackend,
) -> Result<Vec<AblationRow>, HarnessError> {
    let mut rows = Vec::new();
    for setting in ABLATION_SETTINGS {
        let mut cfg = base_cfg.clone();
        cfg.ablation = ablation_flags(setting);
        let mut pipeline = train_pipeline(train_set, &cfg)?;
        let mut memory = MemoryStore::new(cfg.seed, crate::memory::MemoryConfig::default());
        if cfg.ablation.sem && cfg.ablation.het {
            evolve(&mut pipeline, eval_set, 1, &mut memory, backend)?;
        }
        let memory_arg = if cfg.ablation.sem && cfg.ablation.het {
            Some((&memory, eval_set.len() as f64 * 3600.0))
        } else {
            None
        };
        let summary = run_evaluation(&pipeline, eval_set, backend, memory_arg)?;
        rows.push(AblationRow {
            setting: setting.to_string(),
            acc_at_1: summary.localization.acc_at_1,
            acc_at_3: summary.localization.acc_at_3,
            acc_at_5: summary.localization.acc_at_5,
            mrr: summary.localization.mrr,
            random_baseline_acc1: summary.random_baseline_acc1,
            amp_acc_at_1: amplified_subset_acc1(&summary),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub k: usize,
    pub acc_at_1: f64,
    pub acc_at_5: f64,
    pub purity: f64,
    pub nmi: f64,
    pub intra_token_variance: f64,
    /// Mean assignments per used code.
    pub mean_usage: f64,
    pub used_codes: usize,
}

pub const DEFAULT_K_GRID: [usize; 5] = [32, 64, 128, 256, 512];

/// Refit the codebook and lexicon at each grid size on the trained encoder
/// and re-evaluate; reports accuracy, vocabulary quality, and code usage.
pub fn run_sensitivity(
    pipeline: &TrainedPipeline,
    train_incidents: &[Incident],
    eval_incidents: &[Incident],
    grid: &[usize],
    backend: &ReasonerBackend,
) -> Result<Vec<SensitivityRow>, HarnessError> {
    let examples = make_examples(train_incidents, &pipeline.miner, &pipeline.stats, &pipeline.cfg.encoder)?;
    let states = collect_states(pipeline, &examples)?;
    let labels = entity_labels(train_incidents);
    let mut rows = Vec::new();
    for &k in grid {
        let (codebook, _) = fit_codebook(
            &states,
            k.min(states.len()),
            pipeline.cfg.vq_epochs,
            pipeline.cfg.vq_beta,
            pipeline.cfg.seed,
        );
        let mut assignments_flat = codebook.assign_batch(&states)?;
        let quality = crate::lexicon::vocab_quality(&assignments_flat, &labels, &states);
        let mut usage: BTreeMap<usize, usize> = BTreeMap::new();
        for &a in &assignments_flat {
            *usage.entry(a).or_insert(0) += 1;
        }
        let used = usage.len();
        let mean_usage = assignments_flat.len() as f64 / used.max(1) as f64;
        assignments_flat.clear();

        let mut offset = 0usize;
        let mut assignments = Vec::new();
        for incident in train_incidents {
            let n = incident.graph.len();
            assignments.push(codebook.assign_batch(&states[offset..offset + n].to_vec())?);
            offset += n;
        }
        let lexicon = build_lexicon(
            train_incidents,
            &assignments,
            &codebook,
            &pipeline.miner,
            Provenance {
                dataset_hash: dataset_hash(train_incidents),
                codebook_hash: format!("k{k}"),
            },
        )?;
        let mut variant = TrainedPipeline {
            cfg: pipeline.cfg.clone(),
            enc: pipeline.enc.clone(),
            loc: Localizer::new(pipeline.cfg.localizer.clone()),
            align: Alignment::new(pipeline.cfg.alignment.clone()),
            store: pipeline.store.clone(),
            miner: pipeline.miner.clone(),
            stats: pipeline.stats.clone(),
            codebook,
            lexicon,
        };
        variant.cfg.vq_k = k;
        let summary = run_evaluation(&variant, eval_incidents, backend, None)?;
        rows.push(SensitivityRow {
            k,
            acc_at_1: summary.localization.acc_at_1,
            acc_at_5: summary.localization.acc_at_5,
            purity: quality.purity,
            nmi: quality.nmi,
            intra_token_variance: quality.intra_token_variance,
            mean_usage,
            used_codes: used,
        });
    }
    Ok(rows)
}

/// Vocabulary quality of the pipeline's learned codebook against a random
/// codebook and post-hoc k-means on the same frozen encoder states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabComparison {
    pub learned: VocabQuality,
    pub random: VocabQuality,
    pub kmeans: VocabQuality,
}

pub fn compare_codebooks(
    pipeline: &TrainedPipeline,
    incidents: &[Incident],
    k: usize,
    seed: u64,
) -> Result<VocabComparison, HarnessError> {
    let examples = make_examples(incidents, &pipeline.miner, &pipeline.stats, &pipeline.cfg.encoder)?;
    let states = collect_states(pipeline, &examples)?;
    let labels = entity_labels(incidents);
    let k = k.min(states.len());

    let (learned_cb, _) = fit_codebook(&states, k, pipeline.cfg.vq_epochs, pipeline.cfg.vq_beta, seed);
    let learned = crate::lexicon::vocab_quality(&learned_cb.assign_batch(&states)?, &labels, &states);

    // random codebook: entries drawn from a gaussian matched to state scale
    use rand::Rng as _;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let dim = states[0].len();
    let scale = states
        .iter()
        .flat_map(|s| s.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(1e-6);
    let random_entries: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect();
    let random_cb = Codebook::new(random_entries, pipeline.cfg.vq_beta);
    let random = crate::lexicon::vocab_quality(&random_cb.assign_batch(&states)?, &labels, &states);

    // post-hoc k-means baseline: plain Lloyd with uniform random init, no
    // k-means++ seeding and no dead-code reseeding
    let mut km_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut entries: Vec<Vec<f64>> = (0..k)
        .map(|_| states[km_rng.gen_range(0..states.len())].clone())
        .collect();
    for _ in 0..50 {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for h in &states {
            let best = entries
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let da: f64 = a.1.iter().zip(h).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f64 = b.1.iter().zip(h).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                })
                .map(|(i, _)| i)
                .unwrap_or(0);
            counts[best] += 1;
            for (acc, &x) in sums[best].iter_mut().zip(h) {
                *acc += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (e, s) in entries[c].iter_mut().zip(&sums[c]) {
                    *e = s / counts[c] as f64;
                }
            }
        }
    }
    let kmeans_cb = Codebook::new(entries, pipeline.cfg.vq_beta);
    let kmeans = crate::lexicon::vocab_quality(&kmeans_cb.assign_batch(&states)?, &labels, &states);

    Ok(VocabComparison {
        learned,
        random,
        kmeans,
    })
}

// ---------------------------------------------------------------------------
// Run directories and CSV output
// ---------------------------------------------------------------------------

pub struct RunDir {
    pub path: PathBuf,
    pub config_hash: String,
}

/// Create `base/run-<hash>-<seed>` and drop the resolved config inside.
pub fn create_run_dir(base: &Path, cfg: &PipelineConfig) -> Result<RunDir, HarnessError> {
    let hash = config_hash(cfg);
    let path = base.join(format!("run-{hash}-{}", cfg.seed));
    std::fs::create_dir_all(&path)?;
    let mut f = std::fs::File::create(path.join("config.json"))?;
    serde_json::to_writer_pretty(&mut f, cfg)?;
    writeln!(f)?;
    Ok(RunDir {
        path,
        config_hash: hash,
    })
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "setting,acc_at_1,acc_at_3,acc_at_5,mrr,random_baseline_acc1,amp_acc_at_1"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.setting,
            r.acc_at_1,
            r.acc_at_3,
            r.acc_at_5,
            r.mrr,
            r.random_baseline_acc1,
            r.amp_acc_at_1.map_or(String::new(), |v| v.to_string())
        )?;
    }
    Ok(())
}

pub fn write_sensitivity_csv(rows: &[SensitivityRow], path: &Path) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "k,acc_at_1,acc_at_5,purity,nmi,intra_token_variance,mean_usage,used_codes"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.k, r.acc_at_1, r.acc_at_5, r.purity, r.nmi, r.intra_token_variance, r.mean_usage, r.used_codes
        )?;
    }
    Ok(())
}

pub fn write_rounds_csv(rows: &[RoundMetrics], path: &Path) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "round,acc_at_1,tta_steps,admitted,memory_size")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.round, r.acc_at_1, r.tta_steps, r.admitted, r.memory_size
        )?;
    }
    Ok(())
}

pub fn write_evaluation_json(summary: &EvaluationSummary, path: &Path) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, summary)?;
    writeln!(f)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, ServiceSpec, TopologySpec};
    use crate::sim::{make_dataset, SimConfig};

    fn tiny_dataset(n: usize, seed: u64) -> Vec<Incident> {
        let spec = TopologySpec {
            services: vec![
                ServiceSpec {
                    name: "front".into(),
                    replicas: 1,
                },
                ServiceSpec {
                    name: "mid".into(),
                    replicas: 1,
                },
                ServiceSpec {
                    name: "back".into(),
                    replicas: 1,
                },
            ],
            nodes: vec!["n0".into()],
            calls: vec![
                ("front".into(), "mid".into()),
                ("mid".into(), "back".into()),
            ],
        };
        let g = build_graph(&spec, 0).unwrap();
        let cfg = SimConfig::default();
        make_dataset(&g, n, &FaultType::ALL, seed, &cfg).unwrap()
    }

    fn tiny_cfg() -> PipelineConfig {
        PipelineConfig {
            vq_k: 6,
            vq_epochs: 5,
            pretrain_epochs: 1,
            train_epochs: 2,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn pipeline_trains_and_evaluates() {
        let incidents = tiny_dataset(6, 11);
        let cfg = tiny_cfg();
        let pipeline = train_pipeline(&incidents, &cfg).unwrap();
        assert!(!pipeline.lexicon.tokens.is_empty());
        let summary =
            run_evaluation(&pipeline, &incidents, &ReasonerBackend::Deterministic, None).unwrap();
        assert!(summary.localization.acc_at_1 <= summary.localization.acc_at_3);
        assert!(summary.localization.acc_at_3 <= summary.localization.acc_at_5);
        assert!(summary.localization.mrr >= 0.0 && summary.localization.mrr <= 1.0);
        assert!(summary.random_baseline_acc1 > 0.0);
        assert_eq!(summary.per_incident.len(), incidents.len());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let incidents = tiny_dataset(4, 3);
        let cfg = tiny_cfg();
        let p1 = train_pipeline(&incidents, &cfg).unwrap();
        let p2 = train_pipeline(&incidents, &cfg).unwrap();
        let s1 = run_evaluation(&p1, &incidents, &ReasonerBackend::Deterministic, None).unwrap();
        let s2 = run_evaluation(&p2, &incidents, &ReasonerBackend::Deterministic, None).unwrap();
        assert_eq!(
            serde_json::to_string(&s1).unwrap(),
            serde_json::to_string(&s2).unwrap()
        );
    }

    #[test]
    fn het_off_uses_localizer_ranking() {
        let incidents = tiny_dataset(3, 5);
        let mut cfg = tiny_cfg();
        cfg.ablation.het = false;
        let pipeline = train_pipeline(&incidents, &cfg).unwrap();
        let summary =
            run_evaluation(&pipeline, &incidents, &ReasonerBackend::Deterministic, None).unwrap();
        assert!(summary.per_incident.iter().all(|r| !r.verified));
        assert_eq!(summary.mean_faithfulness, 0.0);
    }

    #[test]
    fn vq_off_produces_raw_per_entity_tokens() {
        let incidents = tiny_dataset(3, 7);
        let mut cfg = tiny_cfg();
        cfg.ablation.vq = false;
        let pipeline = train_pipeline(&incidents, &cfg).unwrap();
        let out = diagnose_incident(
            &pipeline,
            &incidents[0],
            &ReasonerBackend::Deterministic,
            None,
        )
        .unwrap();
        // every entity is its own token in the raw setting
        let mut token_ids: Vec<usize> = out.report.token_trace.values().copied().collect();
        token_ids.sort_unstable();
        token_ids.dedup();
        assert_eq!(token_ids.len(), out.report.token_trace.len());
    }

    #[test]
    fn evolve_rounds_emit_metrics_and_memory() {
        let incidents = tiny_dataset(4, 9);
        let mut cfg = tiny_cfg();
        cfg.tta.batch_size = 2;
        let mut pipeline = train_pipeline(&incidents, &cfg).unwrap();
        let mut memory = MemoryStore::new(1, crate::memory::MemoryConfig::default());
        let rounds = evolve(
            &mut pipeline,
            &incidents,
            2,
            &mut memory,
            &ReasonerBackend::Deterministic,
        )
        .unwrap();
        assert_eq!(rounds.len(), 2);
        for r in &rounds {
            assert!((0.0..=1.0).contains(&r.acc_at_1));
        }
    }

    #[test]
    fn ablation_table_has_all_settings() {
        let incidents = tiny_dataset(4, 13);
        let mut cfg = tiny_cfg();
        cfg.tta.batch_size = 2;
        let rows = run_ablation(&incidents, &incidents, &cfg, &ReasonerBackend::Deterministic)
            .unwrap();
        assert_eq!(rows.len(), 5);
        let settings: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
        assert_eq!(settings, ABLATION_SETTINGS.to_vec());
    }

    #[test]
    fn sensitivity_rows_match_grid() {
        let incidents = tiny_dataset(5, 17);
        let cfg = tiny_cfg();
        let pipeline = train_pipeline(&incidents, &cfg).unwrap();
        let rows = run_sensitivity(
            &pipeline,
            &incidents,
            &incidents,
            &[2, 4],
            &ReasonerBackend::Deterministic,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.used_codes >= 1);
            assert!(r.mean_usage >= 1.0);
        }
    }

    #[test]
    fn pipeline_round_trips_through_disk() {
        let incidents = tiny_dataset(3, 21);
        let cfg = tiny_cfg();
        let pipeline = train_pipeline(&incidents, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_pipeline(&pipeline, dir.path()).unwrap();
        let loaded = load_pipeline(dir.path()).unwrap();
        let s1 = run_evaluation(&pipeline, &incidents, &ReasonerBackend::Deterministic, None)
            .unwrap();
        let s2 =
            run_evaluation(&loaded, &incidents, &ReasonerBackend::Deterministic, None).unwrap();
        assert_eq!(
            serde_json::to_string(&s1).unwrap(),
            serde_json::to_string(&s2).unwrap()
        );
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.vq_k = 64;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn run_dir_contains_config(){
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::default();
        let run = create_run_dir(dir.path(), &cfg).unwrap();
        assert!(run.path.join("config.json").exists());
        assert_eq!(run.config_hash.len(), 16);
    }
}
