//! Hypothesis–evidence–test diagnosis workflow: a candidate-centric context,
//! structure-prior hypothesis planning (optionally advised by an external
//! chat-style reasoner), tool-grounded evidence agents, a checklist judge,
//! and a final decision with explicit alternatives.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read as _, Write as _};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{prepare_incident_inputs, CorpusStats, EncoderConfig, Encoders, TemplateMiner};
use crate::graph::{DependencyGraph, Saliency};
use crate::lexicon::SymptomLexicon;
use crate::localizer::{forward_incident, Localizer, TrainingExample};
use crate::params::{Bindings, ParamStore};
use crate::sim::{render_template, FaultType, Incident, SpanStatus, KPIS, VICTIM_TEMPLATES};
use crate::stats::{sustained_crossing, zscores_vs_baseline};
use crate::tensor::Tape;
use crate::vq::Codebook;

#[derive(Debug, Error)]
pub enum HetError {
    #[error("no root-cause candidates available")]
    NoCandidates,
    #[error("graph error: {0}")]
    Graph(#[from] crate::graph::GraphError),
    #[error("localizer error: {0}")]
    Localizer(#[from] crate::localizer::LocalizerError),
    #[error("quantization error: {0}")]
    Vq(#[from] crate::vq::VqError),
}

#[derive(Debug, Error)]
pub enum ReasonerError {
    #[error("invalid endpoint url: {0}")]
    Url(String),
    #[error("connect failed: {0}")]
    Connect(String),
    #[error("request timed out")]
    Timeout,
    #[error("http status {0}")]
    Status(u16),
    #[error("malformed response body")]
    Malformed,
    #[error("io error: {0}")]
    Io(String),
}

// ---------------------------------------------------------------------------
// Context
// ---------------------------------------------------------------------------

/// Candidate-centric diagnosis context. All downstream reasoning and tool
/// queries are restricted to `subgraph`; entities outside it are masked.
#[derive(Debug, Clone)]
pub struct DiagnosisContext {
    pub subgraph: DependencyGraph,
    /// Top-k entity ids with root-cause scores, descending; ties broken by id.
    pub candidates: Vec<(String, f64)>,
    /// Entity id -> symptom token id (via nearest codebook entry).
    pub tokens: BTreeMap<String, usize>,
    pub saliency: Saliency,
    /// Classifier's fault-type argmax, used as a planning/fallback prior.
    pub classifier_fault: FaultType,
}

impl DiagnosisContext {
    pub fn score(&self, entity: &str) -> f64 {
        self.saliency.node.get(entity).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextConfig {
    pub top_k: usize,
    pub hops: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self { top_k: 5, hops: 2 }
    }
}

/// Run the trained pipeline on one incident and carve out the top-k
/// candidates with their H-hop neighborhood and symptom tokens.
#[allow(clippy::too_many_arguments)]
pub fn build_context(
    incident: &Incident,
    enc: &Encoders,
    enc_cfg: &EncoderConfig,
    loc: &Localizer,
    store: &ParamStore,
    miner: &TemplateMiner,
    stats: &CorpusStats,
    codebook: &Codebook,
    cfg: &ContextConfig,
) -> Result<DiagnosisContext, HetError> {
    if incident.graph.is_empty() {
        return Err(HetError::NoCandidates);
    }
    let inputs = prepare_incident_inputs(incident, miner, stats, enc_cfg);
    let example = TrainingExample {
        graph: incident.graph.clone(),
        inputs,
        root_index: 0,
        fault_index: 0,
    };
    let mut tape = Tape::new();
    let mut bindings = Bindings::default();
    let out = forward_incident(&mut tape, store, &mut bindings, enc, loc, &example, true)?;
    let p_rcl = tape.values(out.p_rcl).to_vec();
    let y_hat = tape.values(out.y_hat).to_vec();
    let states: Vec<Vec<f64>> = out.states.iter().map(|&s| tape.values(s).to_vec()).collect();
    let saliency = crate::localizer::saliency_from(&incident.graph, &out.attention, &p_rcl);

    let mut ranked: Vec<(String, f64)> = incident
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
    ranked.truncate(cfg.top_k);
    let seeds: Vec<String> = ranked.iter().map(|(id, _)| id.clone()).collect();
    let subgraph = incident.graph.khop_subgraph(&seeds, cfg.hops)?;

    let mut tokens = BTreeMap::new();
    for e in subgraph.entities() {
        let i = incident.graph.position(&e.id)?;
        let (code, _, _) = codebook.quantize(&states[i])?;
        tokens.insert(e.id.clone(), code);
    }
    let classifier_fault = y_hat
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .and_then(|(i, _)| FaultType::from_index(i))
        .unwrap_or(FaultType::CpuHog);
    Ok(DiagnosisContext {
        subgraph,
        candidates: ranked,
        tokens,
        saliency,
        classifier_fault,
    })
}

// ---------------------------------------------------------------------------
// Hypotheses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub root: String,
    pub fault_type: FaultType,
    /// Ordered entity ids along call edges, starting at `root`.
    pub route: Vec<String>,
    pub rationale: String,
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub hypotheses: Vec<Hypothesis>,
    /// Set when an external backend was configured but its output was unusable.
    pub fallback_note: Option<String>,
}

#[derive(Debug, Clone)]
pub enum ReasonerBackend {
    Deterministic,
    External(ReasonerConfig),
}

fn route_saliency(saliency: &Saliency, route: &[String]) -> f64 {
    if route.len() < 2 {
        return 0.0;
    }
    let s: f64 = route
        .windows(2)
        .map(|w| {
            saliency
                .edge
                .get(&(w[0].clone(), w[1].clone()))
                .copied()
                .unwrap_or(0.0)
        })
        .sum();
    s / (route.len() - 1) as f64
}

/// Entities whose symptom token carries a latency/error family signature —
/// the downstream victims a propagation route should terminate at.
fn symptomatic_entities(ctx: &DiagnosisContext, lexicon: &SymptomLexicon) -> Vec<String> {
    let mut out = Vec::new();
    for e in ctx.subgraph.entities() {
        let Some(&code) = ctx.tokens.get(&e.id) else {
            continue;
        };
        let Some(token) = lexicon.token(code) else {
            continue;
        };
        let Some(sig) = &token.signature else {
            continue;
        };
        if sig
            .top_kpis
            .iter()
            .any(|k| k.kpi == "error_rate" || k.kpi == "latency")
        {
            out.push(e.id.clone());
        }
    }
    out
}

/// Fault types compatible with the candidate's token signature: the fault's
/// primary KPI must be among the token's top KPIs and the fault must be
/// injectable at the entity's level. The classifier prior is always kept in
/// the set so a coarse token cluster cannot veto it.
fn compatible_faults(
    ctx: &DiagnosisContext,
    lexicon: &SymptomLexicon,
    entity: &str,
) -> Vec<FaultType> {
    let level = ctx
        .subgraph
        .entity(entity)
        .map(|e| e.level)
        .unwrap_or(crate::graph::Level::Pod);
    let mut out: Vec<FaultType> = Vec::new();
    if let Some(sig) = ctx
        .tokens
        .get(entity)
        .and_then(|&c| lexicon.token(c))
        .and_then(|t| t.signature.as_ref())
    {
        for f in FaultType::ALL {
            if f.valid_levels().contains(&level)
                && sig.top_kpis.iter().any(|k| k.kpi == f.primary_kpi())
            {
                out.push(f);
            }
        }
    }
    if !out.contains(&ctx.classifier_fault)
        && ctx.classifier_fault.valid_levels().contains(&level)
    {
        out.push(ctx.classifier_fault);
    }
    if out.is_empty() {
        out.push(ctx.classifier_fault);
    }
    out
}

fn merge_hypotheses(mut hyps: Vec<Hypothesis>) -> Vec<Hypothesis> {
    let mut merged: Vec<Hypothesis> = Vec::new();
    for h in hyps.drain(..) {
        let mut absorbed = false;
        for m in &mut merged {
            if m.root == h.root && m.fault_type == h.fault_type {
                let (short, long) = if m.route.len() <= h.route.len() {
                    (&m.route, &h.route)
                } else {
                    (&h.route, &m.route)
                };
                if long.starts_with(short) {
                    if h.route.len() > m.route.len() {
                        m.route = h.route.clone();
                    }
                    absorbed = true;
                    break;
                }
            }
        }
        if !absorbed {
            merged.push(h);
        }
    }
    merged
}

fn plan_deterministic(
    ctx: &DiagnosisContext,
    lexicon: &SymptomLexicon,
    max_h: usize,
) -> Result<Vec<Hypothesis>, HetError> {
    if ctx.candidates.is_empty() {
        return Err(HetError::NoCandidates);
    }
    let victims = symptomatic_entities(ctx, lexicon);
    let mut hyps = Vec::new();
    for (cand, _) in &ctx.candidates {
        let faults = compatible_faults(ctx, lexicon, cand);
        let rationale = ctx
            .tokens
            .get(cand)
            .and_then(|&c| lexicon.token(c))
            .map(|t| format!("token #{}: {}", t.id, t.summary))
            .unwrap_or_else(|| "no token".to_string());
        let mut routes: Vec<Vec<String>> = Vec::new();
        for victim in &victims {
            if victim == cand {
                continue;
            }
            let paths = ctx
                .subgraph
                .enumerate_paths(cand, victim, 3, Some(&ctx.saliency))?;
            if let Some(best) = paths.into_iter().find(|p| p.len() >= 2) {
                routes.push(best);
            }
        }
        if routes.is_empty() {
            routes.push(vec![cand.clone()]);
        }
        for route in routes {
            for &fault in &faults {
                hyps.push(Hypothesis {
                    root: cand.clone(),
                    fault_type: fault,
                    route: route.clone(),
                    rationale: rationale.clone(),
                });
            }
        }
    }
    let mut merged = merge_hypotheses(hyps);
    merged.sort_by(|a, b| {
        route_saliency(&ctx.saliency, &b.route)
            .partial_cmp(&route_saliency(&ctx.saliency, &a.route))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.root.cmp(&b.root))
            .then_with(|| a.fault_type.index().cmp(&b.fault_type.index()))
    });
    // keep the set diverse: every candidate retains its best hypothesis
    // before remaining slots are filled by route saliency
    let mut picked: Vec<Hypothesis> = Vec::new();
    let mut taken = vec![false; merged.len()];
    for (cand, _) in &ctx.candidates {
        if picked.len() >= max_h {
            break;
        }
        if let Some(i) = (0..merged.len()).find(|&i| !taken[i] && &merged[i].root == cand) {
            taken[i] = true;
            picked.push(merged[i].clone());
        }
    }
    for (i, h) in merged.into_iter().enumerate() {
        if picked.len() >= max_h {
            break;
        }
        if !taken[i] {
            picked.push(h);
        }
    }
    picked.sort_by(|a, b| {
        route_saliency(&ctx.saliency, &b.route)
            .partial_cmp(&route_saliency(&ctx.saliency, &a.route))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.root.cmp(&b.root))
            .then_with(|| a.fault_type.index().cmp(&b.fault_type.index()))
    });
    Ok(picked)
}

/// Prompt template v1 for the external planner: tokenized subgraph as
/// context, topology-consistent hypotheses as the task, JSON as the output.
pub fn render_prompt(ctx: &DiagnosisContext, lexicon: &SymptomLexicon) -> String {
    let mut s = String::new();
    s.push_str("You are a root-cause analysis planner for a microservice system.\n");
    s.push_str("Context: dependency subgraph entities with symptom tokens.\n");
    for e in ctx.subgraph.entities() {
        let token = ctx
            .tokens
            .get(&e.id)
            .and_then(|&c| lexicon.token(c))
            .map(|t| format!("token #{} ({})", t.id, t.summary))
            .unwrap_or_else(|| "no token".to_string());
        s.push_str(&format!("- {}: {}\n", e.id, token));
    }
    s.push_str("Call edges:\n");
    for edge in ctx.subgraph.edges() {
        if edge.relation == crate::graph::Relation::Call {
            s.push_str(&format!("- {} -> {}\n", edge.src, edge.dst));
        }
    }
    s.push_str("Candidates (root-cause score, descending):\n");
    for (id, score) in &ctx.candidates {
        s.push_str(&format!("- {id} ({score:.4})\n"));
    }
    s.push_str(
        "Task: propose up to 6 topology-consistent hypotheses. Each route must \
         start at the root and follow call edges. Fault types: cpu_hog, \
         memory_leak, network_delay, packet_loss, disk_payload.\n\
         Output: JSON array of objects {\"root\", \"fault_type\", \"route\"} only.\n",
    );
    s
}

fn fault_from_name(name: &str) -> Option<FaultType> {
    FaultType::ALL.iter().copied().find(|f| f.name() == name)
}

#[derive(Debug, Deserialize)]
struct RawHypothesis {
    root: String,
    fault_type: String,
    route: Vec<String>,
    #[serde(default)]
    rationale: String,
}

/// Validate reasoner output into well-formed hypotheses; anything that does
/// not re-validate against the context is discarded.
fn parse_external_hypotheses(text: &str, ctx: &DiagnosisContext) -> Vec<Hypothesis> {
    let raw: Vec<RawHypothesis> = match serde_json::from_str::<serde_json::Value>(text) {
        Ok(serde_json::Value::Array(_)) => serde_json::from_str(text).unwrap_or_default(),
        Ok(serde_json::Value::Object(map)) => map
            .get("hypotheses")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default(),
        _ => Vec::new(),
    };
    raw.into_iter()
        .filter_map(|r| {
            let fault_type = fault_from_name(&r.fault_type)?;
            if !ctx.subgraph.contains(&r.root) {
                return None;
            }
            let route = if r.route.is_empty() {
                vec![r.root.clone()]
            } else {
                r.route
            };
            if route[0] != r.root {
                return None;
            }
            for w in route.windows(2) {
                if !ctx.subgraph.has_call_edge(&w[0], &w[1]) {
                    return None;
                }
            }
            Some(Hypothesis {
                root: r.root,
                fault_type,
                route,
                rationale: if r.rationale.is_empty() {
                    "external planner".to_string()
                } else {
                    r.rationale
                },
            })
        })
        .collect()
}

pub fn plan_hypotheses(
    ctx: &DiagnosisContext,
    lexicon: &SymptomLexicon,
    backend: &ReasonerBackend,
    max_h: usize,
) -> Result<Plan, HetError> {
    if ctx.candidates.is_empty() {
        return Err(HetError::NoCandidates);
    }
    match backend {
        ReasonerBackend::Deterministic => Ok(Plan {
            hypotheses: plan_deterministic(ctx, lexicon, max_h)?,
            fallback_note: None,
        }),
        ReasonerBackend::External(cfg) => {
            let prompt = render_prompt(ctx, lexicon);
            match call_external_reasoner(&prompt, cfg) {
                Ok(text) => {
                    let mut hyps = parse_external_hypotheses(&text, ctx);
                    if hyps.is_empty() {
                        Ok(Plan {
                            hypotheses: plan_deterministic(ctx, lexicon, max_h)?,
                            fallback_note: Some(
                                "external output had no valid hypotheses; discarded".to_string(),
                            ),
                        })
                    } else {
                        hyps.truncate(max_h);
                        Ok(Plan {
                            hypotheses: hyps,
                            fallback_note: None,
                        })
                    }
                }
                Err(e) => Ok(Plan {
                    hypotheses: plan_deterministic(ctx, lexicon, max_h)?,
                    fallback_note: Some(format!("external reasoner failed: {e}")),
                }),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Evidence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Metric,
    Log,
    Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeBand {
    Mild,
    Severe,
}

/// Structured evidence only — no narrative text reaches the judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidencePacket {
    pub entity: String,
    pub modality: Modality,
    pub onset: Option<f64>,
    pub band: Option<MagnitudeBand>,
    /// KPI names, `template:<id>`, or `span:<caller>-><callee>` references.
    pub references: Vec<String>,
    pub agent: String,
}

/// Template ids per fault family plus the shared victim templates, resolved
/// against a fitted miner so judge checks cite real template ids.
#[derive(Debug, Clone)]
pub struct FaultSignatures {
    pub per_fault: BTreeMap<usize, Vec<usize>>,
    pub victim: Vec<usize>,
}

impl FaultSignatures {
    pub fn from_miner(miner: &TemplateMiner) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut per_fault = BTreeMap::new();
        for f in FaultType::ALL {
            let ids: Vec<usize> = f
                .root_templates()
                .iter()
                .filter_map(|key| miner.lookup(&render_template(key, &mut rng)))
                .collect();
            per_fault.insert(f.index(), ids);
        }
        let victim: Vec<usize> = VICTIM_TEMPLATES
            .iter()
            .filter_map(|key| miner.lookup(&render_template(key, &mut rng)))
            .collect();
        Self { per_fault, victim }
    }

    pub fn fault_templates(&self, fault: FaultType) -> &[usize] {
        self.per_fault
            .get(&fault.index())
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }
}

const Z_ONSET: f64 = 3.0;
const Z_SEVERE: f64 = 5.0;
const SUSTAIN: usize = 2;

fn band_for(peak: f64) -> MagnitudeBand {
    if peak > Z_SEVERE {
        MagnitudeBand::Severe
    } else {
        MagnitudeBand::Mild
    }
}

/// Run the metric, log, and trace agents over the route entities; packets
/// are emitted in fixed agent order so the result is order-deterministic.
pub fn gather_evidence(
    ctx: &DiagnosisContext,
    hypotheses: &[Hypothesis],
    incident: &Incident,
    miner: &TemplateMiner,
) -> Vec<EvidencePacket> {
    let mut entities: BTreeSet<String> = BTreeSet::new();
    let mut edges: BTreeSet<(String, String)> = BTreeSet::new();
    for h in hypotheses {
        for e in &h.route {
            if ctx.subgraph.contains(e) {
                entities.insert(e.clone());
            }
        }
        for w in h.route.windows(2) {
            if ctx.subgraph.contains(&w[0]) && ctx.subgraph.contains(&w[1]) {
                edges.insert((w[0].clone(), w[1].clone()));
            }
        }
    }
    let mut packets = Vec::new();
    // metric agent
    for entity in &entities {
        for kpi in KPIS {
            let Some(series) = incident.telemetry.series(entity, kpi) else {
                continue;
            };
            let baseline_n = (series.values.len() / 5).max(2);
            let z = zscores_vs_baseline(&series.values, baseline_n);
            let Some(i) = sustained_crossing(&z, Z_ONSET, SUSTAIN) else {
                continue;
            };
            let peak = z[i..].iter().fold(0.0f64, |a, v| a.max(v.abs()));
            packets.push(EvidencePacket {
                entity: entity.clone(),
                modality: Modality::Metric,
                onset: Some(series.timestamps[i]),
                band: Some(band_for(peak)),
                references: vec![kpi.to_string()],
                agent: "metric".to_string(),
            });
        }
    }
    // log agent: fault-family and victim template occurrences with counts
    let signatures = FaultSignatures::from_miner(miner);
    let mut interesting: BTreeSet<usize> = signatures.victim.iter().copied().collect();
    for ids in signatures.per_fault.values() {
        interesting.extend(ids.iter().copied());
    }
    for entity in &entities {
        let mut by_template: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for ev in incident.telemetry.logs_for(entity) {
            if let Some(id) = miner.lookup(&ev.message) {
                if interesting.contains(&id) {
                    let e = by_template.entry(id).or_insert((ev.timestamp, 0));
                    e.0 = e.0.min(ev.timestamp);
                    e.1 += 1;
                }
            }
        }
        for (id, (onset, count)) in by_template {
            packets.push(EvidencePacket {
                entity: entity.clone(),
                modality: Modality::Log,
                onset: Some(onset),
                band: Some(if count >= 10 {
                    MagnitudeBand::Severe
                } else {
                    MagnitudeBand::Mild
                }),
                references: vec![format!("template:{id}"), format!("count:{count}")],
                agent: "log".to_string(),
            });
        }
    }
    // trace agent: abnormal span chains along hypothesized route edges
    for (caller, callee) in &edges {
        let mut onset: Option<f64> = None;
        let mut errors = 0usize;
        let mut timeouts = 0usize;
        for s in &incident.telemetry.spans {
            if &s.caller != caller || &s.callee != callee || s.status == SpanStatus::Ok {
                continue;
            }
            onset = Some(onset.map_or(s.start, |o: f64| o.min(s.start)));
            match s.status {
                SpanStatus::Timeout => timeouts += 1,
                _ => errors += 1,
            }
        }
        if let Some(onset) = onset {
            packets.push(EvidencePacket {
                entity: caller.clone(),
                modality: Modality::Trace,
                onset: Some(onset),
                band: Some(if timeouts > 0 {
                    MagnitudeBand::Severe
                } else {
                    MagnitudeBand::Mild
                }),
                references: vec![format!(
                    "span:{caller}->{callee}:errors={errors},timeouts={timeouts}"
                )],
                agent: "trace".to_string(),
            });
        }
    }
    packets
}

// ---------------------------------------------------------------------------
// Judge
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub pass: bool,
    /// Indices into the evidence packet list backing this check.
    pub cited: Vec<usize>,
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    RejectedConflict,
    RejectedMissing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub hypothesis: Hypothesis,
    pub temporal_precedence: CheckResult,
    pub path_consistency: CheckResult,
    pub template_consistency: CheckResult,
    pub supporting: Vec<usize>,
    pub conflicting: Vec<usize>,
    pub missing_expected: Vec<String>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub slack_s: f64,
    /// Strict requires all three modality signatures; relaxed requires 2 of 3.
    pub strict: bool,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            slack_s: 10.0,
            strict: false,
        }
    }
}

fn metric_onset(packets: &[EvidencePacket], entity: &str) -> Option<(f64, usize)> {
    packets
        .iter()
        .enumerate()
        .filter(|(_, p)| p.modality == Modality::Metric && p.entity == entity)
        .filter_map(|(i, p)| p.onset.map(|o| (o, i)))
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal))
}

fn rejected(h: &Hypothesis, note: &str) -> Verdict {
    let failed = CheckResult {
        pass: false,
        cited: Vec::new(),
        note: note.to_string(),
    };
    Verdict {
        hypothesis: h.clone(),
        temporal_precedence: failed.clone(),
        path_consistency: failed.clone(),
        template_consistency: failed,
        supporting: Vec::new(),
        conflicting: Vec::new(),
        missing_expected: Vec::new(),
        outcome: Outcome::RejectedConflict,
    }
}

/// Checklist verification of each hypothesis against cached packets only.
/// Re-running on the same packets yields identical verdicts.
pub fn judge(
    ctx: &DiagnosisContext,
    hypotheses: &[Hypothesis],
    packets: &[EvidencePacket],
    signatures: &FaultSignatures,
    cfg: &JudgeConfig,
) -> Vec<Verdict> {
    hypotheses
        .iter()
        .map(|h| judge_one(ctx, h, packets, signatures, cfg))
        .collect()
}

fn judge_one(
    ctx: &DiagnosisContext,
    h: &Hypothesis,
    packets: &[EvidencePacket],
    signatures: &FaultSignatures,
    cfg: &JudgeConfig,
) -> Verdict {
    if let Some(outside) = h.route.iter().find(|e| !ctx.subgraph.contains(e)) {
        return rejected(h, &format!("entity {outside} is outside the context subgraph"));
    }
    if h.route.first() != Some(&h.root) {
        return rejected(h, "route does not start at the hypothesized root");
    }

    // temporal precedence: root symptoms no later than downstream + slack
    let root_onset = metric_onset(packets, &h.root);
    let mut conflicting = Vec::new();
    let mut temporal_cited = Vec::new();
    let mut missing_expected = Vec::new();
    let temporal = match root_onset {
        None => {
            missing_expected.push(format!("metric onset at root {}", h.root));
            CheckResult {
                pass: false,
                cited: Vec::new(),
                note: "no metric onset observed at the root".to_string(),
            }
        }
        Some((t_root, root_idx)) => {
            temporal_cited.push(root_idx);
            let mut pass = true;
            let mut note = format!("root onset {t_root:.0}s precedes downstream onsets");
            for e in &h.route[1..] {
                if let Some((t, idx)) = metric_onset(packets, e) {
                    temporal_cited.push(idx);
                    if t_root > t + cfg.slack_s {
                        pass = false;
                        conflicting.push(idx);
                        note = format!(
                            "downstream {e} onset {t:.0}s precedes root onset {t_root:.0}s beyond slack"
                        );
                    }
                }
            }
            // a true root's symptoms cannot lag an upstream caller's: an
            // earlier onset at a caller indicates the fault propagated in
            for caller in ctx
                .subgraph
                .neighbors(&h.root, crate::graph::Direction::In)
                .unwrap_or_default()
            {
                if !ctx.subgraph.has_call_edge(&caller, &h.root) {
                    continue;
                }
                if let Some((t, idx)) = metric_onset(packets, &caller) {
                    temporal_cited.push(idx);
                    if t + cfg.slack_s < t_root {
                        pass = false;
                        conflicting.push(idx);
                        note = format!(
                            "caller {caller} onset {t:.0}s precedes claimed root onset {t_root:.0}s beyond slack"
                        );
                    }
                }
            }
            CheckResult {
                pass,
                cited: temporal_cited.clone(),
                note,
            }
        }
    };

    // path consistency: route follows call edges; cited evidence lies on it
    let mut path_pass = true;
    let mut path_note = "route follows dependency call edges".to_string();
    for w in h.route.windows(2) {
        if !ctx.subgraph.has_call_edge(&w[0], &w[1]) {
            path_pass = false;
            path_note = format!("no call edge {} -> {}", w[0], w[1]);
            break;
        }
    }
    let on_route: BTreeSet<&String> = h.route.iter().collect();
    let path_cited: Vec<usize> = packets
        .iter()
        .enumerate()
        .filter(|(_, p)| on_route.contains(&p.entity))
        .map(|(i, _)| i)
        .collect();
    let path = CheckResult {
        pass: path_pass,
        cited: path_cited,
        note: path_note,
    };

    // template consistency: fault-specific signatures per modality
    let expected_kpi = h.fault_type.primary_kpi();
    let metric_sig = packets.iter().enumerate().find(|(_, p)| {
        p.modality == Modality::Metric
            && p.entity == h.root
            && p.references.iter().any(|r| r == expected_kpi)
    });
    let fault_ids: BTreeSet<usize> = signatures.fault_templates(h.fault_type).iter().copied().collect();
    let log_sig = packets.iter().enumerate().find(|(_, p)| {
        p.modality == Modality::Log
            && p.entity == h.root
            && p.references.iter().any(|r| {
                r.strip_prefix("template:")
                    .and_then(|s| s.parse::<usize>().ok())
                    .is_some_and(|id| fault_ids.contains(&id))
            })
    });
    let trace_sig = packets.iter().enumerate().find(|(_, p)| {
        p.modality == Modality::Trace
            && (p.entity == h.root || on_route.contains(&p.entity))
    });
    let mut hits = 0usize;
    let mut template_cited = Vec::new();
    for (name, sig) in [
        (format!("metric signature {expected_kpi} at root"), metric_sig),
        (format!("log template of {} at root", h.fault_type.name()), log_sig),
        ("abnormal spans along route".to_string(), trace_sig),
    ] {
        match sig {
            Some((i, _)) => {
                hits += 1;
                template_cited.push(i);
            }
            None => missing_expected.push(name),
        }
    }
    let needed = if cfg.strict { 3 } else { 2 };
    let template = CheckResult {
        pass: hits >= needed,
        cited: template_cited,
        note: format!("{hits}/3 expected fault signatures present (need {needed})"),
    };

    let mut supporting: Vec<usize> = Vec::new();
    for c in [&temporal, &path, &template] {
        if c.pass {
            supporting.extend(&c.cited);
        }
    }
    supporting.sort_unstable();
    supporting.dedup();

    let all_pass = temporal.pass && path.pass && template.pass;
    let outcome = if all_pass {
        Outcome::Accepted
    } else if !conflicting.is_empty() || !path.pass {
        Outcome::RejectedConflict
    } else {
        Outcome::RejectedMissing
    };
    Verdict {
        hypothesis: h.clone(),
        temporal_precedence: temporal,
        path_consistency: path,
        template_consistency: template,
        supporting,
        conflicting,
        missing_expected,
        outcome,
    }
}

// ---------------------------------------------------------------------------
// Decision
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Alternative {
    pub root: String,
    pub fault_type: String,
    pub outcome: Outcome,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub root: String,
    pub fault_type: String,
    pub verified: bool,
    pub hypotheses: Vec<Verdict>,
    pub alternatives: Vec<Alternative>,
    pub evidence: Vec<EvidencePacket>,
    /// Entity id -> symptom token id for audit.
    pub token_trace: BTreeMap<String, usize>,
}

fn rejection_reason(v: &Verdict) -> String {
    for (name, c) in [
        ("temporal precedence", &v.temporal_precedence),
        ("path consistency", &v.path_consistency),
        ("template consistency", &v.template_consistency),
    ] {
        if !c.pass {
            return format!("{name}: {}", c.note);
        }
    }
    "not selected".to_string()
}

/// Pick the strongest accepted verdict, or fall back to the localizer's
/// top candidate flagged as unverified.
pub fn decide(
    ctx: &DiagnosisContext,
    verdicts: Vec<Verdict>,
    packets: Vec<EvidencePacket>,
) -> DiagnosisReport {
    let rank_key = |v: &Verdict| {
        (
            v.supporting.len() as f64,
            route_saliency(&ctx.saliency, &v.hypothesis.route),
            ctx.score(&v.hypothesis.root),
        )
    };
    let mut order: Vec<usize> = (0..verdicts.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, ra, pa) = rank_key(&verdicts[a]);
        let (sb, rb, pb) = rank_key(&verdicts[b]);
        sb.partial_cmp(&sa)
            .unwrap()
            .then(rb.partial_cmp(&ra).unwrap())
            .then(pb.partial_cmp(&pa).unwrap())
            .then_with(|| verdicts[a].hypothesis.root.cmp(&verdicts[b].hypothesis.root))
    });
    let winner = order
        .iter()
        .copied()
        .find(|&i| verdicts[i].outcome == Outcome::Accepted);
    let (root, fault_type, verified) = match winner {
        Some(i) => (
            verdicts[i].hypothesis.root.clone(),
            verdicts[i].hypothesis.fault_type.name().to_string(),
            true,
        ),
        None => (
            ctx.candidates
                .first()
                .map(|(id, _)| id.clone())
                .unwrap_or_default(),
            ctx.classifier_fault.name().to_string(),
            false,
        ),
    };
    let alternatives: Vec<Alternative> = order
        .iter()
        .copied()
        .filter(|&i| Some(i) != winner)
        .take(4)
        .map(|i| Alternative {
            root: verdicts[i].hypothesis.root.clone(),
            fault_type: verdicts[i].hypothesis.fault_type.name().to_string(),
            outcome: verdicts[i].outcome,
            reason: match verdicts[i].outcome {
                Outcome::Accepted => "accepted but outranked".to_string(),
                _ => rejection_reason(&verdicts[i]),
            },
        })
        .collect();
    DiagnosisReport {
        root,
        fault_type,
        verified,
        hypotheses: verdicts,
        alternatives,
        evidence: packets,
        token_trace: ctx.tokens.clone(),
    }
}

/// Full plan → evidence → judge → decide workflow for one context.
pub fn diagnose(
    ctx: &DiagnosisContext,
    incident: &Incident,
    lexicon: &SymptomLexicon,
    miner: &TemplateMiner,
    backend: &ReasonerBackend,
    judge_cfg: &JudgeConfig,
    max_h: usize,
) -> Result<DiagnosisReport, HetError> {
    let plan = plan_hypotheses(ctx, lexicon, backend, max_h)?;
    let packets = gather_evidence(ctx, &plan.hypotheses, incident, miner);
    let signatures = FaultSignatures::from_miner(miner);
    let verdicts = judge(ctx, &plan.hypotheses, &packets, &signatures, judge_cfg);
    Ok(decide(ctx, verdicts, packets))
}

// ---------------------------------------------------------------------------
// External reasoner client
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReasonerConfig {
    /// `http://host:port/path` endpoint of a chat-completion style service.
    pub endpoint: String,
    pub model: String,
    pub auth_token: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub temperature: f64,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/chat/completions".to_string(),
            model: "default".to_string(),
            auth_token: None,
            timeout_ms: 5_000,
            max_retries: 1,
            temperature: 0.0,
        }
    }
}

fn parse_endpoint(url: &str) -> Result<(String, String), ReasonerError> {
    let rest = url
        .strip_prefix("http://")
        .ok_or_else(|| ReasonerError::Url(url.to_string()))?;
    let (host, path) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, "/"),
    };
    if host.is_empty() {
        return Err(ReasonerError::Url(url.to_string()));
    }
    let host = if host.contains(':') {
        host.to_string()
    } else {
        format!("{host}:80")
    };
    Ok((host, path.to_string()))
}

/// POST a chat-style completion request and return the first message body.
pub fn call_external_reasoner(prompt: &str, cfg: &ReasonerConfig) -> Result<String, ReasonerError> {
    let mut last = ReasonerError::Connect("no attempt made".to_string());
    for _ in 0..=cfg.max_retries {
        match call_once(prompt, cfg) {
            Ok(text) => return Ok(text),
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn call_once(prompt: &str, cfg: &ReasonerConfig) -> Result<String, ReasonerError> {
    let (host, path) = parse_endpoint(&cfg.endpoint)?;
    let timeout = Duration::from_millis(cfg.timeout_ms.max(1));
    let addr = host
        .to_socket_addrs()
        .map_err(|e| ReasonerError::Connect(e.to_string()))?
        .next()
        .ok_or_else(|| ReasonerError::Connect(format!("no address for {host}")))?;
    let mut stream =
        TcpStream::connect_timeout(&addr, timeout).map_err(|e| ReasonerError::Connect(e.to_string()))?;
    stream
        .set_read_timeout(Some(timeout))
        .map_err(|e| ReasonerError::Io(e.to_string()))?;
    stream
        .set_write_timeout(Some(timeout))
        .map_err(|e| ReasonerError::Io(e.to_string()))?;

    let body = serde_json::json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": cfg.temperature,
    })
    .to_string();
    let mut req = format!(
        "POST {path} HTTP/1.1\r\nHost: {host}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
        body.len()
    );
    if let Some(token) = &cfg.auth_token {
        req.push_str(&format!("Authorization: Bearer {token}\r\n"));
    }
    req.push_str("\r\n");
    req.push_str(&body);
    stream
        .write_all(req.as_bytes())
        .map_err(|e| ReasonerError::Io(e.to_string()))?;

    let mut raw = Vec::new();
    match stream.read_to_end(&mut raw) {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock || e.kind() == std::io::ErrorKind::TimedOut => {
            return Err(ReasonerError::Timeout)
        }
        Err(e) => return Err(ReasonerError::Io(e.to_string())),
    }
    let text = String::from_utf8_lossy(&raw);
    let mut lines = text.splitn(2, "\r\n\r\n");
    let head = lines.next().ok_or(ReasonerError::Malformed)?;
    let body = lines.next().ok_or(ReasonerError::Malformed)?;
    let status: u16 = head
        .lines()
        .next()
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|s| s.parse().ok())
        .ok_or(ReasonerError::Malformed)?;
    if !(200..300).contains(&status) {
        return Err(ReasonerError::Status(status));
    }
    let json: serde_json::Value =
        serde_json::from_str(body.trim()).map_err(|_| ReasonerError::Malformed)?;
    json.pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .map(|s| s.to_string())
        .ok_or(ReasonerError::Malformed)
}
