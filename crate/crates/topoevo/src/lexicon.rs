//! Auditable symptom vocabulary: each codebook entry is translated into a
//! token with a deterministic summary and a structured evidence signature
//! aggregated over the entities assigned to that code.

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoders::TemplateMiner;
use crate::graph::{Direction, Level};
use crate::sim::{Incident, SpanStatus, KPIS};
use crate::stats::{percentile, zscores_vs_baseline};
use crate::vq::Codebook;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("assignment shape mismatch: incident {incident} has {got} assignments for {want} entities")]
    AssignmentShape {
        incident: usize,
        got: usize,
        want: usize,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("lexicon parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionPattern {
    IncomingDominant,
    OutgoingDominant,
    Mixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KpiBand {
    pub kpi: String,
    pub median_abs_z: f64,
    pub crossing_frequency: f64,
    /// 25th and 75th percentile of peak |z| over cluster members.
    pub band: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateLift {
    pub template_id: usize,
    pub lift: f64,
    pub burstiness: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvidenceSignature {
    pub top_kpis: Vec<KpiBand>,
    pub log_templates: Vec<TemplateLift>,
    pub interaction: InteractionPattern,
    pub neighbor_levels: BTreeMap<String, usize>,
    /// (q1, median, q3) of member in/out degrees.
    pub in_degree_quartiles: (f64, f64, f64),
    pub out_degree_quartiles: (f64, f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymptomToken {
    pub id: usize,
    pub used: bool,
    pub summary: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signature: Option<EvidenceSignature>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_hash: String,
    pub codebook_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymptomLexicon {
    pub tokens: Vec<SymptomToken>,
    pub provenance: Provenance,
}

impl SymptomLexicon {
    pub fn token(&self, id: usize) -> Option<&SymptomToken> {
        self.tokens.get(id)
    }

    pub fn save(&self, path: &Path) -> Result<(), LexiconError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

const LIFT_THRESHOLD: f64 = 2.0;
const TOP_KPI_CAP: usize = 3;
const Z_THRESHOLD: f64 = 3.0;

fn quartiles(xs: &[f64]) -> (f64, f64, f64) {
    (
        percentile(xs, 25.0),
        percentile(xs, 50.0),
        percentile(xs, 75.0),
    )
}

struct MemberEvidence {
    peak_abs_z: Vec<f64>,
    crossed: Vec<bool>,
    template_counts: BTreeMap<usize, usize>,
    template_times: BTreeMap<usize, Vec<f64>>,
    in_abnormal: usize,
    out_abnormal: usize,
    neighbor_levels: BTreeMap<String, usize>,
    in_degree: f64,
    out_degree: f64,
}

fn member_evidence(incident: &Incident, entity: &str, miner: &TemplateMiner) -> MemberEvidence {
    let mut peak_abs_z = vec![0.0; KPIS.len()];
    let mut crossed = vec![false; KPIS.len()];
    for (i, kpi) in KPIS.iter().enumerate() {
        if let Some(s) = incident.telemetry.series(entity, kpi) {
            let baseline_n = (s.values.len() / 5).max(2);
            let z = zscores_vs_baseline(&s.values, baseline_n);
            peak_abs_z[i] = z.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            crossed[i] = crate::stats::sustained_crossing(&z, Z_THRESHOLD, 2).is_some();
        }
    }
    let mut template_counts = BTreeMap::new();
    let mut template_times: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for e in incident.telemetry.logs_for(entity) {
        if let Some(id) = miner.lookup(&e.message) {
            *template_counts.entry(id).or_insert(0) += 1;
            template_times.entry(id).or_default().push(e.timestamp);
        }
    }
    let mut in_abnormal = 0usize;
    let mut out_abnormal = 0usize;
    for s in &incident.telemetry.spans {
        if s.status == SpanStatus::Ok {
            continue;
        }
        if s.callee == entity {
            in_abnormal += 1;
        }
        if s.caller == entity {
            out_abnormal += 1;
        }
    }
    let mut neighbor_levels = BTreeMap::new();
    let out_n = incident
        .graph
        .neighbors(entity, Direction::Out)
        .unwrap_or_default();
    let in_n = incident
        .graph
        .neighbors(entity, Direction::In)
        .unwrap_or_default();
    for n in out_n.iter().chain(&in_n) {
        if let Ok(e) = incident.graph.entity(n) {
            let key = match e.level {
                Level::Node => "node",
                Level::Service => "service",
                Level::Pod => "pod",
            };
            *neighbor_levels.entry(key.to_string()).or_insert(0) += 1;
        }
    }
    MemberEvidence {
        peak_abs_z,
        crossed,
        template_counts,
        template_times,
        in_abnormal,
        out_abnormal,
        neighbor_levels,
        in_degree: in_n.len() as f64,
        out_degree: out_n.len() as f64,
    }
}

fn burstiness(times: &[f64], window: (f64, f64)) -> f64 {
    if times.is_empty() {
        return 0.0;
    }
    let bins = 10usize;
    let step = (window.1 - window.0) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &t in times {
        let i = (((t - window.0) / step.max(1e-9)) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let mean = times.len() as f64 / bins as f64;
    let peak = *counts.iter().max().unwrap() as f64;
    peak / mean.max(1e-9)
}

fn render_summary(signature: &EvidenceSignature) -> String {
    let kpis: Vec<&str> = signature.top_kpis.iter().map(|k| k.kpi.as_str()).collect();
    let direction = match signature.interaction {
        InteractionPattern::IncomingDominant => "incoming-dominant",
        InteractionPattern::OutgoingDominant => "outgoing-dominant",
        InteractionPattern::Mixed => "mixed",
    };
    let templates = if signature.log_templates.is_empty() {
        "no distinctive log templates".to_string()
    } else {
        let ids: Vec<String> = signature
            .log_templates
            .iter()
            .map(|t| format!("#{}", t.template_id))
            .collect();
        format!("log templates {}", ids.join(", "))
    };
    format!(
        "elevated {}; {}; {} interaction anomalies",
        if kpis.is_empty() {
            "no KPI".to_string()
        } else {
            kpis.join(", ")
        },
        templates,
        direction
    )
}

/// Aggregate per-code evidence over all `(incident, entity)` members and
/// render one token per code. `assignments[i][e]` is the code of entity
/// position `e` in incident `i`.
pub fn build_lexicon(
    incidents: &[Incident],
    assignments: &[Vec<usize>],
    codebook: &Codebook,
    miner: &TemplateMiner,
    provenance: Provenance,
) -> Result<SymptomLexicon, LexiconError> {
    for (i, (incident, assign)) in incidents.iter().zip(assignments).enumerate() {
        if incident.graph.len() != assign.len() {
            return Err(LexiconError::AssignmentShape {
                incident: i,
                got: assign.len(),
                want: incident.graph.len(),
            });
        }
    }
    // global template distribution for lift
    let mut global_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut global_total = 0usize;
    let mut members_by_code: BTreeMap<usize, Vec<(usize, String)>> = BTreeMap::new();
    for (i, (incident, assign)) in incidents.iter().zip(assignments).enumerate() {
        for (e, entity) in incident.graph.entities().iter().enumerate() {
            members_by_code
                .entry(assign[e])
                .or_default()
                .push((i, entity.id.clone()));
            for ev in incident.telemetry.logs_for(&entity.id) {
                if let Some(id) = miner.lookup(&ev.message) {
                    *global_counts.entry(id).or_insert(0) += 1;
                    global_total += 1;
                }
            }
        }
    }
    let mut tokens = Vec::with_capacity(codebook.len());
    for code in 0..codebook.len() {
        let members = members_by_code.get(&code);
        let Some(members) = members.filter(|m| !m.is_empty()) else {
            tokens.push(SymptomToken {
                id: code,
                used: false,
                summary: "unused code".to_string(),
                signature: None,
            });
            continue;
        };
        let evidence: Vec<MemberEvidence> = members
            .iter()
            .map(|(i, entity)| member_evidence(&incidents[*i], entity, miner))
            .collect();

        // metrics: rank KPIs by median peak |z|, keep top 3 that cross
        let mut kpi_rank: Vec<(usize, f64, f64)> = (0..KPIS.len())
            .map(|k| {
                let peaks: Vec<f64> = evidence.iter().map(|m| m.peak_abs_z[k]).collect();
                let crossings = evidence.iter().filter(|m| m.crossed[k]).count() as f64
                    / evidence.len() as f64;
                (k, percentile(&peaks, 50.0), crossings)
            })
            .collect();
        kpi_rank.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then(b.2.partial_cmp(&a.2).unwrap())
                .then(a.0.cmp(&b.0))
        });
        let top_kpis: Vec<KpiBand> = kpi_rank
            .iter()
            .take(TOP_KPI_CAP)
            .filter(|(_, med, _)| *med > Z_THRESHOLD)
            .map(|&(k, med, crossings)| {
                let peaks: Vec<f64> = evidence.iter().map(|m| m.peak_abs_z[k]).collect();
                KpiBand {
                    kpi: KPIS[k].to_string(),
                    median_abs_z: med,
                    crossing_frequency: crossings,
                    band: (percentile(&peaks, 25.0), percentile(&peaks, 75.0)),
                }
            })
            .collect();

        // logs: templates with lift over the global distribution
        let mut cluster_counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut cluster_total = 0usize;
        for m in &evidence {
            for (&id, &c) in &m.template_counts {
                *cluster_counts.entry(id).or_insert(0) += c;
                cluster_total += c;
            }
        }
        let mut log_templates: Vec<TemplateLift> = Vec::new();
        if cluster_total > 0 && global_total > 0 {
            for (&id, &c) in &cluster_counts {
                let p_cluster = c as f64 / cluster_total as f64;
                let p_global =
                    global_counts.get(&id).copied().unwrap_or(0) as f64 / global_total as f64;
                if p_global <= 0.0 {
                    continue;
                }
                let lift = p_cluster / p_global;
                if lift > LIFT_THRESHOLD {
                    let mut times = Vec::new();
                    for ((inc_idx, entity), m) in members.iter().zip(&evidence) {
                        let _ = entity;
                        if let Some(ts) = m.template_times.get(&id) {
                            let w = incidents[*inc_idx].window;
                            times.push(burstiness(ts, w));
                        }
                    }
                    log_templates.push(TemplateLift {
                        template_id: id,
                        lift,
                        burstiness: crate::stats::mean(&times),
                    });
                }
            }
        }
        log_templates.sort_by(|a, b| {
            b.lift
                .partial_cmp(&a.lift)
                .unwrap()
                .then(a.template_id.cmp(&b.template_id))
        });

        // traces: incoming vs outgoing anomaly tendency
        let in_total: usize = evidence.iter().map(|m| m.in_abnormal).sum();
        let out_total: usize = evidence.iter().map(|m| m.out_abnormal).sum();
        let interaction = if out_total as f64 > 1.5 * in_total as f64 && out_total > 0 {
            InteractionPattern::OutgoingDominant
        } else if in_total as f64 > 1.5 * out_total as f64 && in_total > 0 {
            InteractionPattern::IncomingDominant
        } else {
            InteractionPattern::Mixed
        };

        // topology
        let mut neighbor_levels: BTreeMap<String, usize> = BTreeMap::new();
        for m in &evidence {
            for (k, v) in &m.neighbor_levels {
                *neighbor_levels.entry(k.clone()).or_insert(0) += v;
            }
        }
        let in_degrees: Vec<f64> = evidence.iter().map(|m| m.in_degree).collect();
        let out_degrees: Vec<f64> = evidence.iter().map(|m| m.out_degree).collect();

        let signature = EvidenceSignature {
            top_kpis,
            log_templates,
            interaction,
            neighbor_levels,
            in_degree_quartiles: quartiles(&in_degrees),
            out_degree_quartiles: quartiles(&out_degrees),
        };
        tokens.push(SymptomToken {
            id: code,
            used: true,
            summary: render_summary(&signature),
            signature: Some(signature),
        });
    }
    Ok(SymptomLexicon { tokens, provenance })
}

// ---------------------------------------------------------------------------
// Vocabulary quality
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VocabQuality {
    pub purity: f64,
    pub nmi: f64,
    pub intra_token_variance: f64,
}

fn entropy(counts: &BTreeMap<usize, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// Purity, normalized mutual information, and mean within-cluster variance
/// for code assignments against per-entity class labels.
pub fn vocab_quality(assignments: &[usize], labels: &[usize], states: &[Vec<f64>]) -> VocabQuality {
    assert_eq!(assignments.len(), labels.len());
    assert_eq!(assignments.len(), states.len());
    let n = assignments.len() as f64;
    if assignments.is_empty() {
        return VocabQuality {
            purity: 0.0,
            nmi: 0.0,
            intra_token_variance: 0.0,
        };
    }
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut by_code: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_label: BTreeMap<usize, usize> = BTreeMap::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *joint.entry((a, l)).or_insert(0) += 1;
        *by_code.entry(a).or_insert(0) += 1;
        *by_label.entry(l).or_insert(0) += 1;
    }
    let purity: f64 = by_code
        .keys()
        .map(|&a| {
            joint
                .iter()
                .filter(|((ja, _), _)| *ja == a)
                .map(|(_, &c)| c)
                .max()
                .unwrap_or(0) as f64
        })
        .sum::<f64>()
        / n;
    let h_a = entropy(&by_code, n);
    let h_l = entropy(&by_label, n);
    let mut mi = 0.0;
    for (&(a, l), &c) in &joint {
        let p = c as f64 / n;
        let pa = by_code[&a] as f64 / n;
        let pl = by_label[&l] as f64 / n;
        mi += p * (p / (pa * pl)).ln();
    }
    let nmi = if h_a > 1e-12 && h_l > 1e-12 {
        mi / (h_a * h_l).sqrt()
    } else {
        0.0
    };

    // mean over used codes of mean squared distance to the cluster centroid
    let dim = states[0].len();
    let mut centroid_sum: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&a, s) in assignments.iter().zip(states) {
        let acc = centroid_sum.entry(a).or_insert_with(|| vec![0.0; dim]);
        for (x, &v) in acc.iter_mut().zip(s) {
            *x += v;
        }
    }
    let mut var_sum = 0.0;
    for (&a, sum) in &centroid_sum {
        let count = by_code[&a] as f64;
        let centroid: Vec<f64> = sum.iter().map(|x| x / count).collect();
        let mut acc = 0.0;
        for (&ai, s) in assignments.iter().zip(states) {
            if ai == a {
                acc += s
                    .iter()
                    .zip(&centroid)
                    .map(|(x, c)| (x - c) * (x - c))
                    .sum::<f64>();
            }
        }
        var_sum += acc / count;
    }
    VocabQuality {
        purity,
        nmi,
        intra_token_variance: var_sum / by_code.len() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::mine_templates;
    use crate::graph::{build_graph, pod_id, ServiceSpec, TopologySpec};
    use crate::sim::{inject_fault, FaultType, SimConfig};

    #[test]
    fn purity_and_nmi_perfect_alignment() {
        let assignments = vec![0, 0, 1, 1, 2, 2];
        let labels = vec![4, 4, 5, 5, 6, 6];
        let states = vec![vec![0.0]; 6];
        let q = vocab_quality(&assignments, &labels, &states);
        assert!((q.purity - 1.0).abs() < 1e-12);
        assert!((q.nmi - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_code_multiple_classes_nmi_zero() {
        let assignments = vec![0; 6];
        let labels = vec![0, 0, 1, 1, 2, 2];
        let states = vec![vec![1.0]; 6];
        let q = vocab_quality(&assignments, &labels, &states);
        assert_eq!(q.nmi, 0.0);
        assert!((q.purity - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_nmi_zero() {
        let q = vocab_quality(&[0, 1, 0, 1], &[3, 3, 3, 3], &vec![vec![0.0]; 4]);
        assert_eq!(q.nmi, 0.0);
    }

    fn chain_incidents() -> Vec<Incident> {
        let spec = TopologySpec {
            services: ["a", "b", "c"]
                .iter()
                .map(|n| ServiceSpec {
                    name: n.to_string(),
                    replicas: 1,
                })
                .collect(),
            nodes: vec!["n0".into()],
            calls: vec![("a".into(), "b".into()), ("b".into(), "c".into())],
        };
        let g = build_graph(&spec, 0).unwrap();
        let cfg = SimConfig::default();
        (0..4)
            .map(|s| inject_fault(&g, FaultType::CpuHog, &pod_id("a", 0), 100 + s, &cfg).unwrap())
            .collect()
    }

    #[test]
    fn cpu_root_cluster_signature() {
        let incidents = chain_incidents();
        let miner = mine_templates(
            incidents
                .iter()
                .flat_map(|i| i.telemetry.logs.values().flatten())
                .map(|e| e.message.as_str())
                .collect::<Vec<_>>(),
        );
        // code 0 = the faulted pod, code 1 = everything else
        let assignments: Vec<Vec<usize>> = incidents
            .iter()
            .map(|i| {
                i.graph
                    .entities()
                    .iter()
                    .map(|e| if e.id == i.label_root { 0 } else { 1 })
                    .collect()
            })
            .collect();
        let codebook = Codebook::new(vec![vec![0.0; 4], vec![1.0; 4]], 0.25);
        let lexicon = build_lexicon(
            &incidents,
            &assignments,
            &codebook,
            &miner,
            Provenance {
                dataset_hash: "d".into(),
                codebook_hash: "c".into(),
            },
        )
        .unwrap();
        let token = &lexicon.tokens[0];
        assert!(token.used);
        let sig = token.signature.as_ref().unwrap();
        assert!(sig.top_kpis.iter().any(|k| k.kpi == "cpu"));
        assert!(sig.top_kpis.len() <= 3);
        assert_eq!(sig.interaction, InteractionPattern::OutgoingDominant);
        for t in &sig.log_templates {
            assert!(t.template_id < miner.len());
            assert!(t.lift > 2.0);
        }
        assert!(token.summary.contains("cpu"));
    }

    #[test]
    fn unused_code_marked() {
        let incidents = chain_incidents();
        let miner = mine_templates(std::iter::empty());
        let assignments: Vec<Vec<usize>> = incidents
            .iter()
            .map(|i| vec![0; i.graph.len()])
            .collect();
        let codebook = Codebook::new(vec![vec![0.0; 4], vec![1.0; 4]], 0.25);
        let lexicon = build_lexicon(
            &incidents,
            &assignments,
            &codebook,
            &miner,
            Provenance {
                dataset_hash: "d".into(),
                codebook_hash: "c".into(),
            },
        )
        .unwrap();
        assert!(lexicon.tokens[0].used);
        assert!(!lexicon.tokens[1].used);
        assert!(lexicon.tokens[1].signature.is_none());
    }

    #[test]
    fn lexicon_build_is_deterministic() {
        let incidents = chain_incidents();
        let miner = mine_templates(
            incidents
                .iter()
                .flat_map(|i| i.telemetry.logs.values().flatten())
                .map(|e| e.message.as_str())
                .collect::<Vec<_>>(),
        );
        let assignments: Vec<Vec<usize>> = incidents
            .iter()
            .map(|i| (0..i.graph.len()).map(|e| e % 2).collect())
            .collect();
        let codebook = Codebook::new(vec![vec![0.0; 4], vec![1.0; 4]], 0.25);
        let provenance = Provenance {
            dataset_hash: "d".into(),
            codebook_hash: "c".into(),
        };
        let a = build_lexicon(&incidents, &assignments, &codebook, &miner, provenance.clone()).unwrap();
        let b = build_lexicon(&incidents, &assignments, &codebook, &miner, provenance).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        let incidents = chain_incidents();
        let miner = mine_templates(std::iter::empty());
        let codebook = Codebook::new(vec![vec![0.0; 4]], 0.25);
        let err = build_lexicon(
            &incidents,
            &[vec![0; 2]],
            &codebook,
            &miner,
            Provenance {
                dataset_hash: "d".into(),
                codebook_hash: "c".into(),
            },
        )
        .unwrap_err();
        assert!(matches!(err, LexiconError::AssignmentShape { .. }));
    }
}
