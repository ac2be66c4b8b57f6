//! Localization and classification metrics plus the topology-faithfulness
//! score for diagnosis reports.

use serde::{Deserialize, Serialize};

use crate::graph::{DependencyGraph, Saliency};
use crate::het::{DiagnosisReport, Outcome};

/// 1-based rank of `truth` in `ranking`, `None` when absent (treated as
/// rank infinity: zero reciprocal-rank contribution).
pub fn rank_of(ranking: &[String], truth: &str) -> Option<usize> {
    ranking.iter().position(|e| e == truth).map(|i| i + 1)
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LocalizationEval {
    pub acc_at_1: f64,
    pub acc_at_3: f64,
    pub acc_at_5: f64,
    pub mrr: f64,
    pub n: usize,
    /// Rankings that did not contain the truth at all.
    pub missing_truth: usize,
}

/// Top-k accuracy and mean reciprocal rank over full entity rankings.
pub fn eval_localization(rankings: &[Vec<String>], truths: &[String]) -> LocalizationEval {
    assert_eq!(rankings.len(), truths.len());
    let n = rankings.len();
    if n == 0 {
        return LocalizationEval::default();
    }
    let mut hits = [0usize; 3];
    let mut rr_sum = 0.0;
    let mut missing = 0usize;
    for (ranking, truth) in rankings.iter().zip(truths) {
        match rank_of(ranking, truth) {
            Some(r) => {
                for (slot, k) in [1usize, 3, 5].iter().enumerate() {
                    if r <= *k {
                        hits[slot] += 1;
                    }
                }
                rr_sum += 1.0 / r as f64;
            }
            None => missing += 1,
        }
    }
    let out = LocalizationEval {
        acc_at_1: hits[0] as f64 / n as f64,
        acc_at_3: hits[1] as f64 / n as f64,
        acc_at_5: hits[2] as f64 / n as f64,
        mrr: rr_sum / n as f64,
        n,
        missing_truth: missing,
    };
    assert!(out.acc_at_1 <= out.acc_at_3 && out.acc_at_3 <= out.acc_at_5);
    out
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClassificationEval {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

fn f1(p: f64, r: f64) -> f64 {
    safe_div(2.0 * p * r, p + r)
}

/// Confusion-matrix precision/recall/F1, micro and macro averaged. Macro
/// averages are unweighted over all `c` classes; classes absent from the
/// truth contribute zero terms.
pub fn eval_classification(preds: &[usize], truths: &[usize], c: usize) -> ClassificationEval {
    assert_eq!(preds.len(), truths.len());
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fn_ = vec![0usize; c];
    let mut support = vec![0usize; c];
    for (&p, &t) in preds.iter().zip(truths) {
        assert!(p < c && t < c, "label out of range");
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let p = safe_div(tp[k] as f64, (tp[k] + fp[k]) as f64);
            let r = safe_div(tp[k] as f64, (tp[k] + fn_[k]) as f64);
            ClassMetrics {
                precision: p,
                recall: r,
                f1: f1(p, r),
                support: support[k],
            }
        })
        .collect();
    let tp_sum: usize = tp.iter().sum();
    let fp_sum: usize = fp.iter().sum();
    let fn_sum: usize = fn_.iter().sum();
    let micro_p = safe_div(tp_sum as f64, (tp_sum + fp_sum) as f64);
    let micro_r = safe_div(tp_sum as f64, (tp_sum + fn_sum) as f64);
    let macro_p = per_class.iter().map(|m| m.precision).sum::<f64>() / c as f64;
    let macro_r = per_class.iter().map(|m| m.recall).sum::<f64>() / c as f64;
    let macro_f = per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64;
    ClassificationEval {
        micro_precision: micro_p,
        micro_recall: micro_r,
        micro_f1: f1(micro_p, micro_r),
        macro_precision: macro_p,
        macro_recall: macro_r,
        macro_f1: macro_f,
        per_class,
    }
}

/// Fraction of report-cited route edges that exist in the dependency graph,
/// multiplied by the fraction ranking in the top half of edge saliency.
/// Routes are taken from accepted verdicts, or from all hypotheses when
/// nothing was accepted. No cited edges → 0.
pub fn topology_faithfulness(
    report: &DiagnosisReport,
    graph: &DependencyGraph,
    saliency: &Saliency,
) -> f64 {
    let mut cited: Vec<(String, String)> = Vec::new();
    let accepted: Vec<_> = report
        .hypotheses
        .iter()
        .filter(|v| v.outcome == Outcome::Accepted)
        .collect();
    let sources: Vec<_> = if accepted.is_empty() {
        report.hypotheses.iter().collect()
    } else {
        accepted
    };
    for v in sources {
        for w in v.hypothesis.route.windows(2) {
            cited.push((w[0].clone(), w[1].clone()));
        }
    }
    cited.sort();
    cited.dedup();
    if cited.is_empty() {
        return 0.0;
    }
    let valid = cited
        .iter()
        .filter(|(a, b)| graph.has_call_edge(a, b))
        .count();
    let mut weights: Vec<f64> = saliency.edge.values().copied().collect();
    weights.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let median = if weights.is_empty() {
        0.0
    } else {
        weights[weights.len() / 2]
    };
    let salient = cited
        .iter()
        .filter(|(a, b)| {
            saliency
                .edge
                .get(&(a.clone(), b.clone()))
                .is_some_and(|&w| w >= median)
        })
        .count();
    let n = cited.len() as f64;
    (valid as f64 / n) * (salient as f64 / n)
}
