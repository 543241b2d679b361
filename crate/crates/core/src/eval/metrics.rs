//! Ranking metrics for binary scores.
//!
//! All threshold-based metrics predict positive iff `score >= t`, with `t`
//! ranging over the distinct score values (plus `+∞`, which predicts
//! nothing and contributes no area).

use serde::{Deserialize, Serialize};

/// Probability that a random positive outranks a random negative, ties
/// counted one half. `None` if either class is absent.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney U, kept integral so ties stay exact
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (mut p, mut n) = (0u64, 0u64);
        for &k in &order[i..j] {
            if labels[k] == 1 {
                p += 1;
            } else {
                n += 1;
            }
        }
        twice_u += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Some(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// `(tp, fp)` at each distinct threshold, highest threshold first.
fn threshold_counts(scores: &[f64], labels: &[u8]) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

/// Step-wise area under the precision-recall curve,
/// `Σ (R_k − R_{k−1})·P_k`. `None` without positives.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    if n_pos == 0 {
        return None;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in threshold_counts(scores, labels) {
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(area)
}

/// `max_t min(sensitivity, positive predictive value)`. `None` without
/// positives.
pub fn min_se_pp(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    if n_pos == 0 {
        return None;
    }
    let mut best = 0.0f64;
    for (tp, fp) in threshold_counts(scores, labels) {
        let se = tp as f64 / n_pos as f64;
        let ppv = tp as f64 / (tp + fp) as f64;
        best = best.max(se.min(ppv));
    }
    Some(best)
}

/// Fraction of weights with `|w| < 0.001`.
pub fn sparsity(weights: &[f64]) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    weights.iter().filter(|w| w.abs() < 1e-3).count() as f64 / weights.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// AUROC of the pooled (instance, task) pairs.
    Micro,
    /// Unweighted mean of per-task AUROCs.
    Macro,
    /// Mean of per-task AUROCs weighted by each task's positive count.
    Weighted,
}

/// Scores and labels of one task.
#[derive(Clone, Debug)]
pub struct TaskScores {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Multi-task AUROC. Tasks with an undefined AUROC are skipped; `None` if
/// none is defined.
pub fn aggregate_auroc(tasks: &[TaskScores], mode: Aggregation) -> Option<f64> {
    match mode {
        Aggregation::Micro => {
            let scores: Vec<f64> = tasks.iter().flat_map(|t| t.scores.iter().copied()).collect();
            let labels: Vec<u8> = tasks.iter().flat_map(|t| t.labels.iter().copied()).collect();
            if tasks.iter().all(|t| auroc(&t.scores, &t.labels).is_none()) {
                return None;
            }
            auroc(&scores, &labels)
        }
        Aggregation::Macro | Aggregation::Weighted => {
            let defined: Vec<(f64, f64)> = tasks
                .iter()
                .filter_map(|t| {
                    let pos = t.labels.iter().filter(|&&y| y == 1).count() as f64;
                    auroc(&t.scores, &t.labels).map(|a| (a, pos))
                })
                .collect();
            if defined.is_empty() {
                return None;
            }
            Some(if mode == Aggregation::Macro {
                defined.iter().map(|(a, _)| a).sum::<f64>() / defined.len() as f64
            } else {
                let total: f64 = defined.iter().map(|(_, w)| w).sum();
                defined.iter().map(|(a, w)| a * w).sum::<f64>() / total
            })
        }
    }
}

/// Weighted mean of per-task AUROCs with explicit weights, for callers that
/// already hold per-task results.
pub fn weighted_mean(values: &[(f64, f64)]) -> Option<f64> {
    let total: f64 = values.iter().map(|(_, w)| w).sum();
    (total > 0.0).then(|| values.iter().map(|(v, w)| v * w).sum::<f64>() / total)
}

/// Metrics of one binary task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub min_se_pp: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl MetricSet {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Self {
        let n_pos = labels.iter().filter(|&&y| y == 1).count();
        let defined = n_pos > 0 && n_pos < labels.len();
        Self {
            auroc: auroc(scores, labels),
            auprc: if defined { auprc(scores, labels) } else { None },
            min_se_pp: if defined { min_se_pp(scores, labels) } else { None },
            n_pos,
            n_neg: labels.len() - n_pos,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_basic() {
        assert_eq!(auroc(&[0.9, 0.1], &[1, 0]), Some(1.0));
        assert_eq!(auroc(&[0.5, 0.5], &[1, 0]), Some(0.5));
        assert_eq!(auroc(&[0.1, 0.9], &[1, 0]), Some(0.0));
        assert_eq!(auroc(&[0.1, 0.9], &[1, 1]), None);
    }

    #[test]
    fn worked_example() {
        let s = [0.9, 0.8, 0.2];
        let y = [1, 0, 1];
        assert_eq!(min_se_pp(&s, &y), Some(2.0 / 3.0));
        // thresholds 0.9: R=.5 P=1; 0.8: R=.5 P=.5; 0.2: R=1 P=2/3
        assert_eq!(auprc(&s, &y), Some(0.5 + 0.5 * (2.0 / 3.0)));
        assert_eq!(auroc(&s, &y), Some(0.5));
    }

    #[test]
    fn auprc_edge_cases() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1, 0.0], &[1, 1, 0, 0]), Some(1.0));
        assert_eq!(auprc(&[0.3; 5], &[1, 0, 0, 1, 0]), Some(0.4));
        assert_eq!(auprc(&[0.3, 0.2], &[0, 0]), None);
        assert_eq!(min_se_pp(&[0.9, 0.1], &[1, 0]), Some(1.0));
        assert_eq!(min_se_pp(&[0.9, 0.1], &[0, 0]), None);
    }

    #[test]
    fn aggregation() {
        let one = TaskScores {
            scores: vec![0.9, 0.2, 0.4, 0.3],
            labels: vec![1, 0, 1, 0],
        };
        let a = auroc(&one.scores, &one.labels).unwrap();
        for m in [Aggregation::Micro, Aggregation::Macro, Aggregation::Weighted] {
            assert_eq!(aggregate_auroc(std::slice::from_ref(&one), m), Some(a));
        }
        let sep = vec![
            TaskScores { scores: vec![0.9, 0.1], labels: vec![1, 0] },
            TaskScores { scores: vec![0.8, 0.2], labels: vec![1, 0] },
        ];
        assert_eq!(aggregate_auroc(&sep, Aggregation::Micro), Some(1.0));
        assert_eq!(weighted_mean(&[(0.8, 10.0), (0.6, 30.0)]), Some(0.65));
        let undefined = vec![TaskScores { scores: vec![0.1], labels: vec![1] }];
        assert_eq!(aggregate_auroc(&undefined, Aggregation::Macro), None);
        assert_eq!(aggregate_auroc(&undefined, Aggregation::Micro), None);
    }

    #[test]
    fn sparsity_threshold() {
        assert_eq!(sparsity(&[0.0, 0.0009, -0.0009, 0.001, 1.0]), 0.6);
    }

    #[test]
    fn metric_set_undefined_when_single_class() {
        let m = MetricSet::compute(&[0.1, 0.2], &[0, 0]);
        assert_eq!(m.auroc, None);
        assert_eq!(m.auprc, None);
        assert_eq!(m.n_neg, 2);
    }
}
