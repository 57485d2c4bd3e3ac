//! Evaluation metrics: support-weighted overall precision/recall/F1, the
//! @k family, average precision, thresholded prediction, and the
//! taxonomy-consistency audit.
//!
//! Conventions, fixed for reproducibility:
//! - classes and labels are dense indices in taxonomy order;
//! - ties rank in ascending label index, and among exact (score, label)
//!   ties negatives rank first, so every metric is invariant to product
//!   ordering;
//! - products with no annotated attributes are skipped by the @k metrics
//!   (k = 0 is undefined);
//! - support weighting can place OF1 outside the [OP, OR] interval; no
//!   betweenness is assumed anywhere.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::taxonomy::CategoryTree;
use crate::Result;

/// Overall precision, recall, and F1 for one level, each a support-weighted
/// average of per-class values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall, and F1 at k = |ground truth| per product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Attribute-level block of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub overall: LevelPrf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_k: Option<AtK>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub average_precision: Option<f64>,
    /// Mean size of the thresholded predicted attribute sets.
    pub mean_predicted: f64,
    /// Mean size of the annotated attribute sets, for comparison.
    pub mean_annotated: f64,
}

/// One violating (category, node) pair and how often it was predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyViolation {
    pub category: u32,
    pub node: u32,
    pub count: usize,
}

/// Cross-level agreement of predictions with the taxonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Violating pair instances over all predicted pairs.
    pub rate: f64,
    pub violations: Vec<ConsistencyViolation>,
}

/// The full evaluation document; serializes to JSON with these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub category: LevelPrf,
    pub sub_category: LevelPrf,
    pub attributes: AttributeReport,
    pub consistency: ConsistencyReport,
    /// Fraction of products the pipeline could score at all; only the
    /// specialist baseline reports it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| crate::Error::Format(format!("evaluation report: {e}")))
    }

    /// Aligned text rendering of the same numbers.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>8} {:>8} {:>8}\n",
            "level", "OP", "OR", "OF1"
        ));
        let mut row = |name: &str, prf: &LevelPrf| {
            out.push_str(&format!(
                "{:<14} {:>8.4} {:>8.4} {:>8.4}\n",
                name, prf.precision, prf.recall, prf.f1
            ));
        };
        row("category", &self.category);
        row("sub-category", &self.sub_category);
        row("attributes", &self.attributes.overall);
        match self.attributes.at_k {
            Some(k) => out.push_str(&format!(
                "{:<14} {:>8.4} {:>8.4} {:>8.4}\n",
                "attributes@k", k.precision, k.recall, k.f1
            )),
            None => out.push_str("attributes@k   (no annotated attributes)\n"),
        }
        match self.attributes.average_precision {
            Some(ap) => out.push_str(&format!("{:<31} {:>8.4}\n", "average precision", ap)),
            None => out.push_str("average precision               (no positives)\n"),
        }
        out.push_str(&format!(
            "{:<31} {:>8.2}\n{:<31} {:>8.2}\n",
            "mean predicted attributes",
            self.attributes.mean_predicted,
            "mean annotated attributes",
            self.attributes.mean_annotated
        ));
        out.push_str(&format!(
            "{:<31} {:>8.4}\n",
            "inconsistent pair rate", self.consistency.rate
        ));
        if let Some(c) = self.coverage {
            out.push_str(&format!("{:<31} {:>8.4}\n", "coverage", c));
        }
        out
    }
}

/// Support-weighted overall precision/recall/F1 for mutually exclusive
/// classes.
pub fn overall_prf(truth: &[usize], predicted: &[usize], num_classes: usize) -> LevelPrf {
    let t: Vec<Vec<usize>> = truth.iter().map(|&c| vec![c]).collect();
    let p: Vec<Vec<usize>> = predicted.iter().map(|&c| vec![c]).collect();
    overall_prf_sets(&t, &p, num_classes)
}

/// Support-weighted overall precision/recall/F1 for label sets.
///
/// Per class: precision = TP / predicted (0 when never predicted), recall =
/// TP / support. Classes that never occur in the truth carry zero support
/// and are excluded from every average.
pub fn overall_prf_sets(
    truth: &[Vec<usize>],
    predicted: &[Vec<usize>],
    num_classes: usize,
) -> LevelPrf {
    assert!(
        truth.len() == predicted.len(),
        "overall_prf: {} truth rows vs {} predicted rows",
        truth.len(),
        predicted.len()
    );
    assert!(!truth.is_empty(), "overall_prf: empty evaluation set");
    let mut support = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut tp = vec![0usize; num_classes];
    for (ts, ps) in truth.iter().zip(predicted) {
        for &c in ts {
            assert!(c < num_classes, "overall_prf: class {c} out of {num_classes}");
            support[c] += 1;
            if ps.contains(&c) {
                tp[c] += 1;
            }
        }
        for &c in ps {
            assert!(c < num_classes, "overall_prf: class {c} out of {num_classes}");
            pred_count[c] += 1;
        }
    }
    let mut total_support = 0.0;
    let (mut op, mut or, mut of1) = (0.0, 0.0, 0.0);
    for c in 0..num_classes {
        if support[c] == 0 {
            continue;
        }
        let s = support[c] as f64;
        let p = if pred_count[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / pred_count[c] as f64
        };
        let r = tp[c] as f64 / s;
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        total_support += s;
        op += s * p;
        or += s * r;
        of1 += s * f1;
    }
    if total_support == 0.0 {
        // No class has any positive truth; every division convention in
        // this module resolves 0/0 to 0.
        return LevelPrf {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    LevelPrf {
        precision: op / total_support,
        recall: or / total_support,
        f1: of1 / total_support,
    }
}

/// Indices of the `k` highest scores, ties resolved toward the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("top_k: scores must not be NaN")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Precision/recall/F1 at k = |truth| per product, macro-averaged over
/// products with nonempty truth. `None` when no product has annotations.
pub fn at_k(scores: &[Vec<f64>], truth: &[Vec<usize>]) -> Option<AtK> {
    assert!(
        scores.len() == truth.len(),
        "at_k: {} score rows vs {} truth rows",
        scores.len(),
        truth.len()
    );
    let mut counted = 0usize;
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for (sv, ts) in scores.iter().zip(truth) {
        if ts.is_empty() {
            continue;
        }
        let k = ts.len();
        let top = top_k(sv, k);
        let hits = top.iter().filter(|i| ts.contains(i)).count() as f64;
        let p = hits / k as f64;
        let r = hits / ts.len() as f64;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        sp += p;
        sr += r;
        sf += f;
        counted += 1;
    }
    if counted == 0 {
        return None;
    }
    let n = counted as f64;
    Some(AtK {
        precision: sp / n,
        recall: sr / n,
        f1: sf / n,
    })
}

/// Micro average precision over all (product, label) pairs pooled and
/// ranked by score. Among exact (score, label) ties, negatives rank first.
/// `None` when the pool holds no positive pair.
pub fn average_precision(scores: &[Vec<f64>], truth: &[Vec<usize>]) -> Option<f64> {
    assert!(
        scores.len() == truth.len(),
        "average_precision: {} score rows vs {} truth rows",
        scores.len(),
        truth.len()
    );
    let mut pairs: Vec<(f64, usize, bool)> = Vec::new();
    for (sv, ts) in scores.iter().zip(truth) {
        for (label, &s) in sv.iter().enumerate() {
            assert!(!s.is_nan(), "average_precision: NaN score");
            pairs.push((s, label, ts.contains(&label)));
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let positives = pairs.iter().filter(|p| p.2).count();
    if positives == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, pair) in pairs.iter().enumerate() {
        if pair.2 {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Labels scored strictly above the threshold, per product, ascending.
pub fn threshold_predict(scores: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
    scores
        .iter()
        .map(|sv| {
            sv.iter()
                .enumerate()
                .filter(|(_, &s)| s > threshold)
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

/// Mean size of predicted label sets; 0 for an empty batch.
pub fn mean_predicted_attributes(predicted: &[Vec<usize>]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    predicted.iter().map(Vec::len).sum::<usize>() as f64 / predicted.len() as f64
}

/// Audits predicted (category, sub-category) and (category, attribute)
/// co-occurrences against the taxonomy. Each product contributes one pair
/// for its sub-category and one per predicted attribute; the rate is the
/// violating fraction.
pub fn audit_cooccurrence(
    predictions: &[(u32, u32, Vec<u32>)],
    tree: &CategoryTree,
) -> Result<ConsistencyReport> {
    let mut total_pairs = 0usize;
    let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (category, sub, attrs) in predictions {
        total_pairs += 1 + attrs.len();
        let (_, pairs) = tree.is_consistent(*category, *sub, attrs)?;
        for pair in pairs {
            *counts.entry(pair).or_insert(0) += 1;
        }
    }
    let violating: usize = counts.values().sum();
    Ok(ConsistencyReport {
        rate: if total_pairs == 0 {
            0.0
        } else {
            violating as f64 / total_pairs as f64
        },
        violations: counts
            .into_iter()
            .map(|((category, node), count)| ConsistencyViolation {
                category,
                node,
                count,
            })
            .collect(),
    })
}
