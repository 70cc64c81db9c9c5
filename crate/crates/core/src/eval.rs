//! Precision/recall/F1 evaluation over labeled pairs.
//!
//! Metrics are computed per pair and macro-averaged (the headline numbers);
//! micro aggregates of the raw counts are emitted alongside. A per-day-gap
//! breakdown supports cross-day curves.

use std::collections::BTreeMap;

use crate::dataset::LabeledClusterPair;
use crate::error::Result;
use crate::matcher::CorrespondenceSet;

#[derive(Debug, Clone, PartialEq)]
pub struct PairOutcome {
    pub cluster_id: String,
    pub day_gap: i64,
    pub predicted: Vec<(usize, usize)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalBucket {
    pub n_pairs: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub macro_all: EvalBucket,
    pub micro_all: EvalBucket,
    pub per_gap: BTreeMap<i64, EvalBucket>,
    pub pairs: Vec<PairOutcome>,
    /// Pairs without ground truth are excluded and counted here.
    pub skipped_without_gt: usize,
}

/// Per-pair counts and rates. With no predictions, precision is 0 unless the
/// ground truth is empty too (a perfectly handled empty pair scores 1).
pub fn score_pair(predicted: &[(usize, usize)], gt: &CorrespondenceSet) -> (usize, usize, usize, f64, f64, f64) {
    let gt_set: std::collections::HashSet<(usize, usize)> =
        gt.matches.iter().copied().collect();
    let tp = predicted.iter().filter(|m| gt_set.contains(m)).count();
    let fp = predicted.len() - tp;
    let fn_ = gt.matches.len() - tp;

    let (precision, recall) = if predicted.is_empty() && gt.matches.is_empty() {
        (1.0, 1.0)
    } else {
        let p = if predicted.is_empty() { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if gt.matches.is_empty() { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        (p, r)
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (tp, fp, fn_, precision, recall, f1)
}

fn macro_bucket(outcomes: &[&PairOutcome]) -> EvalBucket {
    let n = outcomes.len();
    if n == 0 {
        return EvalBucket { n_pairs: 0, precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    EvalBucket {
        n_pairs: n,
        precision: outcomes.iter().map(|o| o.precision).sum::<f64>() / n as f64,
        recall: outcomes.iter().map(|o| o.recall).sum::<f64>() / n as f64,
        f1: outcomes.iter().map(|o| o.f1).sum::<f64>() / n as f64,
    }
}

fn micro_bucket(outcomes: &[PairOutcome]) -> EvalBucket {
    let tp: usize = outcomes.iter().map(|o| o.tp).sum();
    let fp: usize = outcomes.iter().map(|o| o.fp).sum();
    let fn_: usize = outcomes.iter().map(|o| o.fn_).sum();
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 1.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 1.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    EvalBucket { n_pairs: outcomes.len(), precision, recall, f1 }
}

/// Run a predictor over every labeled pair and aggregate.
pub fn evaluate_with<F>(pairs: &[LabeledClusterPair], mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&LabeledClusterPair) -> Result<CorrespondenceSet>,
{
    let mut outcomes = Vec::new();
    let mut skipped = 0usize;
    for pair in pairs {
        let gt = match &pair.gt {
            Some(gt) => gt,
            None => {
                skipped += 1;
                continue;
            }
        };
        let pred = predict(pair)?;
        let (tp, fp, fn_, precision, recall, f1) = score_pair(&pred.matches, gt);
        outcomes.push(PairOutcome {
            cluster_id: pair.cluster_id.clone(),
            day_gap: pair.day_gap,
            predicted: pred.matches,
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        });
    }

    let mut per_gap = BTreeMap::new();
    let mut gaps: Vec<i64> = outcomes.iter().map(|o| o.day_gap).collect();
    gaps.sort_unstable();
    gaps.dedup();
    for gap in gaps {
        let subset: Vec<&PairOutcome> = outcomes.iter().filter(|o| o.day_gap == gap).collect();
        per_gap.insert(gap, macro_bucket(&subset));
    }
    let all: Vec<&PairOutcome> = outcomes.iter().collect();
    Ok(EvalReport {
        macro_all: macro_bucket(&all),
        micro_all: micro_bucket(&outcomes),
        per_gap,
        pairs: outcomes,
        skipped_without_gt: skipped,
    })
}

/// Summary CSV: one `all` row (macro), one `all_micro` row, then per-gap
/// macro rows. Columns: method, day_gap, precision, recall, f1, n_pairs.
pub fn metrics_csv(rows: &[(String, &EvalReport)]) -> String {
    let mut out = String::from("method,day_gap,precision,recall,f1,n_pairs\n");
    for (method, report) in rows {
        let fmt = |label: &str, b: &EvalBucket| {
            format!(
                "{method},{label},{:.6},{:.6},{:.6},{}\n",
                b.precision, b.recall, b.f1, b.n_pairs
            )
        };
        out.push_str(&fmt("all", &report.macro_all));
        out.push_str(&fmt("all_micro", &report.micro_all));
        for (gap, bucket) in &report.per_gap {
            out.push_str(&fmt(&gap.to_string(), bucket));
        }
    }
    out
}

/// Per-pair dump CSV for inspecting individual clusters.
pub fn per_pair_csv(method: &str, report: &EvalReport) -> String {
    let mut out = String::from("method,cluster_id,day_gap,tp,fp,fn,precision,recall,f1,matches\n");
    for o in &report.pairs {
        let matches = o
            .predicted
            .iter()
            .map(|(i, j)| format!("{i}-{j}"))
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{method},{},{},{},{},{},{:.6},{:.6},{:.6},{matches}\n",
            o.cluster_id, o.day_gap, o.tp, o.fp, o.fn_, o.precision, o.recall, o.f1
        ));
    }
    out
}
