//! Accuracy, ROC-AUC and cross-seed aggregation.
//!
//! Unparsable outputs are counted in `n_failures` and left out of every
//! denominator; they are never scored as HC.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mmse::ClassLabel;
use crate::prompt::Mode;
use crate::verdict::{ParseFailure, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("no parsed outcomes")]
    NoParsedOutcomes,
    #[error("only one class among scored outcomes")]
    SingleClass,
    #[error("some parsed outcomes carry no probability")]
    MissingProbabilities,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledOutcome {
    pub subject_id: String,
    pub true_label: ClassLabel,
    pub verdict: Result<Verdict, ParseFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracySummary {
    pub accuracy: f64,
    pub correct: usize,
    pub parsed: usize,
    pub failures: usize,
}

pub fn accuracy(outcomes: &[LabeledOutcome]) -> Result<AccuracySummary, MetricError> {
    let mut correct = 0;
    let mut parsed = 0;
    for o in outcomes {
        if let Ok(v) = &o.verdict {
            parsed += 1;
            if v.prediction.label() == o.true_label {
                correct += 1;
            }
        }
    }
    if parsed == 0 {
        return Err(MetricError::NoParsedOutcomes);
    }
    Ok(AccuracySummary { accuracy: correct as f64 / parsed as f64, correct, parsed, failures: outcomes.len() - parsed })
}

/// ROC-AUC over parsed outcomes, using AD as the positive class.
pub fn roc_auc(outcomes: &[LabeledOutcome]) -> Result<f64, MetricError> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for o in outcomes {
        if let Ok(v) = &o.verdict {
            let p = v.probability.ok_or(MetricError::MissingProbabilities)?;
            match o.true_label {
                ClassLabel::Ad => pos.push(p),
                ClassLabel::Hc => neg.push(p),
            }
        }
    }
    if pos.is_empty() && neg.is_empty() {
        return Err(MetricError::NoParsedOutcomes);
    }
    auc_from_scores(&pos, &neg).ok_or(MetricError::SingleClass)
}

/// Mann-Whitney estimate: the probability that a random positive outscores a
/// random negative, ties counting one half. Computed from mid-ranks in
/// O(n log n). `None` if either side is empty.
pub fn auc_from_scores(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: Mode,
    pub k: usize,
    pub seed: u64,
    /// `None` when every output failed to parse.
    pub accuracy: Option<f64>,
    /// `None` in no-proxy runs, or when probabilities or a class are missing.
    pub auc: Option<f64>,
    pub n_failures: usize,
    pub n_total: usize,
}

impl RunMetrics {
    pub fn from_outcomes(mode: Mode, k: usize, seed: u64, outcomes: &[LabeledOutcome]) -> Self {
        let acc = accuracy(outcomes).ok();
        let auc = if mode == Mode::NoProxy { None } else { roc_auc(outcomes).ok() };
        let parsed = outcomes.iter().filter(|o| o.verdict.is_ok()).count();
        RunMetrics {
            mode,
            k,
            seed,
            accuracy: acc.map(|a| a.accuracy),
            auc,
            n_failures: outcomes.len() - parsed,
            n_total: outcomes.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Arithmetic mean and sample (n - 1) standard deviation; std is 0 for one value.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some(MeanStd { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub mode: Mode,
    pub k: usize,
    pub n_runs: usize,
    pub accuracy: Option<MeanStd>,
    pub auc: Option<MeanStd>,
    pub n_failures: usize,
}

/// Groups runs by `(mode, k)` in first-seen order. A group reports AUC only
/// if every run in it has one.
pub fn aggregate(runs: &[RunMetrics]) -> Vec<AggregateRow> {
    let mut keys: Vec<(Mode, usize)> = Vec::new();
    for r in runs {
        if !keys.contains(&(r.mode, r.k)) {
            keys.push((r.mode, r.k));
        }
    }
    keys.into_iter()
        .map(|(mode, k)| {
            let group: Vec<&RunMetrics> = runs.iter().filter(|r| r.mode == mode && r.k == k).collect();
            let accs: Vec<f64> = group.iter().filter_map(|r| r.accuracy).collect();
            let aucs: Option<Vec<f64>> = group.iter().map(|r| r.auc).collect();
            AggregateRow {
                mode,
                k,
                n_runs: group.len(),
                accuracy: mean_std(&accs),
                auc: aucs.and_then(|a| mean_std(&a)),
                n_failures: group.iter().map(|r| r.n_failures).sum(),
            }
        })
        .collect()
}
