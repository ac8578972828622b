//! Detection metrics for rare-event classification: exact rank-based
//! ROC-AUC, F1-optimal threshold selection over the precision-recall
//! candidate set, thresholded confusion metrics, and detection rates binned
//! by log-scaled event intensity.
//!
//! The AUC is the Mann-Whitney statistic (ties counted one half), computed
//! from average ranks rather than curve integration so the pairwise oracle
//! reproduces it exactly. Prediction convention everywhere: positive iff
//! `score >= threshold`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EapoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Thresholded evaluation summary. `roc_auc` is absent when the evaluated
/// set contains a single class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub roc_auc: Option<f64>,
    pub counts: ConfusionCounts,
}

impl EvalReport {
    /// Key-value text rendering, one `name = value` pair per line.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "threshold = {}", self.threshold);
        let _ = writeln!(out, "accuracy = {}", self.accuracy);
        let _ = writeln!(out, "precision = {}", self.precision);
        let _ = writeln!(out, "recall = {}", self.recall);
        let _ = writeln!(out, "f1 = {}", self.f1);
        match self.roc_auc {
            Some(a) => {
                let _ = writeln!(out, "roc_auc = {a}");
            }
            None => {
                let _ = writeln!(out, "roc_auc = absent");
            }
        }
        let _ = writeln!(out, "tp = {}", self.counts.tp);
        let _ = writeln!(out, "fp = {}", self.counts.fp);
        let _ = writeln!(out, "tn = {}", self.counts.tn);
        let _ = writeln!(out, "fn = {}", self.counts.fn_);
        out
    }
}

/// Detection counts for one half-open intensity bin `[lo, hi)` on the log10
/// scale. `detection_rate` is absent when the bin holds no positives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityBin {
    pub lo: f64,
    pub hi: f64,
    pub positive_count: usize,
    pub detected_count: usize,
    pub detection_rate: Option<f64>,
}

/// Per-bin detection rates of true events across log10-intensity bins. Bins
/// are aligned to integer multiples of the bin width and partition the
/// observed intensity range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityBreakdown {
    pub bin_width: f64,
    pub bins: Vec<IntensityBin>,
}

impl IntensityBreakdown {
    pub fn bin_edges(&self) -> Vec<f64> {
        let mut edges: Vec<f64> = self.bins.iter().map(|b| b.lo).collect();
        if let Some(last) = self.bins.last() {
            edges.push(last.hi);
        }
        edges
    }

    /// Delimited per-bin table for external plotting.
    pub fn export_table(&self, path: &Path, delimiter: char) -> Result<()> {
        let d = delimiter;
        let mut out = format!("log10_lo{d}log10_hi{d}positive_count{d}detected_count{d}detection_rate\n");
        for b in &self.bins {
            let rate = b
                .detection_rate
                .map_or_else(String::new, |r| r.to_string());
            let _ = writeln!(
                out,
                "{}{d}{}{d}{}{d}{}{d}{rate}",
                b.lo, b.hi, b.positive_count, b.detected_count
            );
        }
        fs::write(path, out).map_err(|e| EapoError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

fn check_scores_labels(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(EapoError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EapoError::NonFiniteInput(format!("score {bad}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(EapoError::InvalidConfig(format!(
            "label {bad} is not binary"
        )));
    }
    Ok(())
}

/// Probability that a uniformly random positive outscores a uniformly random
/// negative, ties counted one half. Exact rank statistic, not a trapezoid
/// approximation.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores_labels(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 {
        return Err(EapoError::SingleClass(0));
    }
    if negatives == 0 {
        return Err(EapoError::SingleClass(1));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Sum of average ranks (1-based) over positives; ties share the average
    // rank of their run, which is exact in halves.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }

    let p = positives as f64;
    let n = negatives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// The F1-maximizing decision threshold over the precision-recall candidate
/// set: midpoints between consecutive distinct sorted scores plus sentinels
/// below the minimum and above the maximum. Ties break toward the higher
/// threshold (fewer predicted positives).
pub fn select_threshold_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores_labels(scores, labels)?;
    let total_pos = labels.iter().filter(|&&l| l == 1).count();
    if total_pos == 0 {
        return Err(EapoError::NoPositives);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let f1_of = |tp: usize, predicted_pos: usize| -> f64 {
        let denom = predicted_pos + total_pos;
        if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };

    let max_score = scores[order[0]];
    let min_score = scores[*order.last().unwrap()];

    // Sweep candidates from the highest threshold down; strictly greater F1
    // replaces the incumbent, so equal-F1 ties keep the higher threshold.
    let mut best_threshold = max_score + 1.0;
    let mut best_f1 = f1_of(0, 0);

    let mut tp = 0;
    let mut predicted = 0;
    let mut i = 0;
    while i < order.len() {
        let run_score = scores[order[i]];
        while i < order.len() && scores[order[i]] == run_score {
            tp += usize::from(labels[order[i]] == 1);
            predicted += 1;
            i += 1;
        }
        let threshold = if i < order.len() {
            (run_score + scores[order[i]]) / 2.0
        } else {
            min_score - 1.0
        };
        let f1 = f1_of(tp, predicted);
        if f1 > best_f1 {
            best_f1 = f1;
            best_threshold = threshold;
        }
    }
    Ok(best_threshold)
}

/// Confusion metrics at a fixed threshold. Precision is 0 when nothing is
/// predicted positive; the AUC is included only when both classes appear.
pub fn metrics_at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    check_scores_labels(scores, labels)?;
    if scores.is_empty() {
        return Err(EapoError::EmptyDataset);
    }
    let mut counts = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted = s >= threshold;
        match (predicted, l) {
            (true, 1) => counts.tp += 1,
            (true, 0) => counts.fp += 1,
            (false, 0) => counts.tn += 1,
            _ => counts.fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let both_classes = counts.tp + counts.fn_ > 0 && counts.fp + counts.tn > 0;
    let auc = both_classes.then(|| roc_auc(scores, labels)).transpose()?;
    Ok(EvalReport {
        threshold,
        accuracy: ratio(counts.tp + counts.tn, scores.len()),
        precision,
        recall,
        f1,
        roc_auc: auc,
        counts,
    })
}

/// Detection rates of true events bucketed by `log10(intensity)` into
/// half-open bins of `bin_width`, aligned to integer multiples of the width.
/// Negatives are ignored; a positive without a positive intensity is an
/// error.
pub fn intensity_breakdown(
    scores: &[f64],
    labels: &[u8],
    intensities: &[Option<f64>],
    threshold: f64,
    bin_width: f64,
) -> Result<IntensityBreakdown> {
    check_scores_labels(scores, labels)?;
    if intensities.len() != scores.len() {
        return Err(EapoError::LengthMismatch {
            scores: scores.len(),
            labels: intensities.len(),
        });
    }
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(EapoError::InvalidConfig(format!(
            "bin width must be positive, got {bin_width}"
        )));
    }

    let mut events: Vec<(f64, bool)> = Vec::new();
    for (i, ((&s, &l), &intensity)) in scores.iter().zip(labels).zip(intensities).enumerate() {
        if l != 1 {
            continue;
        }
        match intensity {
            Some(v) if v > 0.0 && v.is_finite() => {
                events.push((v.log10(), s >= threshold));
            }
            _ => return Err(EapoError::MissingIntensity { index: i }),
        }
    }
    if events.is_empty() {
        return Ok(IntensityBreakdown {
            bin_width,
            bins: Vec::new(),
        });
    }

    let bin_of = |log_v: f64| (log_v / bin_width).floor() as i64;
    let lo_bin = events.iter().map(|&(v, _)| bin_of(v)).min().unwrap();
    let hi_bin = events.iter().map(|&(v, _)| bin_of(v)).max().unwrap();

    let mut bins: Vec<IntensityBin> = (lo_bin..=hi_bin)
        .map(|b| IntensityBin {
            lo: b as f64 * bin_width,
            hi: (b + 1) as f64 * bin_width,
            positive_count: 0,
            detected_count: 0,
            detection_rate: None,
        })
        .collect();
    for &(log_v, detected) in &events {
        let bin = &mut bins[(bin_of(log_v) - lo_bin) as usize];
        bin.positive_count += 1;
        bin.detected_count += usize::from(detected);
    }
    for bin in &mut bins {
        if bin.positive_count > 0 {
            bin.detection_rate = Some(bin.detected_count as f64 / bin.positive_count as f64);
        }
    }
    Ok(IntensityBreakdown { bin_width, bins })
}
