//! Detection precision/recall at an IoU threshold, top-k error and fragment
//! accuracy.

use std::collections::BTreeMap;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, Label, Region};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("iou threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("sample {index}: ranked list has {len} entries, fewer than k = {k}")]
    ListTooShort { index: usize, len: usize, k: usize },
    #[error("{predictions} ranked lists but {truths} truth labels")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("no samples to evaluate")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    iou_threshold: f64,
}

impl EvalConfig {
    pub fn new(iou_threshold: f64) -> Result<Self, EvalError> {
        if iou_threshold > 0.0 && iou_threshold <= 1.0 {
            Ok(Self { iou_threshold })
        } else {
            Err(EvalError::BadThreshold(iou_threshold))
        }
    }

    pub fn iou_threshold(&self) -> f64 {
        self.iou_threshold
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.85,
        }
    }
}

/// Raw match counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

impl Counts {
    /// `TP / (TP + FP)`; 1 when there are no predictions.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `TP / (TP + FN)`; 1 when there is no truth.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Balanced harmonic mean of precision and recall.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn scores(&self) -> ClassScores {
        ClassScores {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Serialized per-class entry of a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class detection counts. Reports over several documents merge by
/// summing counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DetectionReport {
    per_class: BTreeMap<Label, Counts>,
}

impl DetectionReport {
    pub fn counts(&self, label: Label) -> Counts {
        self.per_class.get(&label).copied().unwrap_or_default()
    }

    pub fn micro(&self) -> Counts {
        let mut total = Counts::default();
        for c in self.per_class.values() {
            total += *c;
        }
        total
    }

    pub fn merge(&mut self, other: &DetectionReport) {
        for (label, c) in &other.per_class {
            *self.per_class.entry(*label).or_default() += *c;
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let per_class: BTreeMap<&str, ClassScores> = Label::ALL
            .iter()
            .map(|l| (l.as_str(), self.counts(*l).scores()))
            .collect();
        serde_json::json!({
            "per_class": per_class,
            "micro": self.micro().scores(),
        })
    }
}

impl FromIterator<DetectionReport> for DetectionReport {
    fn from_iter<I: IntoIterator<Item = DetectionReport>>(iter: I) -> Self {
        let mut total = DetectionReport::default();
        for r in iter {
            total.merge(&r);
        }
        total
    }
}

/// Greedy one-to-one matching per class.
///
/// Predictions are visited in descending score order (ties by larger area,
/// then position). Each takes the unmatched same-class truth with the highest
/// IoU; it is a true positive when that IoU reaches the threshold.
pub fn match_detections(pred: &[Region], truth: &[Region], cfg: &EvalConfig) -> DetectionReport {
    let mut report = DetectionReport::default();
    for label in Label::ALL {
        let mut preds: Vec<&Region> = pred.iter().filter(|r| r.label == label).collect();
        let mut truths: Vec<&Region> = truth.iter().filter(|r| r.label == label).collect();
        if preds.is_empty() && truths.is_empty() {
            continue;
        }
        preds.sort_by(|a, b| a.priority_cmp(b));
        truths.sort_by(|a, b| a.bbox.geometric_cmp(&b.bbox));

        let mut taken = vec![false; truths.len()];
        let mut counts = Counts::default();
        for p in preds {
            let best = truths
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[*i])
                .map(|(i, t)| (i, iou(&p.bbox, &t.bbox)))
                .fold(None::<(usize, f64)>, |acc, (i, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((i, v)),
                });
            match best {
                Some((i, v)) if v >= cfg.iou_threshold => {
                    taken[i] = true;
                    counts.tp += 1;
                }
                _ => counts.fp += 1,
            }
        }
        counts.fn_ = taken.iter().filter(|t| !**t).count() as u64;
        report.per_class.insert(label, counts);
    }
    report
}

/// Fraction of samples whose truth class is missing from the first `k`
/// entries of its ranked prediction list.
pub fn topk_error<T: PartialEq>(
    predictions: &[Vec<T>],
    truths: &[T],
    k: usize,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut misses = 0usize;
    for (index, (ranked, t)) in predictions.iter().zip(truths).enumerate() {
        if ranked.len() < k {
            return Err(EvalError::ListTooShort {
                index,
                len: ranked.len(),
                k,
            });
        }
        if !ranked[..k].contains(t) {
            misses += 1;
        }
    }
    Ok(misses as f64 / predictions.len() as f64)
}

/// `(TP + TN) / (TP + TN + FP + FN)`.
pub fn fragment_accuracy(tp: u64, tn: u64, fp: u64, fn_: u64) -> Result<f64, EvalError> {
    let total = tp + tn + fp + fn_;
    if total == 0 {
        return Err(EvalError::Empty);
    }
    Ok((tp + tn) as f64 / total as f64)
}
