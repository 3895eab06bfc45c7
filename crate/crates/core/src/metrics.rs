//! Multi-label evaluation: AP/mAP, macro (CP/CR/CF1) and micro (OP/OR/OF1)
//! scores, their top-k variants, label-based mean accuracy and the
//! instance-based accuracy/precision/recall/F1.
//!
//! Every ratio whose denominator is zero is defined as 0.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Decision threshold; `p >= 0.5` predicts positive.
pub const THRESHOLD: f64 = 0.5;

/// Scores and binary targets for `N` samples and `M` labels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub samples: usize,
    pub labels: usize,
    pub scores: Vec<f64>,
    pub targets: Vec<bool>,
}

impl PredictionSet {
    pub fn new(samples: usize, labels: usize, scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if samples == 0 || labels == 0 {
            return Err(Error::Validation("prediction set needs N ≥ 1 and M ≥ 1".into()));
        }
        if scores.len() != samples * labels || targets.len() != samples * labels {
            return Err(Error::Validation(format!(
                "expected {} scores and targets, got {} and {}",
                samples * labels,
                scores.len(),
                targets.len()
            )));
        }
        if let Some(k) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Validation(format!(
                "score {} at index {k} lies outside [0, 1]",
                scores[k]
            )));
        }
        Ok(PredictionSet {
            samples,
            labels,
            scores,
            targets,
        })
    }

    /// From `N×M` probability and target tensors; targets must be 0 or 1.
    pub fn from_tensors<T: Scalar>(scores: &Tensor<T>, targets: &Tensor<T>) -> Result<Self> {
        let (n, m) = scores.dims2("prediction_set")?;
        scores.same_shape(targets, "prediction_set")?;
        let mut bits = Vec::with_capacity(n * m);
        for v in targets.data() {
            let v = v.widen();
            if v != 0.0 && v != 1.0 {
                return Err(Error::Validation(format!("target {v} is not binary")));
            }
            bits.push(v == 1.0);
        }
        Self::new(n, m, scores.to_f64_vec(), bits)
    }

    fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.labels + j]
    }

    fn target(&self, i: usize, j: usize) -> bool {
        self.targets[i * self.labels + j]
    }

    /// Threshold binarisation at [`THRESHOLD`].
    pub fn binarize(&self) -> Vec<bool> {
        self.scores.iter().map(|&s| s >= THRESHOLD).collect()
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

/// Average precision of one label's ranking; `None` when there are no positives.
///
/// Samples are ranked by descending score, ties kept in original order, and
/// AP = Σₙ Prec(n)·(Rec(n) − Rec(n−1)).
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let positives = targets.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if targets[idx] {
            hits += 1;
        }
        let precision = hits as f64 / (rank + 1) as f64;
        let recall = hits as f64 / positives as f64;
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    Some(ap)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroMicro {
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
}

/// Per-label (TP, FP, FN, TN) counts.
fn confusion(preds: &[bool], set: &PredictionSet) -> Vec<[usize; 4]> {
    let mut out = vec![[0usize; 4]; set.labels];
    for i in 0..set.samples {
        for (j, c) in out.iter_mut().enumerate() {
            let p = preds[i * set.labels + j];
            let t = set.target(i, j);
            let slot = match (p, t) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            c[slot] += 1;
        }
    }
    out
}

/// Macro- and micro-averaged precision/recall/F1 of binary predictions.
pub fn macro_micro(preds: &[bool], set: &PredictionSet) -> MacroMicro {
    let counts = confusion(preds, set);
    let m = set.labels as f64;
    let cp = counts.iter().map(|c| ratio(c[0] as f64, (c[0] + c[1]) as f64)).sum::<f64>() / m;
    let cr = counts.iter().map(|c| ratio(c[0] as f64, (c[0] + c[2]) as f64)).sum::<f64>() / m;
    let tp: usize = counts.iter().map(|c| c[0]).sum();
    let fp: usize = counts.iter().map(|c| c[1]).sum();
    let fneg: usize = counts.iter().map(|c| c[2]).sum();
    let op = ratio(tp as f64, (tp + fp) as f64);
    let or = ratio(tp as f64, (tp + fneg) as f64);
    MacroMicro {
        cp,
        cr,
        cf1: harmonic(cp, cr),
        op,
        or,
        of1: harmonic(op, or),
    }
}

/// Marks exactly the `k` highest-scoring labels of each sample positive;
/// ties go to the lower label index.
pub fn topk_binarize(set: &PredictionSet, k: usize) -> Result<Vec<bool>> {
    if k > set.labels {
        return Err(Error::Validation(format!(
            "top-{k} requested with only {} labels",
            set.labels
        )));
    }
    let mut out = vec![false; set.scores.len()];
    let mut order: Vec<usize> = Vec::with_capacity(set.labels);
    for i in 0..set.samples {
        order.clear();
        order.extend(0..set.labels);
        order.sort_by(|&a, &b| set.score(i, b).total_cmp(&set.score(i, a)));
        for &j in &order[..k] {
            out[i * set.labels + j] = true;
        }
    }
    Ok(out)
}

/// Label-based mean accuracy: average over labels of the mean of the
/// positive-sample and negative-sample accuracies.
pub fn mean_accuracy(preds: &[bool], set: &PredictionSet) -> Result<f64> {
    let counts = confusion(preds, set);
    let mut total = 0.0;
    for (j, c) in counts.iter().enumerate() {
        let (pos, neg) = (c[0] + c[2], c[3] + c[1]);
        if pos == 0 || neg == 0 {
            return Err(Error::Validation(format!(
                "label {j} has {pos} positive and {neg} negative samples; mean accuracy needs both"
            )));
        }
        total += 0.5 * (c[0] as f64 / pos as f64 + c[3] as f64 / neg as f64);
    }
    Ok(total / set.labels as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub accu: f64,
    pub prec: f64,
    pub recall: f64,
    /// Harmonic mean of the sample-averaged `prec` and `recall`.
    pub f1: f64,
    /// Sample average of each sample's own precision/recall harmonic mean.
    pub f1_per_sample: f64,
}

/// Instance-based metrics averaged over samples.
pub fn instance_metrics(preds: &[bool], set: &PredictionSet) -> InstanceMetrics {
    let n = set.samples as f64;
    let mut out = InstanceMetrics::default();
    for i in 0..set.samples {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for j in 0..set.labels {
            match (preds[i * set.labels + j], set.target(i, j)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        let p = ratio(tp as f64, (tp + fp) as f64);
        let r = ratio(tp as f64, (tp + fneg) as f64);
        out.accu += ratio(tp as f64, (tp + fp + fneg) as f64);
        out.prec += p;
        out.recall += r;
        out.f1_per_sample += harmonic(p, r);
    }
    out.accu /= n;
    out.prec /= n;
    out.recall /= n;
    out.f1_per_sample /= n;
    out.f1 = harmonic(out.prec, out.recall);
    out
}

/// Every metric for one prediction set. Values are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean AP over labels that have at least one positive; `None` if none do.
    pub map: Option<f64>,
    /// Per-label AP; `None` marks a label without positives (excluded from mAP).
    pub ap: Vec<Option<f64>>,
    #[serde(flatten)]
    pub all: MacroMicro,
    pub top_k: usize,
    /// The six macro/micro scores with top-k binarisation.
    pub topk: MacroMicro,
    /// `None` when some label lacks positive or negative samples.
    pub ma: Option<f64>,
    #[serde(flatten)]
    pub instance: InstanceMetrics,
}

pub fn evaluate(set: &PredictionSet, top_k: usize) -> Result<MetricsReport> {
    let ap: Vec<Option<f64>> = (0..set.labels)
        .map(|j| {
            let scores: Vec<f64> = (0..set.samples).map(|i| set.score(i, j)).collect();
            let targets: Vec<bool> = (0..set.samples).map(|i| set.target(i, j)).collect();
            let ap = average_precision(&scores, &targets);
            if ap.is_none() {
                warn!("label {j} has no positive samples; excluded from mAP");
            }
            ap
        })
        .collect();
    let included: Vec<f64> = ap.iter().flatten().copied().collect();
    let map = if included.is_empty() {
        None
    } else {
        Some(included.iter().sum::<f64>() / included.len() as f64)
    };
    let preds = set.binarize();
    let ma = match mean_accuracy(&preds, set) {
        Ok(v) => Some(v),
        Err(e) => {
            warn!("mean accuracy skipped: {e}");
            None
        }
    };
    let top_k = top_k.min(set.labels);
    Ok(MetricsReport {
        map,
        ap,
        all: macro_micro(&preds, set),
        top_k,
        topk: macro_micro(&topk_binarize(set, top_k)?, set),
        ma,
        instance: instance_metrics(&preds, set),
    })
}
