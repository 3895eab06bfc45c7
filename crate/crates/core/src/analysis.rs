//! Measurements on trained models: feature/classifier angle distributions
//! and classifier affinity and norm statistics.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::model::{feature_classifier_angles, MultiLabelNet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::theory::optimal_angle_degrees;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierStats {
    /// `M×M` cosines between classifier columns.
    pub affinity: Tensor<f64>,
    /// Column L2 norms, length `M`.
    pub norms: Tensor<f64>,
}

impl ClassifierStats {
    /// Median of the strictly off-diagonal affinity entries.
    pub fn off_diagonal_median(&self) -> Option<f64> {
        let m = self.norms.numel();
        let mut v: Vec<f64> = (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.affinity.at2(i, j))
            .collect();
        median(&mut v)
    }

    pub fn affinity_csv(&self) -> String {
        let m = self.norms.numel();
        let mut out = String::new();
        for i in 0..m {
            let row: Vec<String> = (0..m).map(|j| format!("{:.8}", self.affinity.at2(i, j))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn norms_csv(&self) -> String {
        let mut out = String::from("norm\n");
        for v in self.norms.data() {
            let _ = writeln!(out, "{v:.8}");
        }
        out
    }
}

/// Affinity (normalised-column Gram matrix) and column norms of a `C×M` classifier.
pub fn classifier_stats<T: Scalar>(weights: &Tensor<T>) -> Result<ClassifierStats> {
    let w: Tensor<f64> = weights.cast();
    let (_, m) = w.dims2("classifier_stats")?;
    let norms = w.norms_along(0)?;
    if let Some(j) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::degenerate("classifier_stats", format!("classifier column {j} is zero")));
    }
    let unit = w.l2_normalize(0)?;
    let mut affinity = unit.transpose()?.matmul(&unit)?;
    for i in 0..m {
        affinity.data_mut()[i * m + i] = 1.0;
    }
    Ok(ClassifierStats {
        affinity,
        norms: Tensor::new(vec![m], norms)?,
    })
}

pub(crate) fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn name(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleRecord {
    pub label: usize,
    pub sample: usize,
    pub polarity: Polarity,
    pub angle_deg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelAngles {
    pub label: usize,
    pub median_positive: f64,
    pub median_negative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleReport {
    pub labels: usize,
    pub records: Vec<AngleRecord>,
    pub per_label: Vec<LabelAngles>,
    /// Labels lacking positive or negative samples.
    pub skipped: Vec<usize>,
    pub median_positive: Option<f64>,
    pub median_negative: Option<f64>,
    /// `arccos(1/√M)`, the optimum for a single shared feature.
    pub shared_optimum_deg: f64,
}

impl AngleReport {
    pub fn angles(&self, polarity: Polarity) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.polarity == polarity)
            .map(|r| r.angle_deg)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label_index,sample_index,polarity,angle_deg\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{:.6}", r.label, r.sample, r.polarity.name(), r.angle_deg);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Angle between each sample's label feature and the label's classifier,
/// split by ground truth.
pub fn analyze_angles<N: MultiLabelNet<f32> + ?Sized>(net: &N, samples: &[LabeledSample]) -> Result<AngleReport> {
    let m = net.config().labels;
    if let Some(s) = samples.iter().find(|s| s.labels.len() != m) {
        return Err(Error::Validation(format!(
            "model has {m} labels, samples have {}",
            s.labels.len()
        )));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let (features, classifier) = net.label_features(&s.image)?;
        per_sample.push(feature_classifier_angles(&features, &classifier)?);
    }
    let mut records = Vec::new();
    let mut per_label = Vec::new();
    let mut skipped = Vec::new();
    for j in 0..m {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, (s, angles)) in samples.iter().zip(&per_sample).enumerate() {
            if s.labels[j] {
                pos.push((i, angles[j]));
            } else {
                neg.push((i, angles[j]));
            }
        }
        if pos.is_empty() || neg.is_empty() {
            warn!(
                "label {j} skipped in angle analysis: {} positive, {} negative samples",
                pos.len(),
                neg.len()
            );
            skipped.push(j);
            continue;
        }
        for (polarity, group) in [(Polarity::Positive, &pos), (Polarity::Negative, &neg)] {
            records.extend(group.iter().map(|&(sample, angle_deg)| AngleRecord {
                label: j,
                sample,
                polarity,
                angle_deg,
            }));
        }
        let mut pa: Vec<f64> = pos.iter().map(|p| p.1).collect();
        let mut na: Vec<f64> = neg.iter().map(|p| p.1).collect();
        per_label.push(LabelAngles {
            label: j,
            median_positive: median(&mut pa).expect("nonempty"),
            median_negative: median(&mut na).expect("nonempty"),
        });
    }
    let mut report = AngleReport {
        labels: m,
        records,
        per_label,
        skipped,
        median_positive: None,
        median_negative: None,
        shared_optimum_deg: optimal_angle_degrees(m),
    };
    report.median_positive = median(&mut report.angles(Polarity::Positive));
    report.median_negative = median(&mut report.angles(Polarity::Negative));
    Ok(report)
}
