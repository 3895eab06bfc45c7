//! Same-budget comparison of the two mechanisms and the blob-masking probe.

use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze_angles, AngleReport};
use crate::data::{mask_blob, LabeledSample};
use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::model::{Mechanism, MultiLabelNet};
use crate::tensor::Tensor;
use crate::train::{predict_samples, train_on, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismSummary {
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
    pub median_positive_angle: Option<f64>,
    pub median_negative_angle: Option<f64>,
}

impl MechanismSummary {
    pub fn new(report: &MetricsReport, angles: &AngleReport) -> Self {
        MechanismSummary {
            map: report.map.unwrap_or(0.0),
            cf1: report.all.cf1,
            of1: report.all.of1,
            median_positive_angle: angles.median_positive,
            median_negative_angle: angles.median_negative,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub ofml: MechanismSummary,
    pub dlfl: MechanismSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runs: Vec<SeedComparison>,
    /// Mean over seeds of `dlfl.map − ofml.map`.
    pub mean_map_margin: f64,
}

/// Trains both mechanisms from `template` (its `mechanism` and `seed` are
/// overridden) on the same data with the same budget, once per seed, and
/// scores each final model on `test`. With `out`, each run's checkpoints
/// land in `out/<mechanism>_seed<k>`.
pub fn compare_mechanisms(
    template: &TrainConfig,
    train: &[LabeledSample],
    test: &[LabeledSample],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Comparison> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut summaries = Vec::with_capacity(2);
        for mechanism in [Mechanism::Ofml, Mechanism::Dlfl] {
            let mut cfg = template.clone();
            cfg.mechanism = mechanism;
            cfg.seed = seed;
            let dir = out.map(|o| o.join(format!("{mechanism}_seed{seed}")));
            let started = Instant::now();
            let outcome = train_on(&cfg, train, test, dir.as_deref())?;
            let angles = analyze_angles(&outcome.model, test)?;
            info!(
                "{mechanism} seed {seed}: test mAP {:.4} in {:.1}s",
                outcome.final_report.map.unwrap_or(0.0),
                started.elapsed().as_secs_f64()
            );
            summaries.push(MechanismSummary::new(&outcome.final_report, &angles));
        }
        let dlfl = summaries.pop().expect("two runs");
        let ofml = summaries.pop().expect("two runs");
        runs.push(SeedComparison { seed, ofml, dlfl });
    }
    let mean_map_margin =
        runs.iter().map(|r| r.dlfl.map - r.ofml.map).sum::<f64>() / runs.len().max(1) as f64;
    Ok(Comparison { runs, mean_map_margin })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingReport {
    /// Positive (sample, label) pairs probed.
    pub positives: usize,
    /// Pairs where masking the label's blob lowered its probability more
    /// than any other label's.
    pub localized: usize,
    pub rate: f64,
}

/// Replaces each positive label's blob with background noise and checks
/// that the label's own probability drops the most.
pub fn masking_localization<N: MultiLabelNet<f32> + ?Sized>(
    net: &N,
    samples: &[LabeledSample],
    noise_std: f64,
    seed: u64,
) -> Result<MaskingReport> {
    let m = net.config().labels;
    let base = predict_samples(net, samples)?;
    let mut probes: Vec<(usize, usize)> = Vec::new();
    let mut masked: Vec<LabeledSample> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for p in &s.placements {
            let image = mask_blob(s, p.label, noise_std, seed ^ ((i as u64) << 8 | p.label as u64))
                .expect("placement exists");
            probes.push((i, p.label));
            masked.push(LabeledSample {
                image,
                labels: s.labels.clone(),
                placements: Vec::new(),
            });
        }
    }
    let after: Tensor<f32> = if masked.is_empty() {
        Tensor::zeros(vec![1, m])
    } else {
        predict_samples(net, &masked)?
    };
    let mut localized = 0;
    for (row, &(i, j)) in probes.iter().enumerate() {
        let drop = |k: usize| base.at2(i, k) as f64 - after.at2(row, k) as f64;
        let own = drop(j);
        if (0..m).filter(|&k| k != j).all(|k| own > drop(k)) {
            localized += 1;
        }
    }
    let positives = probes.len();
    Ok(MaskingReport {
        positives,
        localized,
        rate: if positives == 0 { 0.0 } else { localized as f64 / positives as f64 },
    })
}
