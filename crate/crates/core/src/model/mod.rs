//! Multi-label classifiers built on a shared patch-embedding backbone.
//!
//! [`DlflModel`] extracts one feature per label with cascaded semantic spatial
//! cross-attention; [`OfmlModel`] pools a single shared feature. Both expose
//! the same [`MultiLabelNet`] surface so training and evaluation treat them
//! identically.

mod backbone;
pub mod checkpoint;
mod dlfl;
mod ofml;
mod ssca;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use backbone::{patchify, Backbone, FeatureMap};
pub use dlfl::{dlfl_loss_value, DlflModel, DlflTrace, SscaStage};
pub use ofml::{feature_classifier_angles, OfmlModel, OfmlOutput};
pub use ssca::{cosine_logits, cosine_logits_var, ssca_forward, ssca_forward_var};

/// How a label feature meets its classifier column.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierMode {
    /// `γ·cos∠(feature, w_j)`; both sides L2-normalised in the forward pass.
    #[default]
    Cosine,
    /// Plain inner product `w_jᵀ·feature`.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Ofml,
    Dlfl,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Ofml => "ofml",
            Mechanism::Dlfl => "dlfl",
        })
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ofml" => Ok(Mechanism::Ofml),
            "dlfl" => Ok(Mechanism::Dlfl),
            other => Err(Error::Validation(format!(
                "unknown mechanism {other:?} (expected ofml or dlfl)"
            ))),
        }
    }
}

fn default_stages() -> usize {
    1
}

fn default_gamma() -> f64 {
    30.0
}

/// Architecture hyperparameters shared by both mechanisms.
///
/// Serialised with the single-letter keys used in checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SscaConfig {
    /// Feature-map channel width.
    #[serde(rename = "C")]
    pub channels: usize,
    /// Number of labels.
    #[serde(rename = "M")]
    pub labels: usize,
    /// Cascaded attention stages.
    #[serde(rename = "S", default = "default_stages")]
    pub stages: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Width of the query/key embeddings; must equal `channels` when `stages > 1`.
    pub embed_dim: usize,
    pub patch: usize,
    #[serde(rename = "C_in")]
    pub in_channels: usize,
    #[serde(default)]
    pub classifier: ClassifierMode,
}

impl SscaConfig {
    /// Config with `embed_dim = channels`, one stage and γ = 30.
    pub fn new(channels: usize, labels: usize, patch: usize, in_channels: usize) -> Self {
        SscaConfig {
            channels,
            labels,
            stages: 1,
            gamma: default_gamma(),
            embed_dim: channels,
            patch,
            in_channels,
            classifier: ClassifierMode::Cosine,
        }
    }

    pub fn with_stages(mut self, stages: usize) -> Self {
        self.stages = stages;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("C", self.channels),
            ("M", self.labels),
            ("S", self.stages),
            ("embed_dim", self.embed_dim),
            ("patch", self.patch),
            ("C_in", self.in_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.stages > 1 && self.embed_dim != self.channels {
            return Err(Error::Config(format!(
                "cascading {} stages feeds label features back as queries, so embed_dim ({}) must equal C ({})",
                self.stages, self.embed_dim, self.channels
            )));
        }
        Ok(())
    }
}

/// Ordered, named access to trainable tensors.
pub trait Parameterized<T: Scalar> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)>;

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Common surface of both mechanisms.
pub trait MultiLabelNet<T: Scalar>: Parameterized<T> {
    fn config(&self) -> &SscaConfig;

    fn mechanism(&self) -> Mechanism;

    /// Per-stage logits, each `N×M`, for a batch of images. `params` must be
    /// this model's parameters bound on `tape` in [`Parameterized::named_params`] order.
    fn stage_logits<'t>(
        &self,
        tape: &'t Tape<T>,
        params: &[Var<'t, T>],
        images: &[&Tensor<T>],
    ) -> Result<Vec<Var<'t, T>>>;

    /// Per-label feature columns (`D×M`) and the classifier (`D×M`) they are
    /// scored against. The pooled baseline repeats its shared feature per label.
    fn label_features(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)>;
}

/// Places every parameter on `tape` as a leaf, in `named_params` order.
pub fn bind<'t, T: Scalar, N: Parameterized<T> + ?Sized>(
    tape: &'t Tape<T>,
    net: &N,
    trainable: bool,
) -> Vec<Var<'t, T>> {
    net.named_params()
        .into_iter()
        .map(|(_, t)| tape.leaf(t.clone(), trainable))
        .collect()
}

/// Summed BCE over stages for one batch: the training objective.
pub fn batch_loss<'t, T: Scalar, N: MultiLabelNet<T> + ?Sized>(
    net: &N,
    tape: &'t Tape<T>,
    params: &[Var<'t, T>],
    images: &[&Tensor<T>],
    targets: &Tensor<T>,
) -> Result<Var<'t, T>> {
    let stages = net.stage_logits(tape, params, images)?;
    stage_loss(&stages, targets)
}

/// `Σ_s BCE(logits_s, targets)` on the tape.
pub fn stage_loss<'t, T: Scalar>(stage_logits: &[Var<'t, T>], targets: &Tensor<T>) -> Result<Var<'t, T>> {
    let (first, rest) = stage_logits
        .split_first()
        .ok_or_else(|| Error::Validation("no stage logits to score".into()))?;
    let mut total = first.bce_with_logits(targets)?;
    for z in rest {
        total = total.add(z.bce_with_logits(targets)?)?;
    }
    Ok(total)
}

/// Stage-averaged logits (`N×M`) without recording gradients.
pub fn averaged_logits<T: Scalar, N: MultiLabelNet<T> + ?Sized>(
    net: &N,
    images: &[&Tensor<T>],
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let params = bind(&tape, net, false);
    let stages = net.stage_logits(&tape, &params, images)?;
    let values: Vec<Tensor<T>> = stages.iter().map(|v| v.value().clone()).collect();
    let n = values.len() as f64;
    let mut acc = values[0].to_f64_vec();
    for v in &values[1..] {
        for (a, b) in acc.iter_mut().zip(v.data()) {
            *a += b.widen();
        }
    }
    let mean: Vec<f64> = acc.iter().map(|v| v / n).collect();
    Tensor::from_f64(values[0].shape().to_vec(), &mean)
}

/// `σ(mean over stages of logits)`, `N×M`.
pub fn predict_proba<T: Scalar, N: MultiLabelNet<T> + ?Sized>(
    net: &N,
    images: &[&Tensor<T>],
) -> Result<Tensor<T>> {
    Ok(averaged_logits(net, images)?.sigmoid())
}

/// Either mechanism behind one type, as stored in checkpoints.
#[derive(Clone, Debug)]
pub enum Model<T> {
    Ofml(OfmlModel<T>),
    Dlfl(DlflModel<T>),
}

impl<T: Scalar> Model<T> {
    pub fn init(mechanism: Mechanism, config: SscaConfig, seed: u64) -> Result<Self> {
        Ok(match mechanism {
            Mechanism::Ofml => Model::Ofml(OfmlModel::init(config, seed)?),
            Mechanism::Dlfl => Model::Dlfl(DlflModel::init(config, seed)?),
        })
    }

    pub fn as_net(&self) -> &dyn MultiLabelNet<T> {
        match self {
            Model::Ofml(m) => m,
            Model::Dlfl(m) => m,
        }
    }

    /// Whether a parameter name belongs to the backbone.
    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with("backbone.")
    }
}

impl<T: Scalar> Parameterized<T> for Model<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Model::Ofml(m) => m.named_params(),
            Model::Dlfl(m) => m.named_params(),
        }
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        match self {
            Model::Ofml(m) => m.named_params_mut(),
            Model::Dlfl(m) => m.named_params_mut(),
        }
    }
}

impl<T: Scalar> MultiLabelNet<T> for Model<T> {
    fn config(&self) -> &SscaConfig {
        self.as_net().config()
    }

    fn mechanism(&self) -> Mechanism {
        self.as_net().mechanism()
    }

    fn stage_logits<'t>(
        &self,
        tape: &'t Tape<T>,
        params: &[Var<'t, T>],
        images: &[&Tensor<T>],
    ) -> Result<Vec<Var<'t, T>>> {
        self.as_net().stage_logits(tape, params, images)
    }

    fn label_features(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.as_net().label_features(image)
    }
}

/// Deterministic Kaiming-normal initialiser: N(0, √(2/fan_in)).
pub(crate) struct KaimingInit {
    rng: ChaCha8Rng,
}

impl KaimingInit {
    pub(crate) fn new(seed: u64) -> Self {
        KaimingInit {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize, fan_in: usize) -> Tensor<T> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Tensor::from_fn(vec![rows, cols], |_| T::from_f64_lossy(normal.sample(&mut self.rng)))
    }
}

pub(crate) fn expect_params(count: usize, params: &[impl Sized], mechanism: Mechanism) -> Result<()> {
    if params.len() == count {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "{mechanism} model expects {count} bound parameters, got {}",
            params.len()
        )))
    }
}
