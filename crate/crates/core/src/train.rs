//! SGD with momentum and weight decay, a plateau learning-rate scheduler and
//! the training loop shared by both mechanisms.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{self, label_matrix, LabeledSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport, PredictionSet};
use crate::model::{batch_loss, bind, checkpoint, predict_proba, Mechanism, Model, MultiLabelNet, Parameterized, SscaConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BEST_DIR: &str = "best";
pub const FINAL_DIR: &str = "final";
pub const LOG_FILE: &str = "train_log.csv";

/// Quantity the plateau scheduler watches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    TrainLoss,
    ValLoss,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchedulerConfig {
    None,
    Plateau {
        factor: f64,
        patience: usize,
        #[serde(default)]
        monitor: Monitor,
    },
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig::Plateau {
            factor: 0.1,
            patience: 4,
            monitor: Monitor::TrainLoss,
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_top_k() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mechanism: Mechanism,
    pub model: SscaConfig,
    pub lr: f64,
    /// Learning rate for `backbone.*` parameters; defaults to `lr`.
    #[serde(default)]
    pub backbone_lr: Option<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    #[serde(default)]
    pub hflip: bool,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, lr) in [("lr", Some(self.lr)), ("backbone_lr", self.backbone_lr)] {
            if let Some(lr) = lr {
                if !(lr > 0.0 && lr.is_finite()) {
                    return bad(format!("{name} must be positive, got {lr}"));
                }
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be ≥ 1".into());
        }
        if let SchedulerConfig::Plateau { factor, .. } = self.scheduler {
            if !(factor > 0.0 && factor < 1.0) {
                return bad(format!("plateau factor must lie in (0, 1), got {factor}"));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Momentum SGD with coupled weight decay:
/// `v ← μv + (g + λp)`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// One update of every parameter; `lrs[i]` is the rate for parameter `i`.
    pub fn step<T: Scalar>(
        &mut self,
        params: Vec<(String, &mut Tensor<T>)>,
        grads: &[Tensor<T>],
        lrs: &[f64],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != lrs.len() {
            return Err(Error::Validation(format!(
                "{} parameters, {} gradients, {} learning rates",
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("parameter {name} is {:?}, gradient is {:?}", p.shape(), g.shape()),
                ));
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("gradient of parameter {name}"),
                });
            }
        }
        for ((((_, p), g), v), &lr) in params.into_iter().zip(grads).zip(&mut self.velocity).zip(lrs) {
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let w = pi.widen();
                *vi = self.momentum * *vi + gi.widen() + self.weight_decay * w;
                *pi = T::from_f64_lossy(w - lr * *vi);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// gone `patience` consecutive epochs without a strict improvement; the
/// stall count restarts after every reduction.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    stall: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            best: None,
            stall: 0,
        }
    }

    /// Records one epoch's loss and returns the learning-rate multiplier.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.stall = 0;
            return 1.0;
        }
        self.stall += 1;
        if self.stall >= self.patience {
            self.stall = 0;
            self.factor
        } else {
            1.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_map: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Entry 0 describes the untrained model.
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub final_report: MetricsReport,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.log[0].train_loss
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_map,lr\n");
    for e in log {
        let _ = writeln!(out, "{},{:.8},{:.8},{:e}", e.epoch, e.train_loss, e.val_map, e.lr);
    }
    out
}

const EVAL_BATCH: usize = 100;

/// Probabilities (`N×M`) and mean summed-stage BCE over `samples`.
pub fn score_samples<N: MultiLabelNet<f32> + ?Sized>(net: &N, samples: &[LabeledSample]) -> Result<(Tensor<f32>, f64)> {
    let m = net.config().labels;
    let mut probs = Vec::with_capacity(samples.len() * m);
    let mut loss = 0.0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let tape = Tape::new();
        let params = bind(&tape, net, false);
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let targets = label_matrix(chunk)?;
        let stages = net.stage_logits(&tape, &params, &images)?;
        let mut avg = vec![0.0f64; chunk.len() * m];
        for z in &stages {
            loss += crate::autodiff::bce_with_logits_value(&z.value(), &targets)? * chunk.len() as f64;
            for (a, v) in avg.iter_mut().zip(z.value().data()) {
                *a += *v as f64 / stages.len() as f64;
            }
        }
        probs.extend(avg.into_iter().map(|z| crate::tensor::sigmoid(z) as f32));
    }
    let n = samples.len().max(1) as f64;
    Ok((Tensor::new(vec![samples.len(), m], probs)?, loss / n))
}

/// Probabilities for `samples`, `N×M`.
pub fn predict_samples<N: MultiLabelNet<f32> + ?Sized>(net: &N, samples: &[LabeledSample]) -> Result<Tensor<f32>> {
    let mut rows = Vec::new();
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        rows.extend(predict_proba(net, &images)?.into_data());
    }
    Tensor::new(vec![samples.len(), net.config().labels], rows)
}

pub fn evaluate_model<N: MultiLabelNet<f32> + ?Sized>(
    net: &N,
    samples: &[LabeledSample],
    top_k: usize,
) -> Result<MetricsReport> {
    let probs = predict_samples(net, samples)?;
    evaluate(&PredictionSet::from_tensors(&probs, &label_matrix(samples)?)?, top_k)
}

fn report_for(probs: &Tensor<f32>, samples: &[LabeledSample], top_k: usize) -> Result<MetricsReport> {
    evaluate(&PredictionSet::from_tensors(probs, &label_matrix(samples)?)?, top_k)
}

/// Mirrors a `C×H×W` image left to right.
pub fn hflip(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("hflip", format!("expected C×H×W, got {:?}", image.shape())));
    };
    let src = image.data();
    Tensor::new(
        vec![c, h, w],
        (0..c * h * w).map(|k| src[k - k % w + (w - 1 - k % w)]).collect(),
    )
}

/// Deterministic sample order for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

fn check_dataset(config: &TrainConfig, spec: &data::GenSpec) -> Result<()> {
    if spec.labels != config.model.labels {
        return Err(Error::Validation(format!(
            "dataset has M = {} labels, model config has M = {}",
            spec.labels, config.model.labels
        )));
    }
    if spec.in_channels != config.model.in_channels {
        return Err(Error::Validation(format!(
            "dataset has C_in = {}, model config has C_in = {}",
            spec.in_channels, config.model.in_channels
        )));
    }
    Ok(())
}

/// Trains on in-memory splits; `out`, when given, receives checkpoints and the log.
pub fn train_on(
    config: &TrainConfig,
    train: &[LabeledSample],
    val: &[LabeledSample],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    if let Some(s) = train.iter().chain(val).find(|s| s.labels.len() != config.model.labels) {
        return Err(Error::Validation(format!(
            "samples have {} labels, model config has M = {}",
            s.labels.len(),
            config.model.labels
        )));
    }
    let mut model = Model::<f32>::init(config.mechanism, config.model.clone(), config.seed)?;
    let lr_scale: Vec<f64> = model
        .named_params()
        .iter()
        .map(|(name, _)| match config.backbone_lr {
            Some(b) if Model::<f32>::is_backbone_param(name) => b / config.lr,
            _ => 1.0,
        })
        .collect();
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut scheduler = match config.scheduler {
        SchedulerConfig::Plateau { factor, patience, monitor } => Some((PlateauScheduler::new(factor, patience), monitor)),
        SchedulerConfig::None => None,
    };
    let mut lr = config.lr;
    let eval_set = if val.is_empty() { train } else { val };

    let (_, initial_loss) = score_samples(&model, train)?;
    let (probs, val_loss) = score_samples(&model, eval_set)?;
    let initial = report_for(&probs, eval_set, config.top_k)?;
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: initial_loss,
        val_loss,
        val_map: initial.map.unwrap_or(0.0),
        lr,
    }];
    info!(
        "{} epoch 0: loss {initial_loss:.5}, val mAP {:.4}",
        config.mechanism,
        log[0].val_map
    );
    let mut best_map = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut final_report = initial;

    for epoch in 1..=config.epochs {
        let order = epoch_order(config.seed, epoch, train.len());
        let mut flip_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        flip_rng.set_stream(epoch as u64);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let samples: Vec<&LabeledSample> = batch.iter().map(|&i| &train[i]).collect();
            let flipped: Vec<Option<Tensor<f32>>> = samples
                .iter()
                .map(|s| {
                    if config.hflip && flip_rng.random::<bool>() {
                        hflip(&s.image).map(Some)
                    } else {
                        Ok(None)
                    }
                })
                .collect::<Result<_>>()?;
            let images: Vec<&Tensor<f32>> = samples
                .iter()
                .zip(&flipped)
                .map(|(s, f)| f.as_ref().unwrap_or(&s.image))
                .collect();
            let owned: Vec<LabeledSample> = samples.iter().map(|s| (*s).clone()).collect();
            let targets = label_matrix(&owned)?;
            let grads = {
                let tape = Tape::new();
                let params = bind(&tape, &model, true);
                let loss = batch_loss(&model, &tape, &params, &images, &targets)?;
                total += loss.value().item()?.widen() * batch.len() as f64;
                let mut g = tape.backward(loss)?;
                params.iter().map(|&p| g.take(p)).collect::<Vec<_>>()
            };
            let lrs: Vec<f64> = lr_scale.iter().map(|s| s * lr).collect();
            sgd.step(model.named_params_mut(), &grads, &lrs)?;
        }
        let train_loss = total / train.len() as f64;
        let (probs, val_loss) = score_samples(&model, eval_set)?;
        let report = report_for(&probs, eval_set, config.top_k)?;
        let val_map = report.map.unwrap_or(0.0);
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_map,
            lr,
        });
        info!("{} epoch {epoch}: loss {train_loss:.5}, val mAP {val_map:.4}, lr {lr:e}", config.mechanism);
        if val_map > best_map {
            best_map = val_map;
            best_epoch = epoch;
            if let Some(dir) = out {
                checkpoint::save(&model, &dir.join(BEST_DIR))?;
            }
        }
        final_report = report;
        if let Some((sched, monitor)) = scheduler.as_mut() {
            let watched = match monitor {
                Monitor::TrainLoss => train_loss,
                Monitor::ValLoss => val_loss,
            };
            let mult = sched.observe(watched);
            if mult != 1.0 {
                lr *= mult;
                debug!("plateau: learning rate reduced to {lr:e}");
            }
        }
    }
    if let Some(dir) = out {
        checkpoint::save(&model, &dir.join(FINAL_DIR))?;
        let path = dir.join(LOG_FILE);
        fs::write(&path, log_csv(&log)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        final_report,
    })
}

/// Loads the dataset named in `config`, trains, and writes checkpoints and
/// the epoch log under `config.checkpoint`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let ds = data::load(&config.dataset)?;
    check_dataset(config, &ds.spec)?;
    fs::create_dir_all(&config.checkpoint).map_err(|e| Error::io(&config.checkpoint, e))?;
    train_on(config, &ds.train, &ds.test, Some(&config.checkpoint))
}
