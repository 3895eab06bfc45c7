use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::backbone::{forward_var, Backbone};
use super::{expect_params, ClassifierMode, KaimingInit, Mechanism, MultiLabelNet, Parameterized, SscaConfig};

/// Pooled-feature baseline: one globally averaged feature scored by `M` classifiers.
#[derive(Clone, Debug)]
pub struct OfmlModel<T> {
    config: SscaConfig,
    pub backbone: Backbone<T>,
    /// `C×M`.
    pub classifier: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct OfmlOutput<T> {
    /// Spatial mean of the feature map, length `C`.
    pub pooled: Tensor<T>,
    /// Length `M`.
    pub logits: Tensor<T>,
}

impl<T: Scalar> OfmlModel<T> {
    /// Uses `channels`, `labels`, `gamma`, `patch`, `in_channels` and
    /// `classifier` from `config`; the attention fields are ignored.
    pub fn init(config: SscaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = KaimingInit::new(seed);
        let c = config.channels;
        let backbone = Backbone::init(c, config.patch, config.in_channels, &mut init);
        let classifier = init.matrix(c, config.labels, c);
        Ok(OfmlModel {
            config,
            backbone,
            classifier,
        })
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<OfmlOutput<T>> {
        let tape = Tape::new();
        let params = super::bind(&tape, self, false);
        let w = self.prepare_classifier(params[2])?;
        let (pooled, logits) = self.head(&tape, params[0], params[1], w, image)?;
        let out = OfmlOutput {
            pooled: pooled.value().clone(),
            logits: logits.value().clone(),
        };
        Ok(out)
    }

    fn prepare_classifier<'t>(&self, w: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.config.classifier {
            ClassifierMode::Cosine => w.l2_normalize(0),
            ClassifierMode::Raw => Ok(w),
        }
    }

    fn head<'t>(
        &self,
        tape: &'t Tape<T>,
        proj: Var<'t, T>,
        bias: Var<'t, T>,
        classifier: Var<'t, T>,
        image: &Tensor<T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let c = self.config.channels;
        let pooled = forward_var(tape, proj, bias, image, self.backbone.patch)?.mean_axis(1)?;
        let row = match self.config.classifier {
            ClassifierMode::Cosine => {
                if pooled.value().norm() == 0.0 {
                    return Err(Error::degenerate(
                        "ofml_forward",
                        "pooled feature is zero; cosine logits undefined",
                    ));
                }
                pooled.l2_normalize(0)?.reshape(vec![1, c])?
            }
            ClassifierMode::Raw => pooled.reshape(vec![1, c])?,
        };
        let mut logits = row.matmul(classifier)?.reshape(vec![self.config.labels])?;
        if self.config.classifier == ClassifierMode::Cosine {
            logits = logits.scale(self.config.gamma)?;
        }
        Ok((pooled, logits))
    }
}

impl<T: Scalar> Parameterized<T> for OfmlModel<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("backbone.proj".to_string(), &self.backbone.proj),
            ("backbone.bias".to_string(), &self.backbone.bias),
            ("classifier".to_string(), &self.classifier),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("backbone.proj".to_string(), &mut self.backbone.proj),
            ("backbone.bias".to_string(), &mut self.backbone.bias),
            ("classifier".to_string(), &mut self.classifier),
        ]
    }
}

impl<T: Scalar> MultiLabelNet<T> for OfmlModel<T> {
    fn config(&self) -> &SscaConfig {
        &self.config
    }

    fn mechanism(&self) -> Mechanism {
        Mechanism::Ofml
    }

    fn stage_logits<'t>(
        &self,
        tape: &'t Tape<T>,
        params: &[Var<'t, T>],
        images: &[&Tensor<T>],
    ) -> Result<Vec<Var<'t, T>>> {
        expect_params(3, params, Mechanism::Ofml)?;
        let w = self.prepare_classifier(params[2])?;
        let rows = images
            .iter()
            .map(|img| Ok(self.head(tape, params[0], params[1], w, img)?.1))
            .collect::<Result<Vec<_>>>()?;
        Ok(vec![tape.stack(&rows)?])
    }

    fn label_features(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let pooled = self.forward(image)?.pooled;
        let c = pooled.numel();
        let m = self.config.labels;
        let repeated = Tensor::from_fn(vec![c, m], |k| pooled.data()[k / m]);
        Ok((repeated, self.classifier.clone()))
    }
}

/// Angle in degrees between each label feature and its classifier column.
///
/// `features` is either one shared vector (`D`) or one column per label
/// (`D×M`); `classifiers` is `D×M`. Result is in `[0°, 180°]`.
pub fn feature_classifier_angles<T: Scalar>(features: &Tensor<T>, classifiers: &Tensor<T>) -> Result<Vec<f64>> {
    let (d, m) = classifiers.dims2("feature_classifier_angles")?;
    let column = |j: usize| -> Vec<f64> {
        match features.rank() {
            1 => features.to_f64_vec(),
            _ => (0..d).map(|i| features.at2(i, j).widen()).collect(),
        }
    };
    let shared = features.shape() == [d];
    if !shared && features.shape() != [d, m] {
        return Err(Error::shape(
            "feature_classifier_angles",
            format!("features {:?} vs classifiers {:?}", features.shape(), classifiers.shape()),
        ));
    }
    (0..m)
        .map(|j| {
            let f = column(j);
            let w: Vec<f64> = (0..d).map(|i| classifiers.at2(i, j).widen()).collect();
            let nf = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nf == 0.0 || nw == 0.0 {
                return Err(Error::degenerate(
                    "feature_classifier_angles",
                    format!("zero vector for label {j}"),
                ));
            }
            let cos = f.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / (nf * nw);
            Ok(cos.clamp(-1.0, 1.0).acos().to_degrees())
        })
        .collect()
}
