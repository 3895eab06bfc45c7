use crate::autodiff::{bce_with_logits_value, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::backbone::{forward_var, Backbone, FeatureMap};
use super::ssca::{attend, head_var};
use super::{expect_params, ClassifierMode, KaimingInit, Mechanism, MultiLabelNet, Parameterized, SscaConfig};

/// Parameters of one cascade stage. Stages share nothing.
#[derive(Clone, Debug)]
pub struct SscaStage<T> {
    /// `E×C` query embedding.
    pub theta: Tensor<T>,
    /// `E×C` key/value embedding.
    pub phi: Tensor<T>,
    /// `E×M`, one column per label.
    pub classifier: Tensor<T>,
}

/// Learnable semantic queries, `S` cascaded attention stages and a
/// per-stage cosine classifier on top of the patch backbone.
#[derive(Clone, Debug)]
pub struct DlflModel<T> {
    config: SscaConfig,
    pub backbone: Backbone<T>,
    /// `C×M`, shared by every image.
    pub queries: Tensor<T>,
    pub stages: Vec<SscaStage<T>>,
}

/// Intermediate values of one image's forward pass.
#[derive(Clone, Debug)]
pub struct DlflTrace<T> {
    pub feature_map: FeatureMap<T>,
    /// Queries fed into each stage (`C×M`); entry 0 is the learned `Q⁰`.
    pub queries: Vec<Tensor<T>>,
    /// Attention map per stage, `M×HW`.
    pub attention: Vec<Tensor<T>>,
    /// Label features per stage, `E×M`.
    pub label_features: Vec<Tensor<T>>,
    /// Logits per stage, length `M`.
    pub logits: Vec<Tensor<T>>,
}

impl<T: Scalar> DlflModel<T> {
    pub fn init(config: SscaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = KaimingInit::new(seed);
        let (c, m, e) = (config.channels, config.labels, config.embed_dim);
        let backbone = Backbone::init(c, config.patch, config.in_channels, &mut init);
        let queries = init.matrix(c, m, c);
        let stages = (0..config.stages)
            .map(|_| SscaStage {
                theta: init.matrix(e, c, c),
                phi: init.matrix(e, c, c),
                classifier: init.matrix(e, m, e),
            })
            .collect();
        Ok(DlflModel {
            config,
            backbone,
            queries,
            stages,
        })
    }

    /// Full forward pass of one image, keeping every intermediate.
    pub fn trace(&self, image: &Tensor<T>) -> Result<DlflTrace<T>> {
        let tape = Tape::new();
        let params = super::bind(&tape, self, false);
        let f = forward_var(&tape, params[0], params[1], image, self.backbone.patch)?;
        let mut query = params[2];
        let mut trace = DlflTrace {
            feature_map: FeatureMap::new(f.value().clone())?,
            queries: Vec::new(),
            attention: Vec::new(),
            label_features: Vec::new(),
            logits: Vec::new(),
        };
        for s in 0..self.stages.len() {
            let [theta, phi, cls] = stage_params(&params, s);
            let w = self.prepare_classifier(cls)?;
            let (a, fs) = attend(theta.matmul(query)?, phi, f)?;
            let z = head_var(fs, w, self.config.classifier, self.config.gamma)?;
            trace.queries.push(query.value().clone());
            trace.attention.push(a.value().clone());
            trace.label_features.push(fs.value().clone());
            trace.logits.push(z.value().clone());
            query = fs;
        }
        Ok(trace)
    }

    /// Label features of every stage for one image.
    pub fn cascade_forward(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.trace(image)?.label_features)
    }

    fn prepare_classifier<'t>(&self, cls: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.config.classifier {
            ClassifierMode::Cosine => cls.l2_normalize(0),
            ClassifierMode::Raw => Ok(cls),
        }
    }
}

fn stage_params<'t, T>(params: &[Var<'t, T>], s: usize) -> [Var<'t, T>; 3] {
    let base = 3 + 3 * s;
    [params[base], params[base + 1], params[base + 2]]
}

impl<T: Scalar> Parameterized<T> for DlflModel<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("backbone.proj".to_string(), &self.backbone.proj),
            ("backbone.bias".to_string(), &self.backbone.bias),
            ("queries".to_string(), &self.queries),
        ];
        for (s, st) in self.stages.iter().enumerate() {
            out.push((format!("stage{s}.theta"), &st.theta));
            out.push((format!("stage{s}.phi"), &st.phi));
            out.push((format!("stage{s}.classifier"), &st.classifier));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("backbone.proj".to_string(), &mut self.backbone.proj),
            ("backbone.bias".to_string(), &mut self.backbone.bias),
            ("queries".to_string(), &mut self.queries),
        ];
        for (s, st) in self.stages.iter_mut().enumerate() {
            out.push((format!("stage{s}.theta"), &mut st.theta));
            out.push((format!("stage{s}.phi"), &mut st.phi));
            out.push((format!("stage{s}.classifier"), &mut st.classifier));
        }
        out
    }
}

impl<T: Scalar> MultiLabelNet<T> for DlflModel<T> {
    fn config(&self) -> &SscaConfig {
        &self.config
    }

    fn mechanism(&self) -> Mechanism {
        Mechanism::Dlfl
    }

    fn stage_logits<'t>(
        &self,
        tape: &'t Tape<T>,
        params: &[Var<'t, T>],
        images: &[&Tensor<T>],
    ) -> Result<Vec<Var<'t, T>>> {
        let stages = self.stages.len();
        expect_params(3 + 3 * stages, params, Mechanism::Dlfl)?;
        let classifiers = (0..stages)
            .map(|s| self.prepare_classifier(stage_params(params, s)[2]))
            .collect::<Result<Vec<_>>>()?;
        // Q⁰ is shared by the batch, so its projection is computed once.
        let first_queries = stage_params(params, 0)[0].matmul(params[2])?;

        let mut per_stage: Vec<Vec<Var<'t, T>>> = vec![Vec::with_capacity(images.len()); stages];
        for image in images {
            let f = forward_var(tape, params[0], params[1], image, self.backbone.patch)?;
            let mut projected = first_queries;
            for (s, logits) in per_stage.iter_mut().enumerate() {
                let phi = stage_params(params, s)[1];
                let (_, fs) = attend(projected, phi, f)?;
                logits.push(head_var(fs, classifiers[s], self.config.classifier, self.config.gamma)?);
                if s + 1 < stages {
                    projected = stage_params(params, s + 1)[0].matmul(fs)?;
                }
            }
        }
        per_stage.iter().map(|zs| tape.stack(zs)).collect()
    }

    fn label_features(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut trace = self.trace(image)?;
        let features = trace.label_features.pop().expect("at least one stage");
        let classifier = self.stages.last().expect("at least one stage").classifier.clone();
        Ok((features, classifier))
    }
}

/// `Σ_s BCE(logits_s, targets)` evaluated directly.
pub fn dlfl_loss_value<T: Scalar>(stage_logits: &[Tensor<T>], targets: &Tensor<T>) -> Result<f64> {
    stage_logits
        .iter()
        .map(|z| bce_with_logits_value(z, targets))
        .sum()
}
