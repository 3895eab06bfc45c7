//! Analytic tape gradients against central finite differences.
//!
//! In 32-bit mode the analytic side runs on an `f32` tape and the difference
//! quotient is taken on the `f64` instantiation of the same graph, at the same
//! `f32`-representable inputs, so rounding in the quotient stays far below the
//! tolerance.

use dlfl::model::{batch_loss, patchify, DlflModel, Parameterized, SscaConfig};
use dlfl::{Result, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build<T> = for<'t> fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>;
pub type Maker = fn(&mut ChaCha8Rng) -> Vec<Tensor<f32>>;

pub const TOL_F32: f64 = 1e-3;
pub const EPS_F32: f64 = 1e-3;
pub const TOL_F64: f64 = 1e-6;
pub const EPS_F64: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-8)
}

/// Whole-tensor relative error `‖a − n‖ / (‖a‖ + 1e-8)`.
pub fn tensor_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (norm + 1e-8)
}

/// `Σ r ⊙ out` with a fixed random weighting `r`.
fn scalarize<'t, T: Scalar>(tape: &'t Tape<T>, out: Var<'t, T>, weights: &[f64]) -> Result<Var<'t, T>> {
    let r = tape.constant(Tensor::from_f64(out.shape(), weights)?);
    out.mul(r)?.sum()
}

fn eval64(build: Build<f64>, inputs: &[Tensor<f64>], weights: &[f64]) -> f64 {
    let tape = Tape::new();
    let xs: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = scalarize(&tape, build(&tape, &xs).unwrap(), weights).unwrap();
    let v = loss.value().item().unwrap();
    v
}

fn central(build: Build<f64>, inputs: &[Tensor<f64>], weights: &[f64], i: usize, k: usize, eps: f64) -> f64 {
    let mut plus = inputs.to_vec();
    plus[i].data_mut()[k] += eps;
    let mut minus = inputs.to_vec();
    minus[i].data_mut()[k] -= eps;
    (eval64(build, &plus, weights) - eval64(build, &minus, weights)) / (2.0 * eps)
}

/// Central difference with one Richardson step, cancelling the ε² term.
fn richardson(build: Build<f64>, inputs: &[Tensor<f64>], weights: &[f64], i: usize, k: usize, eps: f64) -> f64 {
    let coarse = central(build, inputs, weights, i, k, eps);
    let fine = central(build, inputs, weights, i, k, eps / 2.0);
    (4.0 * fine - coarse) / 3.0
}

fn output_len<T: Scalar>(build: Build<T>, inputs: &[Tensor<T>]) -> usize {
    let tape = Tape::new();
    let xs: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let n = build(&tape, &xs).unwrap().value().numel();
    n
}

fn analytic<T: Scalar>(build: Build<T>, inputs: &[Tensor<T>], weights: &[f64]) -> Vec<Vec<f64>> {
    let tape = Tape::new();
    let xs: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = scalarize(&tape, build(&tape, &xs).unwrap(), weights).unwrap();
    let grads = tape.backward(loss).unwrap();
    xs.iter().map(|x| grads.get(*x).to_f64_vec()).collect()
}

pub fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0f32))
}

/// Keeps values at least `gap` away from zero, for ops with a kink there.
pub fn away_from_zero(shape: Vec<usize>, gap: f32, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| {
        let v: f32 = rng.random_range(gap..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

fn one(rng: &mut ChaCha8Rng) -> Vec<Tensor<f32>> {
    vec![random(vec![dim(rng), dim(rng)], rng)]
}

fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor<f32>> {
    let s = vec![dim(rng), dim(rng)];
    vec![random(s.clone(), rng), random(s, rng)]
}

fn kinked(rng: &mut ChaCha8Rng) -> Vec<Tensor<f32>> {
    vec![away_from_zero(vec![dim(rng), dim(rng)], 0.1, rng)]
}

fn matmul_pair(rng: &mut ChaCha8Rng) -> Vec<Tensor<f32>> {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    vec![random(vec![m, k], rng), random(vec![k, n], rng)]
}

fn row_pair(rng: &mut ChaCha8Rng) -> Vec<Tensor<f32>> {
    let (m, n) = (dim(rng), dim(rng));
    vec![random(vec![m, n], rng), random(vec![n], rng)]
}

fn vectors(rng: &mut ChaCha8Rng) -> Vec<Tensor<f32>> {
    let n = dim(rng);
    (0..dim(rng)).map(|_| random(vec![n], rng)).collect()
}

fn op_add<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].add(x[1])
}
fn op_sub<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].sub(x[1])
}
fn op_mul<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].mul(x[1])
}
fn op_scale<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].scale(-2.5)
}
fn op_matmul<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].matmul(x[1])
}
fn op_transpose<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].transpose()
}
fn op_reshape<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let n = x[0].value().numel();
    x[0].reshape(vec![n])
}
fn op_sum<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].sum()
}
fn op_mean<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].mean()
}
fn op_sum_axis0<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].sum_axis(0)
}
fn op_sum_axis1<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].sum_axis(1)
}
fn op_mean_axis0<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].mean_axis(0)
}
fn op_mean_axis1<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].mean_axis(1)
}
fn op_sigmoid<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].sigmoid()
}
fn op_relu<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].relu()
}
fn op_softmax<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].scale(3.0)?.softmax_rows()
}
fn op_l2_axis0<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].l2_normalize(0)
}
fn op_l2_axis1<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].l2_normalize(1)
}
fn op_add_row<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    x[0].add_row_vector(x[1])
}
fn op_bce<'t, T: Scalar>(_: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let targets = x[1].value().map(|v| if v.widen() > 0.0 { T::one() } else { T::zero() });
    x[0].scale(4.0)?.bce_with_logits(&targets)
}
fn op_stack<'t, T: Scalar>(t: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    t.stack(x)
}

pub struct OpCase {
    pub name: &'static str,
    build32: Build<f32>,
    build64: Build<f64>,
    make: Maker,
}

macro_rules! case {
    ($name:literal, $op:ident, $make:ident) => {
        OpCase {
            name: $name,
            build32: $op::<f32>,
            build64: $op::<f64>,
            make: $make,
        }
    };
}

/// Every differentiable op with an input generator suited to it.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case!("add", op_add, pair),
        case!("sub", op_sub, pair),
        case!("mul", op_mul, pair),
        case!("scale", op_scale, one),
        case!("matmul", op_matmul, matmul_pair),
        case!("transpose", op_transpose, one),
        case!("reshape", op_reshape, one),
        case!("sum", op_sum, one),
        case!("mean", op_mean, one),
        case!("sum_axis0", op_sum_axis0, one),
        case!("sum_axis1", op_sum_axis1, one),
        case!("mean_axis0", op_mean_axis0, one),
        case!("mean_axis1", op_mean_axis1, one),
        case!("sigmoid", op_sigmoid, one),
        case!("relu", op_relu, kinked),
        case!("softmax_rows", op_softmax, one),
        case!("l2_normalize_axis0", op_l2_axis0, kinked),
        case!("l2_normalize_axis1", op_l2_axis1, kinked),
        case!("add_row_vector", op_add_row, row_pair),
        case!("bce_with_logits", op_bce, pair),
        case!("stack", op_stack, vectors),
    ]
}

/// Per-element check on `instances` random inputs; returns the worst error.
///
/// `wide` selects the 64-bit mode: analytic gradient from the `f64` tape,
/// ε = 1e-5, tolerance 1e-6. Otherwise the `f32` tape with ε = 1e-3 and
/// tolerance 1e-3.
pub fn check_op(case: &OpCase, instances: usize, seed: u64, wide: bool) -> std::result::Result<f64, String> {
    let (eps, tol) = if wide { (EPS_F64, TOL_F64) } else { (EPS_F32, TOL_F32) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for instance in 0..instances {
        let inputs = (case.make)(&mut rng);
        let inputs64: Vec<Tensor<f64>> = inputs.iter().map(|x| x.cast()).collect();
        let n = output_len(case.build64, &inputs64);
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0f32) as f64).collect();
        let grads = if wide {
            analytic(case.build64, &inputs64, &weights)
        } else {
            analytic(case.build32, &inputs, &weights)
        };
        for (i, g) in grads.iter().enumerate() {
            for (k, &a) in g.iter().enumerate() {
                let numeric = central(case.build64, &inputs64, &weights, i, k, eps);
                let err = rel_err(a, numeric);
                if !(err < tol) {
                    return Err(format!(
                        "{} instance {instance}: input {i} element {k}: analytic {a:e} vs numeric {numeric:e} (rel {err:e})",
                        case.name
                    ));
                }
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}

const PIPE_M: usize = 3;

fn pipeline_config() -> SscaConfig {
    SscaConfig::new(4, PIPE_M, 2, 1).with_stages(2)
}

/// Two-stage cascade on a batch of two 4×4 images; inputs are the model
/// parameters in `named_params` order followed by the two images.
fn pipeline<'t, T: Scalar>(tape: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let model = DlflModel::<T>::init(pipeline_config(), 0)?;
    let n = model.named_params().len();
    let images: Vec<Tensor<T>> = x[n..].iter().map(|v| v.value().clone()).collect();
    let refs: Vec<&Tensor<T>> = images.iter().collect();
    let targets = Tensor::from_f64(vec![2, PIPE_M], &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0])?;
    batch_loss(&model, tape, &x[..n], &refs, &targets)
}

fn pipeline_inputs(rng: &mut ChaCha8Rng) -> Option<Vec<Tensor<f32>>> {
    let model = DlflModel::<f32>::init(pipeline_config(), rng.random()).ok()?;
    let images = [random(vec![1, 4, 4], rng), random(vec![1, 4, 4], rng)];
    // Skip draws near the ReLU kink, and draws whose feature map is all zero.
    for img in &images {
        let pre = patchify(img, 2).ok()?.matmul(&model.backbone.proj).ok()?;
        if pre.data().iter().any(|v| v.abs() < 0.05) || pre.data().iter().all(|&v| v < 0.0) {
            return None;
        }
    }
    let mut inputs: Vec<Tensor<f32>> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    inputs.extend(images);
    Some(inputs)
}

/// Full S=2 pipeline in 32-bit mode: every parameter tensor, the semantic
/// queries included, must meet the tolerance as a whole. Returns the worst
/// error and the index of the parameter that produced it.
pub fn check_pipeline(instances: usize, seed: u64) -> std::result::Result<(f64, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, 0);
    let mut done = 0;
    while done < instances {
        let Some(inputs) = pipeline_inputs(&mut rng) else { continue };
        let inputs64: Vec<Tensor<f64>> = inputs.iter().map(|x| x.cast()).collect();
        let grads = analytic(pipeline::<f32>, &inputs, &[1.0]);
        for (i, g) in grads.iter().enumerate().take(inputs.len() - 2) {
            let numeric: Vec<f64> =
                (0..g.len()).map(|k| richardson(pipeline::<f64>, &inputs64, &[1.0], i, k, EPS_F32)).collect();
            let err = tensor_rel_err(g, &numeric);
            if !(err < TOL_F32) {
                return Err(format!("pipeline instance {done}: parameter {i}: relative error {err:e}"));
            }
            if err > worst.0 {
                worst = (err, i);
            }
        }
        done += 1;
    }
    Ok(worst)
}
