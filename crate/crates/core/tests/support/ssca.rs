//! Structural checks on the attention stage and the cosine head.

use dlfl::model::{batch_loss, bind, cosine_logits, ssca_forward, DlflModel, FeatureMap, Parameterized, SscaConfig};
use dlfl::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let d = rand_distr::StandardNormal;
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(d))
}

fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn err(e: dlfl::Error) -> String {
    e.to_string()
}

/// Sizes `(C, M, HW, E)` of one attention stage.
#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub c: usize,
    pub m: usize,
    pub hw: usize,
    pub e: usize,
}

impl Dims {
    pub fn random(rng: &mut impl Rng) -> Self {
        Dims {
            c: rng.random_range(1..=8),
            m: rng.random_range(1..=6),
            hw: rng.random_range(1..=16),
            e: rng.random_range(1..=8),
        }
    }
}

pub fn attention_rows_are_distributions(d: Dims, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (theta, phi) = (normal(vec![d.e, d.c], &mut rng), normal(vec![d.e, d.c], &mut rng));
    let q = normal(vec![d.c, d.m], &mut rng);
    let f = FeatureMap::new(normal(vec![d.c, d.hw], &mut rng).map(|v| v.max(0.0))).map_err(err)?;
    let (a, _) = ssca_forward(&theta, &phi, &q, &f).map_err(err)?;
    ensure(a.shape() == [d.m, d.hw], || format!("{d:?}: attention shape {:?}", a.shape()))?;
    for j in 0..d.m {
        let row = a.row(j).map_err(err)?;
        ensure(row.data().iter().all(|&v| v >= 0.0), || format!("{d:?}: negative weight in row {j}"))?;
        ensure((row.sum() - 1.0).abs() <= 1e-6, || format!("{d:?}: row {j} sums to {}", row.sum()))?;
    }
    Ok(())
}

pub fn cascade_stages_attend_with_distributions(stages: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = DlflModel::<f32>::init(SscaConfig::new(6, 3, 4, 1).with_stages(stages), seed).map_err(err)?;
    let trace = model.trace(&normal(vec![1, 8, 8], &mut rng)).map_err(err)?;
    ensure(trace.attention.len() == stages, || format!("{} attention maps for S={stages}", trace.attention.len()))?;
    for (s, a) in trace.attention.iter().enumerate() {
        for j in 0..3 {
            let sum = a.row(j).map_err(err)?.sum();
            ensure((sum - 1.0).abs() <= 1e-6, || format!("S={stages} stage {s} row {j} sums to {sum}"))?;
        }
    }
    Ok(())
}

pub fn spatial_permutation_equivariance(d: Dims, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, m, hw) = (d.c, d.m, d.hw);
    let (theta, phi) = (normal(vec![d.e, c], &mut rng), normal(vec![d.e, c], &mut rng));
    let q = normal(vec![c, m], &mut rng);
    let values = normal(vec![c, hw], &mut rng);
    let mut perm: Vec<usize> = (0..hw).collect();
    perm.shuffle(&mut rng);
    let permuted = Tensor::from_fn(vec![c, hw], |k| values.at2(k / hw, perm[k % hw]));
    let (a, fs) = ssca_forward(&theta, &phi, &q, &FeatureMap::new(values).map_err(err)?).map_err(err)?;
    let (ap, fsp) = ssca_forward(&theta, &phi, &q, &FeatureMap::new(permuted).map_err(err)?).map_err(err)?;
    let a_perm = Tensor::from_fn(vec![m, hw], |k| a.at2(k / hw, perm[k % hw]));
    let (da, df) = (max_abs_diff(&ap, &a_perm), max_abs_diff(&fs, &fsp));
    ensure(da <= 1e-5 && df <= 1e-5, || format!("{d:?}: attention off by {da:e}, features by {df:e}"))
}

pub fn constant_map_gives_query_independent_features(d: Dims, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, hw) = (d.c, d.hw);
    let (theta, phi) = (normal(vec![d.e, c], &mut rng), normal(vec![d.e, c], &mut rng));
    let column = normal(vec![c], &mut rng);
    let f = FeatureMap::new(Tensor::from_fn(vec![c, hw], |k| column.data()[k / hw])).map_err(err)?;
    let (_, fs1) = ssca_forward(&theta, &phi, &normal(vec![c, d.m], &mut rng), &f).map_err(err)?;
    let (_, fs2) = ssca_forward(&theta, &phi, &normal(vec![c, d.m], &mut rng).scale(10.0), &f).map_err(err)?;
    let diff = max_abs_diff(&fs1, &fs2);
    ensure(diff <= 1e-5, || format!("{d:?}: features depend on the queries ({diff:e})"))?;
    let projected = phi.matmul(&column.reshape(vec![c, 1]).map_err(err)?).map_err(err)?;
    for j in 0..d.m {
        for r in 0..d.e {
            let gap = (fs1.at2(r, j) - projected.at2(r, 0)).abs();
            ensure(gap <= 1e-5, || format!("{d:?}: label {j} row {r} is {gap:e} from the projected column"))?;
        }
    }
    Ok(())
}

/// Scaling one label feature by `factor > 0` keeps every decision.
pub fn positive_rescaling_keeps_decisions(e: usize, m: usize, factor: f64, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = normal(vec![e, m], &mut rng);
    let w = normal(vec![e, m], &mut rng);
    let col = rng.random_range(0..m);
    let scaled = Tensor::from_fn(vec![e, m], |k| {
        let v = fs.data()[k];
        if k % m == col {
            (v as f64 * factor) as f32
        } else {
            v
        }
    });
    let z = cosine_logits(&fs, &w, 30.0).map_err(err)?;
    let zs = cosine_logits(&scaled, &w, 30.0).map_err(err)?;
    for j in 0..m {
        let (a, b) = (z.data()[j], zs.data()[j]);
        ensure((a >= 0.0) == (b >= 0.0) && (a - b).abs() <= 1e-4, || {
            format!("E={e} M={m} factor {factor}: logit {j} moved from {a} to {b}")
        })?;
    }
    Ok(())
}

/// With the standard basis as classifier, rotating a feature inside the
/// complement of its own column leaves its logit unchanged.
pub fn logit_depends_only_on_angle_to_own_classifier(e: usize, turn: f64, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = e;
    let w: Tensor<f32> = Tensor::eye(e);
    let fs = normal(vec![e, m], &mut rng);
    let j = rng.random_range(0..m);
    let mut others: Vec<usize> = (0..e).filter(|&r| r != j).collect();
    others.shuffle(&mut rng);
    let (a, b) = (others[0], others[1]);
    let (cos, sin) = (turn.cos(), turn.sin());
    let mut rotated = fs.clone();
    let (xa, xb) = (fs.at2(a, j) as f64, fs.at2(b, j) as f64);
    rotated.data_mut()[a * m + j] = (cos * xa - sin * xb) as f32;
    rotated.data_mut()[b * m + j] = (sin * xa + cos * xb) as f32;
    let z = cosine_logits(&fs, &w, 30.0).map_err(err)?;
    let zr = cosine_logits(&rotated, &w, 30.0).map_err(err)?;
    let (x, y) = (z.data()[j], zr.data()[j]);
    ensure((x - y).abs() <= 3e-4, || format!("E={e} turn {turn}: logit {x} became {y}"))
}

/// The batch gradient of the queries is the sum of per-image gradients.
pub fn queries_are_one_parameter_shared_by_the_batch(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = DlflModel::<f32>::init(SscaConfig::new(6, 3, 4, 1), seed).map_err(err)?;
    let images = [normal(vec![1, 8, 8], &mut rng), normal(vec![1, 8, 8], &mut rng)];
    let targets = Tensor::<f32>::from_f64(vec![2, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).map_err(err)?;
    ensure(model.named_params()[2].0 == "queries", || "third parameter is not the query matrix".into())?;
    let grad_for = |idx: &[usize]| -> Result<Tensor<f32>, String> {
        let tape = Tape::<f32>::new();
        let params = bind(&tape, &model, true);
        let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &images[i]).collect();
        let rows: Vec<f64> = idx.iter().flat_map(|&i| targets.row(i).unwrap().to_f64_vec()).collect();
        let t = Tensor::from_f64(vec![idx.len(), 3], &rows).map_err(err)?;
        let loss = batch_loss(&model, &tape, &params, &imgs, &t).map_err(err)?;
        // The loss is a per-element mean; undo it so batch gradients add up.
        let loss = loss.scale((idx.len() * 3) as f64).map_err(err)?;
        Ok(tape.backward(loss).map_err(err)?.get(params[2]))
    };
    let both = grad_for(&[0, 1])?;
    let sum = grad_for(&[0])?.add(&grad_for(&[1])?).map_err(err)?;
    ensure(both.shape() == [6, 3], || format!("query gradient shape {:?}", both.shape()))?;
    let diff = max_abs_diff(&both, &sum);
    ensure(diff <= 1e-5, || format!("batch gradient differs from the per-image sum by {diff:e}"))
}
