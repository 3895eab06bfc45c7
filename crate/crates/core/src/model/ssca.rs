//! Semantic spatial cross-attention and the cosine classifier head.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{ClassifierMode, FeatureMap};

/// One attention stage on the tape.
///
/// `queries` is `C×M`, `features` is `C×HW`, `theta`/`phi` are `E×C`.
/// Returns the attention map `A = softmax(θ(Q)ᵀφ(F)/√C)` (`M×HW`) and the
/// label features `φ(F)·Aᵀ` (`E×M`). `φ(F)` serves as both keys and values.
pub fn ssca_forward_var<'t, T: Scalar>(
    theta: Var<'t, T>,
    phi: Var<'t, T>,
    queries: Var<'t, T>,
    features: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let projected_queries = theta.matmul(queries)?;
    attend(projected_queries, phi, features)
}

/// Attention given already-projected queries `θ(Q)` (`E×M`).
pub(crate) fn attend<'t, T: Scalar>(
    projected_queries: Var<'t, T>,
    phi: Var<'t, T>,
    features: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let channels = features.shape()[0];
    let keys = phi.matmul(features)?;
    let attention = projected_queries
        .transpose()?
        .matmul(keys)?
        .scale(1.0 / (channels as f64).sqrt())?
        .softmax_rows()?;
    let label_features = keys.matmul(attention.transpose()?)?;
    Ok((attention, label_features))
}

/// Tape-free [`ssca_forward_var`].
pub fn ssca_forward<T: Scalar>(
    theta: &Tensor<T>,
    phi: &Tensor<T>,
    queries: &Tensor<T>,
    features: &FeatureMap<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let tape = Tape::new();
    let (a, fs) = ssca_forward_var(
        tape.constant(theta.clone()),
        tape.constant(phi.clone()),
        tape.constant(queries.clone()),
        tape.constant(features.values.clone()),
    )?;
    let out = (a.value().clone(), fs.value().clone());
    Ok(out)
}

/// `logit_j = γ·cos∠(F[:,j], W[:,j])`: each label feature meets only its own
/// classifier column. `classifier` may be pre-normalised by the caller.
pub fn cosine_logits_var<'t, T: Scalar>(
    label_features: Var<'t, T>,
    normalized_classifier: Var<'t, T>,
    gamma: f64,
) -> Result<Var<'t, T>> {
    label_features
        .l2_normalize(0)?
        .mul(normalized_classifier)?
        .sum_axis(0)?
        .scale(gamma)
}

pub(crate) fn head_var<'t, T: Scalar>(
    label_features: Var<'t, T>,
    classifier: Var<'t, T>,
    mode: ClassifierMode,
    gamma: f64,
) -> Result<Var<'t, T>> {
    match mode {
        ClassifierMode::Cosine => cosine_logits_var(label_features, classifier, gamma),
        ClassifierMode::Raw => label_features.mul(classifier)?.sum_axis(0),
    }
}

/// Tape-free cosine head. Classifier columns are normalised here.
pub fn cosine_logits<T: Scalar>(label_features: &Tensor<T>, classifier: &Tensor<T>, gamma: f64) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let w = tape.constant(classifier.clone()).l2_normalize(0)?;
    let z = cosine_logits_var(tape.constant(label_features.clone()), w, gamma)?;
    let out = z.value().clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct loops in f64, independent of the tape.
    fn oracle(theta: &Tensor<f64>, phi: &Tensor<f64>, q: &Tensor<f64>, f: &Tensor<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (e, c) = (theta.shape()[0], theta.shape()[1]);
        let (m, hw) = (q.shape()[1], f.shape()[1]);
        let tq: Vec<Vec<f64>> = (0..e)
            .map(|i| (0..m).map(|j| (0..c).map(|k| theta.at2(i, k) * q.at2(k, j)).sum()).collect())
            .collect();
        let pf: Vec<Vec<f64>> = (0..e)
            .map(|i| (0..hw).map(|p| (0..c).map(|k| phi.at2(i, k) * f.at2(k, p)).sum()).collect())
            .collect();
        let mut a = vec![vec![0.0; hw]; m];
        for j in 0..m {
            let s: Vec<f64> = (0..hw)
                .map(|p| (0..e).map(|i| tq[i][j] * pf[i][p]).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for p in 0..hw {
                a[j][p] = s[p].exp() / z;
            }
        }
        let fs: Vec<Vec<f64>> = (0..e)
            .map(|i| (0..m).map(|j| (0..hw).map(|p| a[j][p] * pf[i][p]).sum()).collect())
            .collect();
        (a, fs)
    }

    #[test]
    fn matches_direct_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, m, hw) = (4, 2, 3);
        let theta = rand_t(&mut rng, vec![c, c]);
        let phi = rand_t(&mut rng, vec![c, c]);
        let q = rand_t(&mut rng, vec![c, m]);
        let f = rand_t(&mut rng, vec![c, hw]);
        let (a, fs) = ssca_forward(&theta, &phi, &q, &FeatureMap::new(f.clone()).unwrap()).unwrap();
        let (oa, ofs) = oracle(&theta, &phi, &q, &f);
        for j in 0..m {
            for p in 0..hw {
                assert!((a.at2(j, p) - oa[j][p]).abs() < 1e-5);
            }
        }
        for i in 0..c {
            for j in 0..m {
                assert!((fs.at2(i, j) - ofs[i][j]).abs() < 1e-5);
            }
        }
        // same check with f32 storage
        let (a32, fs32) = ssca_forward(
            &theta.cast::<f32>(),
            &phi.cast(),
            &q.cast(),
            &FeatureMap::new(f.cast()).unwrap(),
        )
        .unwrap();
        for j in 0..m {
            for p in 0..hw {
                assert!((a32.at2(j, p) as f64 - oa[j][p]).abs() < 1e-5);
            }
        }
        for i in 0..c {
            for j in 0..m {
                assert!((fs32.at2(i, j) as f64 - ofs[i][j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn constant_values_ignore_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 3;
        let theta = rand_t(&mut rng, vec![c, c]);
        let phi = rand_t(&mut rng, vec![c, c]);
        let column = [0.4, -1.2, 2.0];
        let f = Tensor::from_fn(vec![c, 5], |k| column[k / 5]);
        let fm = FeatureMap::new(f.clone()).unwrap();
        let expected = phi.matmul(&Tensor::from_f64(vec![c, 1], &column).unwrap()).unwrap();
        for _ in 0..3 {
            let q = rand_t(&mut rng, vec![c, 4]);
            let (_, fs) = ssca_forward(&theta, &phi, &q, &fm).unwrap();
            for i in 0..c {
                for j in 0..4 {
                    assert!((fs.at2(i, j) - expected.data()[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_position_is_identity_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta = rand_t(&mut rng, vec![3, 3]);
        let phi = rand_t(&mut rng, vec![3, 3]);
        let q = rand_t(&mut rng, vec![3, 2]);
        let f = rand_t(&mut rng, vec![3, 1]);
        let (a, fs) = ssca_forward(&theta, &phi, &q, &FeatureMap::new(f.clone()).unwrap()).unwrap();
        assert!(a.data().iter().all(|&v| v == 1.0));
        let pf = phi.matmul(&f).unwrap();
        for j in 0..2 {
            assert_eq!(fs.column(j).unwrap().data(), pf.data());
        }
    }

    #[test]
    fn cosine_head_reference_angles() {
        let w = Tensor::<f64>::from_f64(vec![2, 1], &[1.0, 0.0]).unwrap();
        let parallel = Tensor::from_f64(vec![2, 1], &[2.5, 0.0]).unwrap();
        assert!((cosine_logits(&parallel, &w, 30.0).unwrap().data()[0] - 30.0).abs() < 1e-12);
        let ortho = Tensor::from_f64(vec![2, 1], &[0.0, -3.0]).unwrap();
        assert!(cosine_logits(&ortho, &w, 30.0).unwrap().data()[0].abs() < 1e-12);
        let sixty = Tensor::from_f64(vec![2, 1], &[0.5, 3f64.sqrt() / 2.0]).unwrap();
        assert!((cosine_logits(&sixty, &w, 30.0).unwrap().data()[0] - 15.0).abs() < 1e-4);
        let zero = Tensor::zeros(vec![2, 1]);
        assert!(matches!(cosine_logits(&zero, &w, 30.0), Err(Error::Degenerate { .. })));
    }
}
