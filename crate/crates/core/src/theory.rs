//! The optimal single shared feature for `M` orthogonal, equal-norm cosine
//! classifiers, in closed form and by numeric minimisation on the sphere.
//!
//! With `M_p` positive and `M − M_p` negative labels and a constant product
//! `α = ‖w‖·‖f‖`, the shared unit feature `x` minimises
//! `Σ_{j<M_p} log(1 + e^{−αx_j}) + Σ_{j≥M_p} log(1 + e^{αx_j})` subject to
//! `‖x‖ = 1`. The minimiser is `x_j = ±1/√M`, so every classifier sits at
//! `arccos(1/√M)` from the shared feature.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus};

pub const DEFAULT_ALPHA: f64 = 30.0;
pub const DEFAULT_RESTARTS: usize = 8;
pub const MAX_ITERS: usize = 10_000;
/// Stop once `‖Riemannian grad‖ ≤ GRAD_RTOL · ‖Euclidean grad‖`.
pub const GRAD_RTOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleProblem {
    /// Total label count `M`.
    pub labels: usize,
    /// Positive label count `M_p`; the first `M_p` coordinates are positive.
    pub positives: usize,
    pub alpha: f64,
}

impl AngleProblem {
    pub fn new(labels: usize, positives: usize, alpha: f64) -> Result<Self> {
        let p = AngleProblem {
            labels,
            positives,
            alpha,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels == 0 {
            return Err(Error::Validation("angle problem needs M ≥ 1".into()));
        }
        if self.positives > self.labels {
            return Err(Error::Validation(format!(
                "M_p = {} exceeds M = {}",
                self.positives, self.labels
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Validation(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    fn sign(&self, j: usize) -> f64 {
        if j < self.positives {
            1.0
        } else {
            -1.0
        }
    }

    /// Log objective `Σ_j softplus(−s_j·α·x_j)` with `s_j = ±1`.
    pub fn log_objective(&self, x: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(j, &v)| softplus(-self.sign(j) * self.alpha * v))
            .sum()
    }

    /// Euclidean gradient of [`log_objective`](Self::log_objective).
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| {
                let s = self.sign(j);
                -s * self.alpha * sigmoid(-s * self.alpha * v)
            })
            .collect()
    }
}

/// Closed-form minimiser: `+1/√M` on positives and `−1/√M` on negatives.
pub fn optimal_shared_feature(problem: &AngleProblem) -> Result<Vec<f64>> {
    problem.validate()?;
    let v = 1.0 / (problem.labels as f64).sqrt();
    Ok((0..problem.labels).map(|j| problem.sign(j) * v).collect())
}

/// Zero-pads `x` to dimension `channels`.
pub fn embed(x: &[f64], channels: usize) -> Result<Vec<f64>> {
    if channels < x.len() {
        return Err(Error::Validation(format!(
            "cannot embed a {}-vector in {channels} channels",
            x.len()
        )));
    }
    let mut out = x.to_vec();
    out.resize(channels, 0.0);
    Ok(out)
}

/// `arccos(1/√M)` in degrees.
pub fn optimal_angle_degrees(labels: usize) -> f64 {
    (1.0 / (labels as f64).sqrt()).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angle in degrees between the unit feature `x` and the `j`-th basis
/// classifier, for every `j`.
pub fn basis_angles(x: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter().map(|v| (v / norm).clamp(-1.0, 1.0).acos().to_degrees()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NumericOptimum {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub restart: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(x: &mut [f64]) {
    let n = dot(x, x).sqrt();
    x.iter_mut().for_each(|v| *v /= n);
}

fn tangent(x: &[f64], g: &[f64]) -> Vec<f64> {
    let gx = dot(g, x);
    g.iter().zip(x).map(|(gi, xi)| gi - gx * xi).collect()
}

struct Descent {
    x: Vec<f64>,
    f: f64,
    iterations: usize,
    converged: bool,
    residual: f64,
}

/// Riemannian gradient descent on the unit sphere with Barzilai–Borwein
/// steps, Armijo backtracking and retraction by renormalisation.
fn descend(problem: &AngleProblem, mut x: Vec<f64>) -> Descent {
    const ARMIJO: f64 = 1e-4;
    let mut f = problem.log_objective(&x);
    let mut egrad = problem.gradient(&x);
    let mut rgrad = tangent(&x, &egrad);
    let mut step = 1.0 / dot(&rgrad, &rgrad).sqrt().max(f64::MIN_POSITIVE);
    let mut residual = f64::INFINITY;
    for it in 0..MAX_ITERS {
        let rnorm = dot(&rgrad, &rgrad).sqrt();
        let enorm = dot(&egrad, &egrad).sqrt();
        residual = if enorm > 0.0 { rnorm / enorm } else { 0.0 };
        if residual <= GRAD_RTOL {
            return Descent {
                x,
                f,
                iterations: it,
                converged: true,
                residual,
            };
        }
        let mut t = step;
        let (next, f_next) = loop {
            let mut cand: Vec<f64> = x.iter().zip(&rgrad).map(|(xi, gi)| xi - t * gi).collect();
            normalize(&mut cand);
            let fc = problem.log_objective(&cand);
            // Near the optimum the decrease drops below the rounding of f;
            // such steps are accepted and judged by the gradient test.
            let noise = 8.0 * f64::EPSILON * f.abs();
            if fc <= f - ARMIJO * t * rnorm * rnorm || (fc - f).abs() <= noise {
                break (cand, fc);
            }
            t *= 0.5;
            if t * rnorm < 1e-300 {
                break (x.clone(), f);
            }
        };
        let next_egrad = problem.gradient(&next);
        let next_rgrad = tangent(&next, &next_egrad);
        let s: Vec<f64> = next.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next_rgrad.iter().zip(&rgrad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y).abs();
        step = if sy > 0.0 { dot(&s, &s) / sy } else { 2.0 * t };
        x = next;
        f = f_next;
        egrad = next_egrad;
        rgrad = next_rgrad;
    }
    Descent {
        x,
        f,
        iterations: MAX_ITERS,
        converged: false,
        residual,
    }
}

/// Numeric minimiser from `restarts` random unit-sphere starts; the best
/// converged run is returned.
pub fn numeric_optimum(problem: &AngleProblem, restarts: usize, seed: u64) -> Result<NumericOptimum> {
    problem.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<NumericOptimum> = None;
    let mut worst_residual: f64 = 0.0;
    for restart in 0..restarts.max(1) {
        let mut x0: Vec<f64> = (0..problem.labels).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize(&mut x0);
        let run = descend(problem, x0);
        if !run.converged {
            worst_residual = worst_residual.max(run.residual);
            continue;
        }
        if best.as_ref().is_none_or(|b| run.f < b.objective) {
            best = Some(NumericOptimum {
                x: run.x,
                objective: run.f,
                iterations: run.iterations,
                restart,
            });
        }
    }
    best.ok_or_else(|| {
        Error::Convergence(format!(
            "no restart converged for M={}, M_p={}, alpha={} within {MAX_ITERS} iterations \
             (relative tangent gradient {worst_residual:.3e} > {GRAD_RTOL:e})",
            problem.labels, problem.positives, problem.alpha
        ))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub labels: usize,
    pub closed_form_deg: f64,
    pub numeric_deg: f64,
}

/// Optimal angle for every `M` with all labels positive, closed form and numeric.
pub fn theory_curve(labels: &[usize], alpha: f64, seed: u64) -> Result<Vec<CurvePoint>> {
    labels
        .iter()
        .map(|&m| {
            let problem = AngleProblem::new(m, m, alpha)?;
            let opt = numeric_optimum(&problem, DEFAULT_RESTARTS, seed)?;
            let angles = basis_angles(&opt.x);
            Ok(CurvePoint {
                labels: m,
                closed_form_deg: optimal_angle_degrees(m),
                numeric_deg: angles.iter().sum::<f64>() / angles.len() as f64,
            })
        })
        .collect()
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("M,optimal_angle_deg_closed_form,optimal_angle_deg_numeric\n");
    for p in points {
        let _ = writeln!(out, "{},{:.6},{:.6}", p.labels, p.closed_form_deg, p.numeric_deg);
    }
    out
}

pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    std::fs::write(path, curve_csv(points)).map_err(|e| Error::io(path, e))
}
