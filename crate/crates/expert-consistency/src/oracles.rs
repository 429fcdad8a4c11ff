//! Slow, independent reference computations for testing the fast paths.
//!
//! None of these call the production routine for the quantity they check.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{fit, FitOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub value: f64,
    pub method: String,
    /// Rough count of elementary operations or inner iterations.
    pub cost: u64,
}

fn plain_sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn base_probability(theta: &[f64], x: &[f64]) -> f64 {
    let m = x.len();
    let z: f64 = theta[m] + x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
    plain_sigmoid(z)
}

/// `[P_ε(x) − P_0(x)] / (ε·|E_h|)` where `P_ε` is refitted with weight
/// `1 + ε` on every case of expert `expert` (ids are 1-based).
#[allow(clippy::too_many_arguments)]
pub fn retraining_influence_oracle(
    x_train: &DMatrix<f64>,
    decisions: &[u8],
    expert_ids: &[usize],
    expert: usize,
    x_query: &[f64],
    epsilon: f64,
    ridge: f64,
) -> Result<OracleResult> {
    if epsilon == 0.0 || !epsilon.is_finite() {
        return Err(Error::usage("epsilon must be finite and nonzero"));
    }
    if x_query.len() != x_train.ncols() {
        return Err(Error::data("query dimension differs from training data"));
    }
    let members = expert_ids.iter().filter(|&&e| e == expert).count();
    if members == 0 {
        return Err(Error::data(format!("expert {expert} has no training cases")));
    }
    let y: Vec<f64> = decisions.iter().map(|&d| d as f64).collect();
    let opts = FitOptions {
        tol: 1e-10,
        max_iter: 500,
    };
    let base_w = vec![1.0; y.len()];
    let pert_w: Vec<f64> = expert_ids
        .iter()
        .map(|&e| if e == expert { 1.0 + epsilon } else { 1.0 })
        .collect();
    let base = fit(x_train, &y, &base_w, ridge, &opts)?;
    let pert = fit(x_train, &y, &pert_w, ridge, &opts)?;
    let diff = base_probability(&pert.theta, x_query) - base_probability(&base.theta, x_query);
    Ok(OracleResult {
        value: diff / (epsilon * members as f64),
        method: format!("forward difference of two Newton refits at epsilon={epsilon}"),
        cost: 2 * (x_train.nrows() * x_train.ncols()) as u64,
    })
}

/// Brute-force AUC over all positive/negative pairs.
pub fn pairwise_auc_oracle(scores: &[f64], labels: &[u8]) -> Result<OracleResult> {
    if scores.len() != labels.len() {
        return Err(Error::data("scores and labels differ in length"));
    }
    let pos: Vec<f64> = (0..scores.len()).filter(|&i| labels[i] == 1).map(|i| scores[i]).collect();
    let neg: Vec<f64> = (0..scores.len()).filter(|&i| labels[i] != 1).map(|i| scores[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::data("AUC needs both classes"));
    }
    let mut twice: u64 = 0;
    for &p in &pos {
        for &q in &neg {
            if p > q {
                twice += 2;
            } else if p == q {
                twice += 1;
            }
        }
    }
    let pairs = (pos.len() * neg.len()) as u64;
    Ok(OracleResult {
        value: twice as f64 / (2 * pairs) as f64,
        method: "pairwise concordance count".into(),
        cost: pairs,
    })
}

/// `Φ(z)` from the all-positive series `½ + φ(z)·Σ z^{2j+1}/(2j+1)!!`.
fn normal_cdf_series(z: f64) -> f64 {
    let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut term = z;
    let mut sum = z;
    let mut j = 1.0;
    while term.abs() > 1e-300 && j < 4000.0 {
        term *= z * z / (2.0 * j + 1.0);
        let next = sum + term;
        if next == sum {
            break;
        }
        sum = next;
        j += 1.0;
    }
    (0.5 + phi * sum).clamp(0.0, 1.0)
}

/// Complementary error function through the normal series.
pub fn erfc_oracle(x: f64) -> f64 {
    2.0 * (1.0 - normal_cdf_series(x * std::f64::consts::SQRT_2))
}

/// `Φ⁻¹(p)` by bisection on `Φ(z) = ½·erfc(−z/√2)` until the bracket is
/// narrower than 1e-10.
pub fn inverse_normal_oracle(p: f64) -> Result<OracleResult> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::usage(format!("probability {p} outside (0, 1)")));
    }
    let cdf = |z: f64| 0.5 * erfc_oracle(-z / std::f64::consts::SQRT_2);
    let (mut lo, mut hi) = (-10.0, 10.0);
    let mut steps = 0u64;
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        steps += 1;
    }
    Ok(OracleResult {
        value: 0.5 * (lo + hi),
        method: "bisection on the complementary error function".into(),
        cost: steps,
    })
}

/// Share of `trials` Bernoulli samples whose empirical rate reaches the lower
/// bound `1 − δ − z·σ̂/√n`; `1 − value` is the below-bound frequency.
pub fn ci_coverage_oracle(
    delta: f64,
    true_rate: f64,
    set_size: usize,
    confidence: f64,
    trials: usize,
    seed: u64,
) -> Result<OracleResult> {
    if set_size == 0 || trials == 0 {
        return Err(Error::usage("set size and trials must be positive"));
    }
    if !(0.0..=1.0).contains(&true_rate) {
        return Err(Error::usage("true rate outside [0, 1]"));
    }
    let alpha = (1.0 - confidence) / 2.0;
    let z = inverse_normal_oracle(1.0 - alpha / 2.0)?.value;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut covered = 0usize;
    for _ in 0..trials {
        let hits = (0..set_size).filter(|_| rng.random::<f64>() < true_rate).count();
        let rate = hits as f64 / set_size as f64;
        let sigma = (rate * (1.0 - rate)).sqrt();
        let bound = 1.0 - delta - z * sigma / (set_size as f64).sqrt();
        if rate >= bound {
            covered += 1;
        }
    }
    Ok(OracleResult {
        value: covered as f64 / trials as f64,
        method: "Monte-Carlo Bernoulli replications".into(),
        cost: (trials * set_size) as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexMinimum {
    pub point: Vec<f64>,
    pub objective: f64,
    pub evaluations: u64,
}

/// Minimizes a smooth convex function from function values alone: Newton
/// steps on central-difference derivatives with step halving, then a
/// golden-section sweep per coordinate to remove the finite-difference bias.
pub fn minimize_convex(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], tol: f64) -> Result<ConvexMinimum> {
    let n = x0.len();
    let h = 1e-4;
    let evals = std::cell::Cell::new(0u64);
    let f = |x: &[f64]| {
        evals.set(evals.get() + 1);
        f(x)
    };
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    for _ in 0..500 {
        let mut g = DVector::zeros(n);
        let mut hm = DMatrix::zeros(n, n);
        for i in 0..n {
            let shift = |si: f64, j: usize, sj: f64| {
                let mut p = x.clone();
                p[i] += si;
                p[j] += sj;
                f(&p)
            };
            let (fa, fb) = (shift(h, i, 0.0), shift(-h, i, 0.0));
            g[i] = (fa - fb) / (2.0 * h);
            hm[(i, i)] = (fa - 2.0 * fx + fb) / (h * h);
            for j in 0..i {
                let v = (shift(h, j, h) - shift(h, j, -h) - shift(-h, j, h) + shift(-h, j, -h))
                    / (4.0 * h * h);
                hm[(i, j)] = v;
                hm[(j, i)] = v;
            }
        }
        let step = match hm.cholesky() {
            Some(c) => c.solve(&g),
            None => g.clone(),
        };
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-12 {
            let cand: Vec<f64> = (0..n).map(|i| x[i] - t * step[i]).collect();
            let fc = f(&cand);
            if fc <= fx {
                x = cand;
                fx = fc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved || t * step.norm() < tol {
            break;
        }
    }
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..50 {
        let mut change = 0.0f64;
        for i in 0..n {
            let (mut lo, mut hi) = (x[i] - 1e-3, x[i] + 1e-3);
            let at = |v: f64| {
                let mut p = x.clone();
                p[i] = v;
                f(&p)
            };
            for _ in 0..80 {
                let a = hi - ratio * (hi - lo);
                let b = lo + ratio * (hi - lo);
                if at(a) < at(b) {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            let new = 0.5 * (lo + hi);
            change = change.max((new - x[i]).abs());
            x[i] = new;
        }
        if change < tol {
            break;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("convex minimizer diverged"));
    }
    let objective = f(&x);
    Ok(ConvexMinimum {
        point: x,
        objective,
        evaluations: evals.get(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_normal_reference_points() {
        assert!(inverse_normal_oracle(0.5).unwrap().value.abs() < 1e-9);
        assert!((inverse_normal_oracle(0.9875).unwrap().value - 2.241402727).abs() < 1e-8);
        assert!(inverse_normal_oracle(1.0).is_err());
        assert!(inverse_normal_oracle(0.0).is_err());
    }

    #[test]
    fn erfc_reference_points() {
        assert!((erfc_oracle(0.0) - 1.0).abs() < 1e-15);
        assert!((erfc_oracle(1.0) - 0.157_299_207_050_285_1).abs() < 1e-13);
    }

    #[test]
    fn pairwise_auc_examples() {
        assert_eq!(pairwise_auc_oracle(&[0.9, 0.8, 0.4, 0.2], &[1, 0, 1, 0]).unwrap().value, 0.75);
        assert_eq!(pairwise_auc_oracle(&[0.4; 4], &[1, 0, 1, 0]).unwrap().value, 0.5);
        assert_eq!(pairwise_auc_oracle(&[0.9, 0.1], &[1, 0]).unwrap().value, 1.0);
    }

    #[test]
    fn coverage_edge_cases() {
        assert_eq!(ci_coverage_oracle(0.05, 1.0, 50, 0.95, 100, 1).unwrap().value, 1.0);
        assert!(ci_coverage_oracle(0.05, 0.95, 1, 0.95, 200, 1).unwrap().value > 0.9);
    }

    #[test]
    fn zero_epsilon_is_rejected() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let r = retraining_influence_oracle(&x, &[0, 1, 0, 1], &[1, 1, 2, 2], 1, &[1.0], 0.0, 0.1);
        assert!(r.is_err());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let f = |v: &[f64]| (v[0] - 1.5).powi(2) + 2.0 * (v[1] + 0.5).powi(2) + v[0] * v[1];
        let m = minimize_convex(&f, &[0.0, 0.0], 1e-12).unwrap();
        // 2(a − 1.5) + b = 0 and 4(b + 0.5) + a = 0.
        assert!((m.point[0] - 2.0).abs() < 1e-6, "{:?}", m.point);
        assert!((m.point[1] + 1.0).abs() < 1e-6, "{:?}", m.point);
    }
}
