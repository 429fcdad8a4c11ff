//! Weighted ridge logistic regression fitted by damped Newton iterations.
//!
//! The penalized risk is `Σ wᵢ ℓ(xᵢ, yᵢ, θ) + (λ/2)‖θ_noint‖²` with the
//! intercept stored last and left unpenalized.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge values tried in order by [`ensure_invertible_fit`].
pub const RIDGE_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0];

/// Condition-number ceiling for an accepted Hessian.
pub const MAX_CONDITION: f64 = 1e10;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-12;

const COEF_GUARD: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedLogisticModel {
    /// Coefficients followed by the intercept (length m + 1).
    pub theta: Vec<f64>,
    pub ridge: f64,
    pub grad_norm_at_opt: f64,
    pub feature_count: usize,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_dims(x: &DMatrix<f64>, y: &[f64], w: &[f64], theta_len: usize) -> Result<()> {
    let n = x.nrows();
    if y.len() != n || w.len() != n {
        return Err(Error::data(format!(
            "dimension mismatch: {} rows, {} labels, {} weights",
            n,
            y.len(),
            w.len()
        )));
    }
    if theta_len != x.ncols() + 1 {
        return Err(Error::data(format!(
            "dimension mismatch: theta has {theta_len} entries for {} features",
            x.ncols()
        )));
    }
    Ok(())
}

fn linear_predictor(theta: &[f64], x: &DMatrix<f64>, i: usize) -> f64 {
    let m = x.ncols();
    let mut z = theta[m];
    for j in 0..m {
        z += theta[j] * x[(i, j)];
    }
    z
}

/// Penalized weighted log-loss.
pub fn objective(theta: &[f64], x: &DMatrix<f64>, y: &[f64], w: &[f64], ridge: f64) -> f64 {
    let m = x.ncols();
    let mut f = 0.0;
    for i in 0..x.nrows() {
        let z = linear_predictor(theta, x, i);
        f += w[i] * (softplus(z) - y[i] * z);
    }
    let pen: f64 = theta[..m].iter().map(|t| t * t).sum();
    f + 0.5 * ridge * pen
}

/// `Σ wᵢ (σ(θᵀx̃ᵢ) − yᵢ) x̃ᵢ + λ [θ_noint; 0]`.
pub fn risk_gradient(
    theta: &[f64],
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    ridge: f64,
) -> Result<DVector<f64>> {
    check_dims(x, y, w, theta.len())?;
    let m = x.ncols();
    let mut g = DVector::zeros(m + 1);
    for i in 0..x.nrows() {
        let r = w[i] * (sigmoid(linear_predictor(theta, x, i)) - y[i]);
        for j in 0..m {
            g[j] += r * x[(i, j)];
        }
        g[m] += r;
    }
    for j in 0..m {
        g[j] += ridge * theta[j];
    }
    Ok(g)
}

/// `Σ wᵢ σᵢ(1 − σᵢ) x̃ᵢ x̃ᵢᵀ + λ diag(1, …, 1, 0)`.
pub fn risk_hessian(
    theta: &[f64],
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    ridge: f64,
) -> Result<DMatrix<f64>> {
    check_dims(x, y, w, theta.len())?;
    let m = x.ncols();
    let p = m + 1;
    let mut h = DMatrix::zeros(p, p);
    let mut xt = vec![0.0; p];
    for i in 0..x.nrows() {
        let s = sigmoid(linear_predictor(theta, x, i));
        let c = w[i] * s * (1.0 - s);
        for j in 0..m {
            xt[j] = x[(i, j)];
        }
        xt[m] = 1.0;
        for a in 0..p {
            let ca = c * xt[a];
            for b in 0..=a {
                h[(a, b)] += ca * xt[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
    for j in 0..m {
        h[(j, j)] += ridge;
    }
    Ok(h)
}

/// Ratio of extreme eigenvalues of a symmetric matrix; infinite when singular.
pub fn condition_number(h: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(h.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(g));
    }
    h.clone().lu().solve(g)
}

/// Minimizes the penalized weighted log-loss.
///
/// Fails when the gradient norm stays above `tol` after `max_iter` Newton
/// steps, when coefficients blow past the guard, or when `ridge = 0` and the
/// final coefficients separate the data (no finite minimizer exists).
pub fn fit(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    ridge: f64,
    opts: &FitOptions,
) -> Result<WeightedLogisticModel> {
    let m = x.ncols();
    check_dims(x, y, weights, m + 1)?;
    if x.nrows() == 0 {
        return Err(Error::data("cannot fit on zero rows"));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::usage(format!("ridge {ridge} must be finite and nonnegative")));
    }
    if let Some(i) = weights.iter().position(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::data(format!("row {i}: weight must be positive")));
    }
    if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::data(format!("row {i}: label must be 0 or 1")));
    }

    let mut theta = vec![0.0; m + 1];
    let mut f = objective(&theta, x, y, weights, ridge);
    let mut g = risk_gradient(&theta, x, y, weights, ridge)?;
    let mut converged = g.norm() <= opts.tol;
    let mut iter = 0;
    while !converged && iter < opts.max_iter {
        iter += 1;
        let h = risk_hessian(&theta, x, y, weights, ridge)?;
        let d = newton_direction(&h, &g)
            .ok_or_else(|| Error::numeric("singular Hessian during Newton iterations"))?;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(d.iter()).map(|(t, di)| t - step * di).collect();
            let fc = objective(&cand, x, y, weights, ridge);
            if fc.is_finite() && fc <= f + 1e-12 * f.abs() {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            break;
        };
        theta = cand;
        f = fc;
        if theta.iter().any(|t| !t.is_finite() || t.abs() > COEF_GUARD) {
            return Err(Error::numeric(
                "coefficients diverge; data may be separable without regularization",
            ));
        }
        g = risk_gradient(&theta, x, y, weights, ridge)?;
        converged = g.norm() <= opts.tol;
    }
    let grad_norm = g.norm();
    if !converged {
        return Err(Error::numeric(format!(
            "Newton did not converge after {iter} iterations (gradient norm {grad_norm:.3e})"
        )));
    }
    if ridge == 0.0 {
        let separated = (0..x.nrows()).all(|i| {
            let z = linear_predictor(&theta, x, i);
            (2.0 * y[i] - 1.0) * z > 0.0
        });
        if separated {
            return Err(Error::numeric(
                "coefficients diverge: the data are linearly separable and ridge is 0",
            ));
        }
    }
    Ok(WeightedLogisticModel {
        theta,
        ridge,
        grad_norm_at_opt: grad_norm,
        feature_count: m,
    })
}

/// Fits at the smallest ridge in [`RIDGE_GRID`] whose optimum Hessian has a
/// condition number below [`MAX_CONDITION`] and whose Newton run converged.
pub fn ensure_invertible_fit(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    opts: &FitOptions,
) -> Result<(WeightedLogisticModel, f64)> {
    let mut last = String::from("no grid value tried");
    for &ridge in RIDGE_GRID.iter() {
        match fit(x, y, weights, ridge, opts) {
            Ok(model) => {
                let h = risk_hessian(&model.theta, x, y, weights, ridge)?;
                let cond = condition_number(&h);
                if cond < MAX_CONDITION {
                    return Ok((model, ridge));
                }
                last = format!("condition number {cond:.3e} at ridge {ridge}");
            }
            Err(Error::Numeric(msg)) => last = format!("{msg} at ridge {ridge}"),
            Err(e) => return Err(e),
        }
    }
    Err(Error::numeric(format!(
        "no ridge in the grid gives an invertible Hessian; last: {last}"
    )))
}

impl WeightedLogisticModel {
    pub fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_count {
            return Err(Error::data(format!(
                "dimension mismatch: expected {} features, got {}",
                self.feature_count,
                x.len()
            )));
        }
        Ok(())
    }

    /// `θᵀ[x; 1]` without a dimension check.
    pub fn logit_unchecked(&self, x: &[f64]) -> f64 {
        let m = self.feature_count;
        let mut z = self.theta[m];
        for j in 0..m {
            z += self.theta[j] * x[j];
        }
        z
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.logit_unchecked(x))
    }

    /// Unclamped class-1 probability.
    pub fn prob_unclamped(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit_unchecked(x))
    }

    pub fn logits(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows()).map(|i| linear_predictor(&self.theta, x, i)).collect()
    }

    pub fn gradient(&self, x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<DVector<f64>> {
        risk_gradient(&self.theta, x, y, w, self.ridge)
    }

    pub fn hessian(&self, x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<DMatrix<f64>> {
        risk_hessian(&self.theta, x, y, w, self.ridge)
    }
}
