//! Platt scaling and the calibrated decision model.
//!
//! The calibrator follows the libsvm convention `P = 1 / (1 + exp(a·s + b))`,
//! i.e. `σ(−(a·s + b))`, so `(a, b) = (−1, 0)` is the identity on logits and a
//! positive slope reverses the ranking of the raw scores.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{
    clamp_prob, ensure_invertible_fit, logit, sigmoid, softplus, FitOptions, WeightedLogisticModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidCalibrator {
    pub slope_a: f64,
    pub offset_b: f64,
}

impl SigmoidCalibrator {
    pub fn identity() -> Self {
        SigmoidCalibrator {
            slope_a: -1.0,
            offset_b: 0.0,
        }
    }

    pub fn apply(&self, raw: f64) -> f64 {
        sigmoid(-(self.slope_a * raw + self.offset_b))
    }

    /// A positive slope maps higher raw scores to lower probabilities.
    pub fn is_anti_calibrated(&self) -> bool {
        self.slope_a > 0.0
    }
}

/// Fits `(a, b)` by Newton's method on the log-loss with smoothed targets
/// `(N₊ + 1)/(N₊ + 2)` and `1/(N₋ + 2)`.
///
/// Constant scores yield slope 0 and the offset whose probability equals the
/// smoothed prevalence `(N₊ + 1)/(N + 2)`.
pub fn fit_calibrator(raw_scores: &[f64], labels: &[u8]) -> Result<SigmoidCalibrator> {
    if raw_scores.len() != labels.len() {
        return Err(Error::data("scores and labels differ in length"));
    }
    if raw_scores.len() < 10 {
        return Err(Error::data("calibration needs at least 10 points"));
    }
    if raw_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::data("calibration scores must be finite"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::data("calibration needs both classes"));
    }
    let hi = (n_pos + 1.0) / (n_pos + 2.0);
    let lo = 1.0 / (n_neg + 2.0);
    let t: Vec<f64> = labels.iter().map(|&l| if l == 1 { hi } else { lo }).collect();

    let smin = raw_scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let smax = raw_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if smin == smax {
        let prevalence = (n_pos + 1.0) / (labels.len() as f64 + 2.0);
        return Ok(SigmoidCalibrator {
            slope_a: 0.0,
            offset_b: -logit(prevalence),
        });
    }

    // loss(f) = softplus(f) − (1 − t)·f with f = a·s + b.
    let loss = |a: f64, b: f64| -> f64 {
        raw_scores
            .iter()
            .zip(&t)
            .map(|(&s, &ti)| {
                let f = a * s + b;
                softplus(f) - (1.0 - ti) * f
            })
            .sum()
    };
    let mut a = 0.0;
    let mut b = ((n_neg + 1.0) / (n_pos + 1.0)).ln();
    let mut fval = loss(a, b);
    for _ in 0..200 {
        let (mut g1, mut g2, mut h11, mut h12, mut h22) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&s, &ti) in raw_scores.iter().zip(&t) {
            let p = sigmoid(a * s + b);
            let r = p - (1.0 - ti);
            let c = p * (1.0 - p);
            g1 += r * s;
            g2 += r;
            h11 += c * s * s;
            h12 += c * s;
            h22 += c;
        }
        if g1.abs() < 1e-10 && g2.abs() < 1e-10 {
            break;
        }
        h11 += 1e-12;
        h22 += 1e-12;
        let det = h11 * h22 - h12 * h12;
        let da = (h22 * g1 - h12 * g2) / det;
        let db = (-h12 * g1 + h11 * g2) / det;
        let mut step = 1.0;
        let mut moved = false;
        while step >= 1e-10 {
            let (na, nb) = (a - step * da, b - step * db);
            let nf = loss(na, nb);
            if nf < fval + 1e-4 * step * (g1 * -da + g2 * -db) {
                a = na;
                b = nb;
                fval = nf;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::numeric("calibrator fit produced non-finite parameters"));
    }
    Ok(SigmoidCalibrator {
        slope_a: a,
        offset_b: b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedDecisionModel {
    pub base: WeightedLogisticModel,
    pub calibrator: Option<SigmoidCalibrator>,
}

impl CalibratedDecisionModel {
    pub fn uncalibrated(base: WeightedLogisticModel) -> Self {
        CalibratedDecisionModel {
            base,
            calibrator: None,
        }
    }

    /// Calibrated, clamped class-1 probability.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        self.base.check_input(x)?;
        Ok(self.proba_unchecked(x))
    }

    pub fn proba_unchecked(&self, x: &[f64]) -> f64 {
        let z = self.base.logit_unchecked(x);
        self.proba_from_logit(z)
    }

    pub fn proba_from_logit(&self, z: f64) -> f64 {
        let p = match &self.calibrator {
            Some(c) => c.apply(z),
            None => sigmoid(z),
        };
        clamp_prob(p)
    }

    pub fn predict_matrix(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.base.feature_count {
            return Err(Error::data(format!(
                "dimension mismatch: expected {} features, got {}",
                self.base.feature_count,
                x.ncols()
            )));
        }
        Ok(self
            .base
            .logits(x)
            .into_iter()
            .map(|z| self.proba_from_logit(z))
            .collect())
    }
}

/// Fits the base model through the ridge grid, then optionally Platt-scales
/// it on the training logits.
pub fn fit_decision_model(
    x: &DMatrix<f64>,
    labels: &[u8],
    opts: &FitOptions,
    calibrate: bool,
) -> Result<CalibratedDecisionModel> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::data("training labels are single-class"));
    }
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let w = vec![1.0; y.len()];
    let (base, _) = ensure_invertible_fit(x, &y, &w, opts)?;
    let calibrator = if calibrate {
        Some(fit_calibrator(&base.logits(x), labels)?)
    } else {
        None
    };
    Ok(CalibratedDecisionModel { base, calibrator })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(theta: Vec<f64>) -> WeightedLogisticModel {
        WeightedLogisticModel {
            feature_count: theta.len() - 1,
            theta,
            ridge: 0.0,
            grad_norm_at_opt: 0.0,
        }
    }

    #[test]
    fn zero_theta_gives_one_half() {
        let m = CalibratedDecisionModel::uncalibrated(model(vec![0.0, 0.0, 0.0]));
        assert_eq!(m.predict_proba(&[3.0, -7.0]).unwrap(), 0.5);
    }

    #[test]
    fn identity_calibrator_leaves_logit_probability_unchanged() {
        let raw = model(vec![1.3, -0.2]);
        let cal = CalibratedDecisionModel {
            base: raw.clone(),
            calibrator: Some(SigmoidCalibrator::identity()),
        };
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let a = cal.predict_proba(&[x]).unwrap();
            let b = clamp_prob(sigmoid(raw.logit_unchecked(&[x])));
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn log_three_maps_to_three_quarters() {
        let m = CalibratedDecisionModel::uncalibrated(model(vec![1.0, 0.0]));
        assert!((m.predict_proba(&[3f64.ln()]).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn probabilities_are_clamped_inside_the_unit_interval() {
        let m = CalibratedDecisionModel::uncalibrated(model(vec![1.0, 0.0]));
        assert_eq!(m.predict_proba(&[1e6]).unwrap(), 1.0 - 1e-12);
        assert_eq!(m.predict_proba(&[-1e6]).unwrap(), 1e-12);
    }

    #[test]
    fn true_logits_calibrate_to_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s: Vec<f64> = (0..20000).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y: Vec<u8> = s
            .iter()
            .map(|&z| (rng.random::<f64>() < sigmoid(z)) as u8)
            .collect();
        let c = fit_calibrator(&s, &y).unwrap();
        for &z in &s {
            assert!((c.apply(z) - sigmoid(z)).abs() < 0.02, "{c:?}");
        }
        assert!(!c.is_anti_calibrated());
    }

    #[test]
    fn constant_scores_give_prevalence_intercept() {
        let s = vec![0.3; 12];
        let y: Vec<u8> = (0..12).map(|i| (i < 4) as u8).collect();
        let c = fit_calibrator(&s, &y).unwrap();
        assert_eq!(c.slope_a, 0.0);
        assert!((c.apply(0.3) - 5.0 / 14.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_and_short_inputs_fail() {
        assert!(fit_calibrator(&[0.1; 12], &[1; 12]).is_err());
        assert!(fit_calibrator(&[0.1, 0.2], &[0, 1]).is_err());
    }

    #[test]
    fn reversed_labels_produce_an_anti_calibrated_fit() {
        let s: Vec<f64> = (0..40).map(|i| i as f64 / 10.0 - 2.0).collect();
        let y: Vec<u8> = s.iter().map(|&z| (z < 0.3) as u8).collect();
        let c = fit_calibrator(&s, &y).unwrap();
        assert!(c.is_anti_calibrated());
    }
}
