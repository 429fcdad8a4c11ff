//! The inferred high-consistency set and its confidence-interval check.
//!
//! A case joins the set when its calibrated decision probability is close to
//! a decision and the prediction is robust to reweighting any single expert:
//! `gate ∧ ((m1 > γ1 ∧ m2 > γ2) ∨ m3 < γ3)`, all inequalities strict.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::influence::InfluenceProfile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyParams {
    pub delta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Negligible-influence ceiling. Since `m3 ≥ 0`, a value of 0 switches
    /// the m3 branch off.
    pub gamma3: f64,
}

impl ConsistencyParams {
    pub fn new(delta: f64, gamma1: f64, gamma2: f64, gamma3: f64) -> Result<Self> {
        let p = ConsistencyParams {
            delta,
            gamma1,
            gamma2,
            gamma3,
        };
        p.validate()?;
        Ok(p)
    }

    /// `(0.05, ⌊k/2⌋, 1, off)`.
    pub fn conservative(k: usize) -> Self {
        ConsistencyParams {
            delta: 0.05,
            gamma1: (k / 2) as f64,
            gamma2: 1.0,
            gamma3: 0.0,
        }
    }

    /// `(0.05, 6, 0.95, 0.002)`, the values used for the synthetic scenarios.
    pub fn tested() -> Self {
        ConsistencyParams {
            delta: 0.05,
            gamma1: 6.0,
            gamma2: 0.95,
            gamma3: 0.002,
        }
    }

    /// Parses `δ,γ1,γ2,γ3`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::usage(format!("bad number `{t}` in parameter list")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 4 {
            return Err(Error::usage("parameter list needs four values: delta,gamma1,gamma2,gamma3"));
        }
        Self::new(vals[0], vals[1], vals[2], vals[3])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(Error::usage(format!("delta {} outside (0, 0.5)", self.delta)));
        }
        if !(self.gamma1 >= 0.0) || !self.gamma1.is_finite() {
            return Err(Error::usage(format!("gamma1 {} must be nonnegative", self.gamma1)));
        }
        if !(0.0..=1.0).contains(&self.gamma2) {
            return Err(Error::usage(format!("gamma2 {} outside [0, 1]", self.gamma2)));
        }
        if !(self.gamma3 >= 0.0) || !self.gamma3.is_finite() {
            return Err(Error::usage(format!("gamma3 {} must be nonnegative", self.gamma3)));
        }
        Ok(())
    }

    /// Influence part of the membership rule.
    pub fn robust(&self, m1: Option<f64>, m2: f64, m3: f64) -> bool {
        let spread = matches!(m1, Some(v) if v > self.gamma1) && m2 > self.gamma2;
        spread || m3 < self.gamma3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Membership {
    InA0,
    InA1,
    Outside,
}

impl Membership {
    pub fn is_member(self) -> bool {
        self != Membership::Outside
    }

    /// Decision implied by membership.
    pub fn direction(self) -> Option<u8> {
        match self {
            Membership::InA0 => Some(0),
            Membership::InA1 => Some(1),
            Membership::Outside => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub m1: Option<f64>,
    pub m2: f64,
    pub m3: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyAssignment {
    pub membership: Vec<Membership>,
    pub params_used: ConsistencyParams,
    pub metrics: Vec<CaseMetrics>,
}

impl ConsistencyAssignment {
    pub fn len(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }

    pub fn member_count(&self) -> usize {
        self.membership.iter().filter(|m| m.is_member()).count()
    }

    pub fn member_fraction(&self) -> f64 {
        if self.membership.is_empty() {
            0.0
        } else {
            self.member_count() as f64 / self.membership.len() as f64
        }
    }
}

/// Membership for one case. `decision = Some(d)` applies the training-time
/// gate `|p − d| < δ`; `None` applies `p < δ ∨ p > 1 − δ`.
pub fn classify(
    probability: f64,
    m1: Option<f64>,
    m2: f64,
    m3: f64,
    params: &ConsistencyParams,
    decision: Option<u8>,
) -> Membership {
    let gate = match decision {
        Some(d) => (probability - d as f64).abs() < params.delta,
        None => probability < params.delta || probability > 1.0 - params.delta,
    };
    if !gate || !params.robust(m1, m2, m3) {
        return Membership::Outside;
    }
    if probability > 0.5 {
        Membership::InA1
    } else {
        Membership::InA0
    }
}

/// Builds the assignment from calibrated f̂_h probabilities and influence profiles.
pub fn build_consistency_set(
    probabilities: &[f64],
    profiles: &[InfluenceProfile],
    params: &ConsistencyParams,
    decisions: Option<&[u8]>,
) -> Result<ConsistencyAssignment> {
    params.validate()?;
    if probabilities.len() != profiles.len() {
        return Err(Error::data("probabilities and profiles differ in length"));
    }
    if let Some(d) = decisions {
        if d.len() != probabilities.len() {
            return Err(Error::data("decisions and probabilities differ in length"));
        }
    }
    let mut membership = Vec::with_capacity(profiles.len());
    let mut metrics = Vec::with_capacity(profiles.len());
    for (i, (p, prof)) in probabilities.iter().zip(profiles).enumerate() {
        let d = decisions.map(|d| d[i]);
        membership.push(classify(*p, prof.m1, prof.m2, prof.m3, params, d));
        metrics.push(CaseMetrics {
            m1: prof.m1,
            m2: prof.m2,
            m3: prof.m3,
            probability: *p,
        });
    }
    Ok(ConsistencyAssignment {
        membership,
        params_used: *params,
        metrics,
    })
}

/// Re-applies `params` to stored per-case metrics.
pub fn reassign(
    assignment: &ConsistencyAssignment,
    params: &ConsistencyParams,
    decisions: Option<&[u8]>,
) -> Result<ConsistencyAssignment> {
    params.validate()?;
    let membership = assignment
        .metrics
        .iter()
        .enumerate()
        .map(|(i, c)| classify(c.probability, c.m1, c.m2, c.m3, params, decisions.map(|d| d[i])))
        .collect();
    Ok(ConsistencyAssignment {
        membership,
        params_used: *params,
        metrics: assignment.metrics.clone(),
    })
}

/// Critical value `Φ⁻¹(1 − α/2)` with `α = (1 − C)/2`.
pub fn critical_value(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::usage(format!("confidence {confidence} outside (0, 1)")));
    }
    let alpha = (1.0 - confidence) / 2.0;
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(1.0 - alpha / 2.0))
}

/// `1 − δ − z·σ/√|H|` with the critical value of [`critical_value`].
pub fn theorem1_lower_bound(delta: f64, sigma: f64, set_size: usize, confidence: f64) -> Result<f64> {
    if set_size == 0 {
        return Err(Error::usage("set size must be at least 1"));
    }
    if sigma < 0.0 {
        return Err(Error::usage("sigma must be nonnegative"));
    }
    let z = critical_value(confidence)?;
    Ok(1.0 - delta - z * sigma / (set_size as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum DirectionCheck {
    /// No holdout case fell in this direction.
    Unvalidatable,
    Checked {
        size: usize,
        agreement_rate: f64,
        sigma: f64,
        lower_bound: f64,
        passed: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub confidence: f64,
    pub a0: DirectionCheck,
    pub a1: DirectionCheck,
}

impl ValidationReport {
    /// True unless a checked direction fell below its bound.
    pub fn passed(&self) -> bool {
        [self.a0, self.a1]
            .iter()
            .all(|c| !matches!(c, DirectionCheck::Checked { passed: false, .. }))
    }
}

/// Agreement between holdout decisions and the direction of each member.
///
/// `sigma` is the standard deviation of the agreement indicator over the
/// members of that direction.
pub fn check_direction(
    agreements: &[bool],
    delta: f64,
    confidence: f64,
) -> Result<DirectionCheck> {
    if agreements.is_empty() {
        return Ok(DirectionCheck::Unvalidatable);
    }
    let n = agreements.len() as f64;
    let rate = agreements.iter().filter(|&&a| a).count() as f64 / n;
    let sigma = (rate * (1.0 - rate)).sqrt();
    let lower_bound = theorem1_lower_bound(delta, sigma, agreements.len(), confidence)?;
    Ok(DirectionCheck::Checked {
        size: agreements.len(),
        agreement_rate: rate,
        sigma,
        lower_bound,
        passed: rate > lower_bound,
    })
}

/// Recomputes prediction-time membership on a holdout fold and compares each
/// direction's decision-agreement rate with the lower bound.
pub fn validate_consistency(
    holdout_probabilities: &[f64],
    holdout_profiles: &[InfluenceProfile],
    holdout_decisions: &[u8],
    params: &ConsistencyParams,
    confidence: f64,
) -> Result<ValidationReport> {
    let assignment =
        build_consistency_set(holdout_probabilities, holdout_profiles, params, None)?;
    if holdout_decisions.len() != assignment.len() {
        return Err(Error::data("holdout decisions differ in length"));
    }
    let mut agree = [Vec::new(), Vec::new()];
    for (m, &d) in assignment.membership.iter().zip(holdout_decisions) {
        if let Some(dir) = m.direction() {
            agree[dir as usize].push(d == dir);
        }
    }
    Ok(ValidationReport {
        confidence,
        a0: check_direction(&agree[0], params.delta, confidence)?,
        a1: check_direction(&agree[1], params.delta, confidence)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_probability_is_outside() {
        for delta in [0.01, 0.2, 0.49] {
            let p = ConsistencyParams::new(delta, 0.0, 0.0, 1.0).unwrap();
            assert_eq!(classify(0.5, Some(3.0), 1.0, 0.0, &p, None), Membership::Outside);
            assert_eq!(classify(0.5, Some(3.0), 1.0, 0.0, &p, Some(1)), Membership::Outside);
        }
    }

    #[test]
    fn spread_branch_admits() {
        let p = ConsistencyParams::tested();
        assert_eq!(classify(0.99, Some(7.0), 0.97, 0.01, &p, None), Membership::InA1);
    }

    #[test]
    fn negligible_branch_admits() {
        let p = ConsistencyParams::tested();
        assert_eq!(classify(0.99, Some(2.0), 0.5, 0.001, &p, None), Membership::InA1);
        assert_eq!(classify(0.01, Some(2.0), 0.5, 0.001, &p, Some(0)), Membership::InA0);
    }

    #[test]
    fn training_gate_uses_the_decision() {
        let p = ConsistencyParams::tested();
        assert_eq!(classify(0.99, None, 0.0, 0.0, &p, Some(0)), Membership::Outside);
    }

    #[test]
    fn gamma3_zero_disables_the_negligible_branch() {
        let p = ConsistencyParams::new(0.05, 6.0, 0.95, 0.0).unwrap();
        assert_eq!(classify(0.999, None, 0.0, 0.0, &p, None), Membership::Outside);
    }

    #[test]
    fn parameter_validation() {
        assert!(ConsistencyParams::new(0.5, 1.0, 0.5, 0.0).is_err());
        assert!(ConsistencyParams::new(0.05, -1.0, 0.5, 0.0).is_err());
        assert!(ConsistencyParams::new(0.05, 1.0, 1.5, 0.0).is_err());
        assert!(ConsistencyParams::parse_list("0.05,6,0.95").is_err());
        assert_eq!(
            ConsistencyParams::parse_list("0.05, 6, 0.95, 0.002").unwrap(),
            ConsistencyParams::tested()
        );
    }

    #[test]
    fn zero_sigma_bound_is_one_minus_delta() {
        assert_eq!(theorem1_lower_bound(0.05, 0.0, 10, 0.95).unwrap(), 0.95);
    }

    #[test]
    fn bound_approaches_one_minus_delta_for_large_sets() {
        let b = theorem1_lower_bound(0.05, 0.5, 100_000_000, 0.95).unwrap();
        assert!((b - 0.95).abs() < 1e-3);
    }

    #[test]
    fn deterministic_members_pass_validation() {
        let check = check_direction(&[true; 50], 0.05, 0.95).unwrap();
        assert!(matches!(check, DirectionCheck::Checked { passed: true, .. }));
        assert_eq!(check_direction(&[], 0.05, 0.95).unwrap(), DirectionCheck::Unvalidatable);
    }
}
