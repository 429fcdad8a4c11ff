//! Amalgamated labels and the three ways of leveraging the consistency set:
//! a model trained on amalgamated labels, a hybrid switch, and a deferral model.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibration::{fit_decision_model, CalibratedDecisionModel};
use crate::consistency::{classify, ConsistencyAssignment, ConsistencyParams, Membership};
use crate::data::DecisionDataset;
use crate::error::{Error, Result};
use crate::glm::FitOptions;
use crate::influence::InfluenceEngine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AmalgamationMode {
    /// Both directions of the set.
    #[default]
    Full,
    /// Only members predicted toward decision 1.
    PositiveOnly,
    /// Only members predicted toward decision 0.
    NegativeOnly,
}

impl AmalgamationMode {
    pub fn includes(self, m: Membership) -> bool {
        match (self, m) {
            (_, Membership::Outside) => false,
            (AmalgamationMode::Full, _) => true,
            (AmalgamationMode::PositiveOnly, Membership::InA1) => true,
            (AmalgamationMode::NegativeOnly, Membership::InA0) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    FromDecision,
    FromOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmalgamationPlan {
    /// `None` for a censored outcome outside the amalgamated set; such cases
    /// are left out of training views.
    pub labels: Vec<Option<u8>>,
    pub provenance: Vec<Provenance>,
    pub mode: AmalgamationMode,
}

impl AmalgamationPlan {
    pub fn usable_indices(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i].is_some()).collect()
    }

    pub fn from_decision_count(&self) -> usize {
        self.provenance
            .iter()
            .filter(|&&p| p == Provenance::FromDecision)
            .count()
    }
}

/// `Y^A = D` on the selected part of the set and the observed `Y` elsewhere.
pub fn amalgamate(
    ds: &DecisionDataset,
    assignment: &ConsistencyAssignment,
    mode: AmalgamationMode,
) -> Result<AmalgamationPlan> {
    amalgamate_labels(&ds.decisions, &ds.outcomes, assignment, mode)
}

pub fn amalgamate_labels(
    decisions: &[u8],
    outcomes: &[Option<u8>],
    assignment: &ConsistencyAssignment,
    mode: AmalgamationMode,
) -> Result<AmalgamationPlan> {
    let n = decisions.len();
    if outcomes.len() != n || assignment.len() != n {
        return Err(Error::data("amalgamation inputs differ in length"));
    }
    let mut labels = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for i in 0..n {
        if mode.includes(assignment.membership[i]) {
            labels.push(Some(decisions[i]));
            provenance.push(Provenance::FromDecision);
        } else {
            labels.push(outcomes[i]);
            provenance.push(Provenance::FromOutcome);
        }
    }
    Ok(AmalgamationPlan {
        labels,
        provenance,
        mode,
    })
}

/// Fits a model on the rows whose label is `Some`.
pub fn fit_on_labels(
    x: &DMatrix<f64>,
    labels: &[Option<u8>],
    opts: &FitOptions,
    calibrate: bool,
) -> Result<CalibratedDecisionModel> {
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    if idx.is_empty() {
        return Err(Error::data("training view is empty"));
    }
    let xs = x.select_rows(&idx);
    let y: Vec<u8> = idx.iter().map(|&i| labels[i].unwrap()).collect();
    fit_decision_model(&xs, &y, opts, calibrate)
}

pub fn fit_amalgam_model(
    x: &DMatrix<f64>,
    plan: &AmalgamationPlan,
    opts: &FitOptions,
    calibrate: bool,
) -> Result<CalibratedDecisionModel> {
    fit_on_labels(x, &plan.labels, opts, calibrate)
}

/// Prediction-time membership: the probability gate on f̂_h plus the
/// influence metrics computed against the training-fitted f̂_h.
#[derive(Debug, Clone)]
pub struct MembershipRule {
    pub decision_model: CalibratedDecisionModel,
    pub engine: InfluenceEngine,
    pub params: ConsistencyParams,
}

impl MembershipRule {
    pub fn membership(&self, x: &[f64]) -> Result<Membership> {
        let p = self.decision_model.predict_proba(x)?;
        let prof = self.engine.profile_with_prob(x, p)?;
        Ok(classify(p, prof.m1, prof.m2, prof.m3, &self.params, None))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Prediction {
    Probability(f64),
    Defer,
}

impl Prediction {
    pub fn probability(self) -> Option<f64> {
        match self {
            Prediction::Probability(p) => Some(p),
            Prediction::Defer => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    Amalgam,
    Hybrid,
    Deferral,
}

#[derive(Debug, Clone)]
pub enum LeveragedPredictor {
    Amalgam {
        model: CalibratedDecisionModel,
    },
    Hybrid {
        rule: MembershipRule,
        /// f̂_Y, or f̂_{Y¬A} when `retrained`.
        outcome_model: CalibratedDecisionModel,
        retrained: bool,
    },
    Deferral {
        rule: MembershipRule,
        /// f̂_{Y¬A}, fitted only on training cases outside the set.
        outcome_model: CalibratedDecisionModel,
    },
}

impl LeveragedPredictor {
    pub fn kind(&self) -> PredictorKind {
        match self {
            LeveragedPredictor::Amalgam { .. } => PredictorKind::Amalgam,
            LeveragedPredictor::Hybrid { .. } => PredictorKind::Hybrid,
            LeveragedPredictor::Deferral { .. } => PredictorKind::Deferral,
        }
    }

    pub fn rule(&self) -> Option<&MembershipRule> {
        match self {
            LeveragedPredictor::Amalgam { .. } => None,
            LeveragedPredictor::Hybrid { rule, .. } | LeveragedPredictor::Deferral { rule, .. } => {
                Some(rule)
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        match self {
            LeveragedPredictor::Amalgam { model } => {
                Ok(Prediction::Probability(model.predict_proba(x)?))
            }
            LeveragedPredictor::Hybrid { .. } => Ok(Prediction::Probability(hybrid_predict(self, x)?)),
            LeveragedPredictor::Deferral { .. } => deferral_predict(self, x),
        }
    }
}

/// f̂_h(x) for members of the set, the outcome model otherwise.
pub fn hybrid_predict(pred: &LeveragedPredictor, x: &[f64]) -> Result<f64> {
    match pred {
        LeveragedPredictor::Hybrid {
            rule,
            outcome_model,
            ..
        } => {
            if rule.membership(x)?.is_member() {
                rule.decision_model.predict_proba(x)
            } else {
                outcome_model.predict_proba(x)
            }
        }
        _ => Err(Error::usage("hybrid_predict needs a hybrid predictor")),
    }
}

/// `Defer` for members of the set, f̂_{Y¬A}(x) otherwise.
pub fn deferral_predict(pred: &LeveragedPredictor, x: &[f64]) -> Result<Prediction> {
    match pred {
        LeveragedPredictor::Deferral {
            rule,
            outcome_model,
        } => {
            if rule.membership(x)?.is_member() {
                Ok(Prediction::Defer)
            } else {
                Ok(Prediction::Probability(outcome_model.predict_proba(x)?))
            }
        }
        _ => Err(Error::usage("deferral_predict needs a deferral predictor")),
    }
}

/// Labels for f̂_{Y¬A}: observed outcomes of cases outside the set.
pub fn outside_set_labels(
    outcomes: &[Option<u8>],
    assignment: &ConsistencyAssignment,
    mode: AmalgamationMode,
) -> Vec<Option<u8>> {
    outcomes
        .iter()
        .zip(&assignment.membership)
        .map(|(y, m)| if mode.includes(*m) { None } else { *y })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Report {
    /// Cases where both `Y` and `Y^A` are defined.
    pub evaluated: usize,
    pub set_size: usize,
    pub agreement_amalgam_in_set: f64,
    pub agreement_outcome_in_set: f64,
    pub premise_holds: bool,
    pub mean_error_amalgam: f64,
    pub mean_error_outcome: f64,
    /// `None` when the premise fails and the conclusion is not asserted.
    pub conclusion_holds: Option<bool>,
}

/// Compares `mean |Y^c − Y^A|` with `mean |Y^c − Y|` on cases where both
/// labels exist. The comparison is done on integer error counts.
pub fn theorem3_check(
    y_construct: &[u8],
    y_observed: &[Option<u8>],
    plan: &AmalgamationPlan,
) -> Result<Theorem3Report> {
    let n = y_construct.len();
    if y_observed.len() != n || plan.labels.len() != n {
        return Err(Error::data("theorem check inputs differ in length"));
    }
    let (mut evaluated, mut in_set) = (0usize, 0usize);
    let (mut agree_a, mut agree_y) = (0usize, 0usize);
    let (mut err_a, mut err_y) = (0usize, 0usize);
    for i in 0..n {
        let (Some(y), Some(ya)) = (y_observed[i], plan.labels[i]) else {
            continue;
        };
        evaluated += 1;
        let c = y_construct[i];
        err_a += (c != ya) as usize;
        err_y += (c != y) as usize;
        if plan.provenance[i] == Provenance::FromDecision {
            in_set += 1;
            agree_a += (c == ya) as usize;
            agree_y += (c == y) as usize;
        }
    }
    let premise_holds = agree_a >= agree_y;
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Theorem3Report {
        evaluated,
        set_size: in_set,
        agreement_amalgam_in_set: frac(agree_a, in_set),
        agreement_outcome_in_set: frac(agree_y, in_set),
        premise_holds,
        mean_error_amalgam: frac(err_a, evaluated),
        mean_error_outcome: frac(err_y, evaluated),
        conclusion_holds: premise_holds.then_some(err_a <= err_y),
    })
}
