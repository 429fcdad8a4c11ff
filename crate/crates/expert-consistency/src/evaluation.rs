//! Metrics and the Monte-Carlo evaluation harness.
//!
//! Each repetition splits the data, fits every requested model on the
//! training fold and scores the test fold. Per-repetition metrics are reduced
//! in repetition order into a mean and a normal-approximation 95% half-width.
//!
//! Deferred cases take the observed decision `D` as their score, since the
//! case is handed back to the expert.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amalgamation::{
    amalgamate, fit_amalgam_model, fit_on_labels, outside_set_labels, AmalgamationMode,
    AmalgamationPlan, LeveragedPredictor, MembershipRule,
};
use crate::calibration::{fit_decision_model, CalibratedDecisionModel};
use crate::consistency::{
    build_consistency_set, validate_consistency, ConsistencyAssignment, ConsistencyParams,
    ValidationReport,
};
use crate::data::{monte_carlo_split, DecisionDataset};
use crate::error::{Error, Result};
use crate::glm::FitOptions;
use crate::influence::{InfluenceEngine, InfluenceProfile, InfluenceScale};

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::data(format!("{what} differ in length ({a} vs {b})")));
    }
    Ok(())
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::data("scores must be finite"));
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half, from average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), "scores and labels")?;
    check_finite(scores)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled ranks keep every quantity an integer.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j) as u64;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                twice_rank_sum += twice_avg;
            }
        }
        i = j;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Screen-out ordering: ascending score, then ascending case id. Returns the
/// threshold (score of the last screened-out case) and the screened-out mask.
pub fn screenout_threshold(scores: &[f64], case_ids: &[u64], rate: f64) -> Result<(f64, Vec<bool>)> {
    check_lengths(scores.len(), case_ids.len(), "scores and case ids")?;
    check_finite(scores)?;
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::usage(format!("screen-out rate {rate} outside (0, 1)")));
    }
    if scores.is_empty() {
        return Err(Error::data("no cases to screen"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then(case_ids[a].cmp(&case_ids[b]))
    });
    let count = (rate * scores.len() as f64).round() as usize;
    let mut out = vec![false; scores.len()];
    for &i in &order[..count] {
        out[i] = true;
    }
    let tau = if count == 0 {
        f64::NEG_INFINITY
    } else {
        scores[order[count - 1]]
    };
    Ok((tau, out))
}

fn positions(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

fn tnr_from_mask(screened_out: &[bool], labels: &[u8], group_mask: &[bool]) -> Result<f64> {
    let (mut neg, mut tn) = (0usize, 0usize);
    for i in 0..labels.len() {
        if group_mask[i] && labels[i] == 0 {
            neg += 1;
            tn += screened_out[i] as usize;
        }
    }
    if neg == 0 {
        return Err(Error::data("no negatives in group"));
    }
    Ok(tn as f64 / neg as f64)
}

fn npv_from_mask(screened_out: &[bool], labels: &[u8], group_mask: &[bool]) -> Result<f64> {
    let (mut out, mut tn) = (0usize, 0usize);
    for i in 0..labels.len() {
        if group_mask[i] && screened_out[i] {
            out += 1;
            tn += (labels[i] == 0) as usize;
        }
    }
    if out == 0 {
        return Err(Error::data("no screened-out cases in group"));
    }
    Ok(tn as f64 / out as f64)
}

/// Among `group_mask` rows, the share of true negatives screened out when the
/// lowest-scored `rate` share of all rows is screened out. Row position is the
/// case id for tie-breaking.
pub fn tnr_at_screenout(scores: &[f64], labels: &[u8], group_mask: &[bool], rate: f64) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), "scores and labels")?;
    check_lengths(scores.len(), group_mask.len(), "scores and group mask")?;
    let (_, out) = screenout_threshold(scores, &positions(scores.len()), rate)?;
    tnr_from_mask(&out, labels, group_mask)
}

/// Among screened-out `group_mask` rows, the share that are true negatives.
pub fn npv_at_screenout(scores: &[f64], labels: &[u8], group_mask: &[bool], rate: f64) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), "scores and labels")?;
    check_lengths(scores.len(), group_mask.len(), "scores and group mask")?;
    let (_, out) = screenout_threshold(scores, &positions(scores.len()), rate)?;
    npv_from_mask(&out, labels, group_mask)
}

/// Precision among the `⌈p·n_eligible⌉` highest-scored eligible rows.
pub fn precision_at_top(scores: &[f64], labels: &[u8], p: f64, restrict_mask: Option<&[bool]>) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), "scores and labels")?;
    check_finite(scores)?;
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::usage(format!("top share {p} outside (0, 1]")));
    }
    let mut eligible: Vec<usize> = match restrict_mask {
        Some(mask) => {
            check_lengths(scores.len(), mask.len(), "scores and mask")?;
            (0..scores.len()).filter(|&i| mask[i]).collect()
        }
        None => (0..scores.len()).collect(),
    };
    if eligible.is_empty() {
        return Err(Error::data("no eligible cases"));
    }
    eligible.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let top = ((p * eligible.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let top = top.min(eligible.len());
    let hits = eligible[..top].iter().filter(|&&i| labels[i] == 1).count();
    Ok(hits as f64 / top as f64)
}

/// `mean(score > τ | group) − mean(score > τ | not group)`.
pub fn dem_parity_gap(scores: &[f64], group_mask: &[bool], tau: f64) -> Result<f64> {
    check_lengths(scores.len(), group_mask.len(), "scores and group mask")?;
    let (mut g, mut gp, mut o, mut op) = (0usize, 0usize, 0usize, 0usize);
    for (s, &m) in scores.iter().zip(group_mask) {
        if m {
            g += 1;
            gp += (*s > tau) as usize;
        } else {
            o += 1;
            op += (*s > tau) as usize;
        }
    }
    if g == 0 || o == 0 {
        return Err(Error::data("demographic parity needs both the group and its complement"));
    }
    Ok(gp as f64 / g as f64 - op as f64 / o as f64)
}

pub fn gap_shift(scores_a: &[f64], tau_a: f64, scores_y: &[f64], tau_y: f64, group_mask: &[bool]) -> Result<f64> {
    Ok(dem_parity_gap(scores_a, group_mask, tau_a)? - dem_parity_gap(scores_y, group_mask, tau_y)?)
}

/// Which fitted model a report row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// f̂_h, the calibrated model of the expert decision.
    Decision,
    /// f̂_Y, trained on observed outcomes.
    Outcome,
    /// f̂_A, trained on amalgamated labels.
    Amalgam,
    /// f̂_h inside the set, f̂_Y outside.
    Hybrid,
    /// f̂_h inside the set, f̂_{Y¬A} outside.
    HybridRetrained,
    /// Defers inside the set, f̂_{Y¬A} outside.
    Deferral,
}

impl ModelKind {
    pub const STANDARD: [ModelKind; 5] = [
        ModelKind::Decision,
        ModelKind::Outcome,
        ModelKind::Amalgam,
        ModelKind::Hybrid,
        ModelKind::Deferral,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Decision => "f_h",
            ModelKind::Outcome => "f_Y",
            ModelKind::Amalgam => "f_A",
            ModelKind::Hybrid => "f_hyb",
            ModelKind::HybridRetrained => "f_hyb_retrained",
            ModelKind::Deferral => "f_defer",
        }
    }
}

/// How the models of one repetition are fitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub params: ConsistencyParams,
    pub mode: AmalgamationMode,
    pub scale: InfluenceScale,
    pub calibrate: bool,
    pub fit: FitOptions,
    /// Confidence level of the holdout check of the consistency set.
    pub confidence: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            params: ConsistencyParams::tested(),
            mode: AmalgamationMode::Full,
            scale: InfluenceScale::MeanRisk,
            calibrate: true,
            fit: FitOptions::default(),
            confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub repetitions: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub screenout_rate: f64,
    pub precision_grid: Vec<f64>,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            repetitions: 10,
            train_fraction: 0.75,
            seed: 0,
            screenout_rate: 0.3,
            precision_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5, 1.0],
        }
    }
}

/// Everything fitted on one training fold.
#[derive(Debug, Clone)]
pub struct FittedModels {
    pub decision: CalibratedDecisionModel,
    pub engine: InfluenceEngine,
    pub train_profiles: Vec<InfluenceProfile>,
    pub assignment: ConsistencyAssignment,
    pub plan: AmalgamationPlan,
    pub outcome: CalibratedDecisionModel,
    pub amalgam: CalibratedDecisionModel,
    /// f̂_{Y¬A}; an error when its training view is unusable.
    pub outside: std::result::Result<CalibratedDecisionModel, String>,
    pub settings: FitSettings,
}

impl FittedModels {
    pub fn rule(&self) -> MembershipRule {
        MembershipRule {
            decision_model: self.decision.clone(),
            engine: self.engine.clone(),
            params: self.settings.params,
        }
    }

    /// The leveraging predictor for `kind`; `None` for f̂_h and f̂_Y.
    pub fn predictor(&self, kind: ModelKind) -> Result<Option<LeveragedPredictor>> {
        let outside = || {
            self.outside
                .clone()
                .map_err(|e| Error::data(format!("outside-set outcome model: {e}")))
        };
        Ok(match kind {
            ModelKind::Decision | ModelKind::Outcome => None,
            ModelKind::Amalgam => Some(LeveragedPredictor::Amalgam {
                model: self.amalgam.clone(),
            }),
            ModelKind::Hybrid => Some(LeveragedPredictor::Hybrid {
                rule: self.rule(),
                outcome_model: self.outcome.clone(),
                retrained: false,
            }),
            ModelKind::HybridRetrained => Some(LeveragedPredictor::Hybrid {
                rule: self.rule(),
                outcome_model: outside()?,
                retrained: true,
            }),
            ModelKind::Deferral => Some(LeveragedPredictor::Deferral {
                rule: self.rule(),
                outcome_model: outside()?,
            }),
        })
    }
}

fn rows(ds: &DecisionDataset) -> Vec<Vec<f64>> {
    (0..ds.n()).map(|i| ds.row(i)).collect()
}

/// Calibrated f̂_h probabilities and influence profiles, in row order.
pub fn profile_rows(
    decision: &CalibratedDecisionModel,
    engine: &InfluenceEngine,
    ds: &DecisionDataset,
) -> Result<(Vec<f64>, Vec<InfluenceProfile>)> {
    let probs = decision.predict_matrix(&ds.features)?;
    let profiles = rows(ds)
        .par_iter()
        .zip(probs.par_iter())
        .map(|(x, &p)| engine.profile_with_prob(x, p))
        .collect::<Result<Vec<_>>>()?;
    Ok((probs, profiles))
}

/// Fits f̂_h, the influence engine, the consistency set and the outcome
/// models on `train`.
pub fn fit_models(train: &DecisionDataset, settings: &FitSettings) -> Result<FittedModels> {
    let decision = fit_decision_model(&train.features, &train.decisions, &settings.fit, settings.calibrate)
        .map_err(|e| e.at_stage("fit decision model"))?;
    let engine = InfluenceEngine::new(
        &decision.base,
        &train.features,
        &train.decisions,
        &train.expert_ids,
        train.k(),
        settings.scale,
    )
    .map_err(|e| e.at_stage("influence"))?;
    let (probs, train_profiles) =
        profile_rows(&decision, &engine, train).map_err(|e| e.at_stage("influence"))?;
    let assignment = build_consistency_set(&probs, &train_profiles, &settings.params, Some(&train.decisions))
        .map_err(|e| e.at_stage("consistency"))?;
    let plan = amalgamate(train, &assignment, settings.mode).map_err(|e| e.at_stage("amalgamate"))?;
    let outcome = fit_on_labels(&train.features, &train.outcomes, &settings.fit, settings.calibrate)
        .map_err(|e| e.at_stage("fit outcome model"))?;
    let amalgam = fit_amalgam_model(&train.features, &plan, &settings.fit, settings.calibrate)
        .map_err(|e| e.at_stage("fit amalgam model"))?;
    let outside_labels = outside_set_labels(&train.outcomes, &assignment, settings.mode);
    let outside = fit_on_labels(&train.features, &outside_labels, &settings.fit, settings.calibrate)
        .map_err(|e| e.to_string());
    Ok(FittedModels {
        decision,
        engine,
        train_profiles,
        assignment,
        plan,
        outcome,
        amalgam,
        outside,
        settings: *settings,
    })
}

/// Scores of one model on a test fold; deferred rows carry `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelScores {
    pub scores: Vec<f64>,
    pub deferred: Vec<bool>,
    pub can_defer: bool,
}

/// Scores every requested model on `test`. Membership is computed once and
/// shared by the hybrid and deferral models.
pub fn score_models(
    fitted: &FittedModels,
    test: &DecisionDataset,
    kinds: &[ModelKind],
) -> Result<(Vec<Result<ModelScores>>, ConsistencyAssignment)> {
    let (p_h, profiles) = profile_rows(&fitted.decision, &fitted.engine, test)?;
    let membership = build_consistency_set(&p_h, &profiles, &fitted.settings.params, None)?;
    let n = test.n();
    let not_deferred = vec![false; n];
    let outside_scores = match &fitted.outside {
        Ok(m) => Ok(m.predict_matrix(&test.features)?),
        Err(e) => Err(e.clone()),
    };
    let mut out = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let scored: Result<ModelScores> = match kind {
            ModelKind::Decision => Ok(ModelScores {
                scores: p_h.clone(),
                deferred: not_deferred.clone(),
                can_defer: false,
            }),
            ModelKind::Outcome => fitted.outcome.predict_matrix(&test.features).map(|s| ModelScores {
                scores: s,
                deferred: not_deferred.clone(),
                can_defer: false,
            }),
            ModelKind::Amalgam => fitted.amalgam.predict_matrix(&test.features).map(|s| ModelScores {
                scores: s,
                deferred: not_deferred.clone(),
                can_defer: false,
            }),
            ModelKind::Hybrid => fitted.outcome.predict_matrix(&test.features).map(|y| ModelScores {
                scores: (0..n)
                    .map(|i| if membership.membership[i].is_member() { p_h[i] } else { y[i] })
                    .collect(),
                deferred: not_deferred.clone(),
                can_defer: false,
            }),
            ModelKind::HybridRetrained | ModelKind::Deferral => match &outside_scores {
                Err(e) => Err(Error::data(format!("outside-set outcome model: {e}"))),
                Ok(y) => {
                    let defer = kind == ModelKind::Deferral;
                    let mut scores = Vec::with_capacity(n);
                    let mut deferred = Vec::with_capacity(n);
                    for i in 0..n {
                        let member = membership.membership[i].is_member();
                        scores.push(match (member, defer) {
                            (true, true) => test.decisions[i] as f64,
                            (true, false) => p_h[i],
                            (false, _) => y[i],
                        });
                        deferred.push(member && defer);
                    }
                    Ok(ModelScores {
                        scores,
                        deferred,
                        can_defer: defer,
                    })
                }
            },
        };
        out.push(scored);
    }
    Ok((out, membership))
}

/// Metrics of one model in one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub auc: f64,
    pub tnr_by_group: BTreeMap<String, f64>,
    pub npv_by_group: BTreeMap<String, f64>,
    pub precision_curve: Vec<(f64, f64)>,
    pub gap_dp: Option<f64>,
    /// `gap_dp` minus the gap of f̂_Y in the same repetition.
    pub gap_shift: Option<f64>,
    /// Share of test cases not deferred (deferral models only).
    pub coverage: Option<f64>,
    /// AUC over non-deferred cases only (deferral models only).
    pub auc_non_deferred: Option<f64>,
}

fn group_key(g: u8) -> String {
    format!("group={g}")
}

struct EvalContext<'a> {
    test: &'a DecisionDataset,
    labels: Vec<u8>,
    eval_rows: Vec<usize>,
    protocol: &'a Protocol,
}

impl EvalContext<'_> {
    fn new<'a>(test: &'a DecisionDataset, protocol: &'a Protocol) -> EvalContext<'a> {
        // Construct labels when known, otherwise observed outcomes.
        let (labels, eval_rows) = match &test.construct {
            Some(c) => (c.clone(), (0..test.n()).collect()),
            None => {
                let rows: Vec<usize> = (0..test.n()).filter(|&i| test.outcomes[i].is_some()).collect();
                (test.outcomes.iter().map(|o| o.unwrap_or(0)).collect(), rows)
            }
        };
        EvalContext {
            test,
            labels,
            eval_rows,
            protocol,
        }
    }

    fn metrics(&self, s: &ModelScores) -> Result<(RunMetrics, f64)> {
        let sub = |v: &[f64]| -> Vec<f64> { self.eval_rows.iter().map(|&i| v[i]).collect() };
        let sub_l: Vec<u8> = self.eval_rows.iter().map(|&i| self.labels[i]).collect();
        let sub_ids: Vec<u64> = self.eval_rows.iter().map(|&i| self.test.case_ids[i]).collect();
        let scores = sub(&s.scores);
        let auc_v = auc(&scores, &sub_l)?;
        let (tau, out) = screenout_threshold(&scores, &sub_ids, self.protocol.screenout_rate)?;
        let mut tnr_by_group = BTreeMap::new();
        let mut npv_by_group = BTreeMap::new();
        let mut gap_dp = None;
        if let Some(group) = &self.test.group {
            let g: Vec<u8> = self.eval_rows.iter().map(|&i| group[i]).collect();
            let mut values: Vec<u8> = g.clone();
            values.sort_unstable();
            values.dedup();
            for v in values {
                let mask: Vec<bool> = g.iter().map(|&x| x == v).collect();
                if let Ok(t) = tnr_from_mask(&out, &sub_l, &mask) {
                    tnr_by_group.insert(group_key(v), t);
                }
                if let Ok(t) = npv_from_mask(&out, &sub_l, &mask) {
                    npv_by_group.insert(group_key(v), t);
                }
            }
            let minority: Vec<bool> = g.iter().map(|&x| x == 1).collect();
            gap_dp = dem_parity_gap(&scores, &minority, tau).ok();
        }
        // Precision among expert-screened-in cases with an observed outcome.
        let eligible: Vec<bool> = (0..self.test.n())
            .map(|i| self.test.decisions[i] == 1 && self.test.outcomes[i].is_some())
            .collect();
        let observed: Vec<u8> = self.test.outcomes.iter().map(|o| o.unwrap_or(0)).collect();
        let precision_curve = if eligible.iter().any(|&e| e) {
            self.protocol
                .precision_grid
                .iter()
                .map(|&p| precision_at_top(&s.scores, &observed, p, Some(&eligible)).map(|v| (p, v)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let (coverage, auc_non_deferred) = if s.can_defer {
            let kept: Vec<usize> = self.eval_rows.iter().copied().filter(|&i| !s.deferred[i]).collect();
            let cov = kept.len() as f64 / self.eval_rows.len() as f64;
            let ks: Vec<f64> = kept.iter().map(|&i| s.scores[i]).collect();
            let kl: Vec<u8> = kept.iter().map(|&i| self.labels[i]).collect();
            (Some(cov), auc(&ks, &kl).ok())
        } else {
            (None, None)
        };
        Ok((
            RunMetrics {
                auc: auc_v,
                tnr_by_group,
                npv_by_group,
                precision_curve,
                gap_dp,
                gap_shift: None,
                coverage,
                auc_non_deferred,
            },
            tau,
        ))
    }
}

/// Diagnostics of one repetition that are not tied to a single model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDetail {
    pub repetition: usize,
    pub split_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub decision_theta: Vec<f64>,
    pub decision_ridge: f64,
    pub train_member_fraction: f64,
    pub amalgamated_fraction: f64,
    pub test_member_fraction: f64,
    pub holdout_validation: Option<ValidationReport>,
}

#[derive(Debug, Clone)]
pub struct RepetitionResult {
    pub detail: RunDetail,
    pub per_model: Vec<std::result::Result<RunMetrics, String>>,
}

/// Fits and scores one repetition on `ds` with the split drawn from `split_seed`.
pub fn evaluate_repetition(
    ds: &DecisionDataset,
    repetition: usize,
    split_seed: u64,
    kinds: &[ModelKind],
    protocol: &Protocol,
    settings: &FitSettings,
) -> Result<RepetitionResult> {
    let split = monte_carlo_split(ds, protocol.train_fraction, split_seed, ds.linkage.as_deref())
        .map_err(|e| e.at_stage("split"))?;
    let train = ds.subset(&split.train_indices);
    let test = ds.subset(&split.test_indices);
    let fitted = fit_models(&train, settings)?;
    let (scored, test_membership) = score_models(&fitted, &test, kinds).map_err(|e| e.at_stage("score"))?;
    let holdout_validation = {
        let (p, prof) = profile_rows(&fitted.decision, &fitted.engine, &test)?;
        validate_consistency(&p, &prof, &test.decisions, &settings.params, settings.confidence).ok()
    };
    let ctx = EvalContext::new(&test, protocol);

    // f̂_Y reference gap for the shift, computed whether or not f̂_Y is listed.
    let reference_gap = if test.group.is_some() {
        let y = ModelScores {
            scores: fitted.outcome.predict_matrix(&test.features)?,
            deferred: vec![false; test.n()],
            can_defer: false,
        };
        ctx.metrics(&y).ok().and_then(|(m, _)| m.gap_dp)
    } else {
        None
    };
    let per_model = scored
        .into_iter()
        .map(|s| {
            let s = s.map_err(|e| e.to_string())?;
            let (mut m, _) = ctx.metrics(&s).map_err(|e| e.to_string())?;
            m.gap_shift = match (m.gap_dp, reference_gap) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
            Ok(m)
        })
        .collect();
    Ok(RepetitionResult {
        detail: RunDetail {
            repetition,
            split_seed,
            n_train: train.n(),
            n_test: test.n(),
            decision_theta: fitted.decision.base.theta.clone(),
            decision_ridge: fitted.decision.base.ridge,
            train_member_fraction: fitted.assignment.member_fraction(),
            amalgamated_fraction: fitted.plan.from_decision_count() as f64 / train.n() as f64,
            test_member_fraction: test_membership.member_fraction(),
            holdout_validation,
        },
        per_model,
    })
}

/// Mean and 95% half-width `1.96·sd/√R`; the half-width is `None` for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub half_width: Option<f64>,
    pub runs: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let r = values.len() as f64;
        let mean = values.iter().sum::<f64>() / r;
        let half_width = (values.len() > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
            1.96 * var.sqrt() / r.sqrt()
        });
        Some(Summary {
            mean,
            half_width,
            runs: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub repetition: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: String,
    pub kind: ModelKind,
    /// Completed repetitions.
    pub runs: usize,
    pub failures: Vec<RunFailure>,
    pub auc: Option<Summary>,
    pub tnr_by_group: BTreeMap<String, Summary>,
    pub npv_by_group: BTreeMap<String, Summary>,
    pub precision_curve: Vec<(f64, Summary)>,
    pub gap_dp: Option<Summary>,
    pub gap_shift: Option<Summary>,
    pub coverage: Option<Summary>,
    pub auc_non_deferred: Option<Summary>,
    pub per_run: Vec<Option<RunMetrics>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutcome {
    pub protocol: Protocol,
    pub settings: FitSettings,
    pub reports: Vec<EvaluationReport>,
    pub runs: Vec<Option<RunDetail>>,
    pub failures: Vec<RunFailure>,
    pub notes: Vec<String>,
}

fn collect_map(values: &[&BTreeMap<String, f64>]) -> BTreeMap<String, Summary> {
    let mut keys: Vec<&String> = values.iter().flat_map(|m| m.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter_map(|k| {
            let v: Vec<f64> = values.iter().filter_map(|m| m.get(k).copied()).collect();
            Summary::of(&v).map(|s| (k.clone(), s))
        })
        .collect()
}

fn aggregate(
    kinds: &[ModelKind],
    results: Vec<Result<RepetitionResult>>,
    protocol: &Protocol,
    settings: &FitSettings,
) -> EvaluationOutcome {
    let mut failures = Vec::new();
    let mut runs = Vec::new();
    let mut per_model: Vec<Vec<Option<RunMetrics>>> = vec![Vec::new(); kinds.len()];
    let mut model_failures: Vec<Vec<RunFailure>> = vec![Vec::new(); kinds.len()];
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Err(e) => {
                failures.push(RunFailure {
                    repetition: rep,
                    message: e.to_string(),
                });
                runs.push(None);
                for pm in per_model.iter_mut() {
                    pm.push(None);
                }
            }
            Ok(res) => {
                runs.push(Some(res.detail));
                for (j, m) in res.per_model.into_iter().enumerate() {
                    match m {
                        Ok(m) => per_model[j].push(Some(m)),
                        Err(e) => {
                            model_failures[j].push(RunFailure {
                                repetition: rep,
                                message: e,
                            });
                            per_model[j].push(None);
                        }
                    }
                }
            }
        }
    }
    let reports = kinds
        .iter()
        .zip(per_model)
        .zip(model_failures)
        .map(|((&kind, runs_m), mut fails)| {
            let ok: Vec<&RunMetrics> = runs_m.iter().flatten().collect();
            let pick = |f: &dyn Fn(&RunMetrics) -> Option<f64>| -> Option<Summary> {
                Summary::of(&ok.iter().filter_map(|m| f(m)).collect::<Vec<_>>())
            };
            let grid = &protocol.precision_grid;
            let precision_curve = grid
                .iter()
                .enumerate()
                .filter_map(|(j, &p)| {
                    let v: Vec<f64> = ok
                        .iter()
                        .filter_map(|m| m.precision_curve.get(j).map(|x| x.1))
                        .collect();
                    Summary::of(&v).map(|s| (p, s))
                })
                .collect();
            let mut all_fails: Vec<RunFailure> = failures.clone();
            all_fails.append(&mut fails);
            all_fails.sort_by_key(|f| f.repetition);
            EvaluationReport {
                model: kind.label().to_string(),
                kind,
                runs: ok.len(),
                failures: all_fails,
                auc: pick(&|m| Some(m.auc)),
                tnr_by_group: collect_map(&ok.iter().map(|m| &m.tnr_by_group).collect::<Vec<_>>()),
                npv_by_group: collect_map(&ok.iter().map(|m| &m.npv_by_group).collect::<Vec<_>>()),
                precision_curve,
                gap_dp: pick(&|m| m.gap_dp),
                gap_shift: pick(&|m| m.gap_shift),
                coverage: pick(&|m| m.coverage),
                auc_non_deferred: pick(&|m| m.auc_non_deferred),
                per_run: runs_m,
            }
        })
        .collect();
    EvaluationOutcome {
        protocol: protocol.clone(),
        settings: *settings,
        reports,
        runs,
        failures,
        notes: vec![
            "the joint learning-to-defer baseline is not part of this library; its row is absent".into(),
            "deferred cases are scored by the observed expert decision".into(),
        ],
    }
}

fn check_protocol(protocol: &Protocol, kinds: &[ModelKind]) -> Result<()> {
    if protocol.repetitions == 0 {
        return Err(Error::usage("repetitions must be at least 1"));
    }
    if kinds.is_empty() {
        return Err(Error::usage("no models requested"));
    }
    if !(protocol.screenout_rate > 0.0 && protocol.screenout_rate < 1.0) {
        return Err(Error::usage("screen-out rate outside (0, 1)"));
    }
    if protocol.precision_grid.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::usage("precision grid values must lie in (0, 1]"));
    }
    Ok(())
}

/// Repetition `r` splits `ds` with seed `protocol.seed + r`.
pub fn run_evaluation(
    kinds: &[ModelKind],
    ds: &DecisionDataset,
    protocol: &Protocol,
    settings: &FitSettings,
) -> Result<EvaluationOutcome> {
    check_protocol(protocol, kinds)?;
    let results: Vec<Result<RepetitionResult>> = (0..protocol.repetitions)
        .into_par_iter()
        .map(|r| {
            evaluate_repetition(ds, r, protocol.seed.wrapping_add(r as u64), kinds, protocol, settings)
        })
        .collect();
    Ok(aggregate(kinds, results, protocol, settings))
}

/// Repetition `r` uses `datasets[r]` and split seed `protocol.seed + r`;
/// `protocol.repetitions` is ignored.
pub fn run_evaluation_over(
    kinds: &[ModelKind],
    datasets: &[DecisionDataset],
    protocol: &Protocol,
    settings: &FitSettings,
) -> Result<EvaluationOutcome> {
    let mut protocol = protocol.clone();
    protocol.repetitions = datasets.len();
    check_protocol(&protocol, kinds)?;
    let results: Vec<Result<RepetitionResult>> = datasets
        .par_iter()
        .enumerate()
        .map(|(r, ds)| {
            evaluate_repetition(ds, r, protocol.seed.wrapping_add(r as u64), kinds, &protocol, settings)
        })
        .collect();
    Ok(aggregate(kinds, results, &protocol, settings))
}

impl EvaluationOutcome {
    pub fn report(&self, kind: ModelKind) -> Option<&EvaluationReport> {
        self.reports.iter().find(|r| r.kind == kind)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::data(e.to_string()))
    }

    /// One row per model; `NA` marks a metric or half-width that is undefined.
    pub fn to_csv(&self) -> String {
        let mut groups: Vec<String> = self
            .reports
            .iter()
            .flat_map(|r| r.tnr_by_group.keys().chain(r.npv_by_group.keys()).cloned())
            .collect();
        groups.sort();
        groups.dedup();
        let mut header = vec!["model".to_string(), "runs".into(), "auc".into(), "auc_hw".into()];
        for g in &groups {
            header.push(format!("tnr[{g}]"));
            header.push(format!("tnr[{g}]_hw"));
            header.push(format!("npv[{g}]"));
            header.push(format!("npv[{g}]_hw"));
        }
        for name in ["gap_dp", "gap_shift", "coverage"] {
            header.push(name.into());
            header.push(format!("{name}_hw"));
        }
        let fmt = |s: Option<&Summary>| -> [String; 2] {
            match s {
                None => ["NA".into(), "NA".into()],
                Some(s) => [
                    format!("{}", s.mean),
                    s.half_width.map_or("NA".into(), |h| format!("{h}")),
                ],
            }
        };
        let mut out = header.join(",");
        out.push('\n');
        for r in &self.reports {
            let mut row = vec![r.model.clone(), r.runs.to_string()];
            row.extend(fmt(r.auc.as_ref()));
            for g in &groups {
                row.extend(fmt(r.tnr_by_group.get(g)));
                row.extend(fmt(r.npv_by_group.get(g)));
            }
            row.extend(fmt(r.gap_dp.as_ref()));
            row.extend(fmt(r.gap_shift.as_ref()));
            row.extend(fmt(r.coverage.as_ref()));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.4, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn screenout_count_is_exact_under_ties() {
        let (_, out) = screenout_threshold(&[0.5; 10], &positions(10), 0.3).unwrap();
        assert_eq!(out, [true, true, true, false, false, false, false, false, false, false]);
    }

    #[test]
    fn tnr_all_negatives_below_threshold() {
        let s = [0.1, 0.2, 0.3, 0.9, 0.8, 0.7, 0.95, 0.85, 0.75, 0.6];
        let l = [0, 0, 0, 1, 1, 1, 1, 1, 1, 1];
        assert_eq!(tnr_at_screenout(&s, &l, &[true; 10], 0.3).unwrap(), 1.0);
        assert!(tnr_at_screenout(&s, &[1; 10], &[true; 10], 0.3).is_err());
    }

    #[test]
    fn precision_examples() {
        let s = [0.9, 0.8, 0.3, 0.1];
        assert_eq!(precision_at_top(&s, &[1, 1, 0, 0], 0.5, None).unwrap(), 1.0);
        assert_eq!(precision_at_top(&s, &[1, 1, 0, 0], 1.0, None).unwrap(), 0.5);
        assert_eq!(precision_at_top(&s, &[1, 1, 1, 1], 0.25, None).unwrap(), 1.0);
        assert!(precision_at_top(&s, &[1, 1, 0, 0], 0.5, Some(&[false; 4])).is_err());
    }

    #[test]
    fn parity_gap_example() {
        let s = [0.9, 0.8, 0.2, 0.6, 0.1];
        let g = [true, true, true, false, false];
        assert!((dem_parity_gap(&s, &g, 0.7).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dem_parity_gap(&s, &g, 1.0).unwrap(), 0.0);
        assert!(dem_parity_gap(&s, &[true; 5], 0.5).is_err());
    }

    #[test]
    fn one_run_has_no_half_width() {
        let s = Summary::of(&[0.7]).unwrap();
        assert_eq!(s.half_width, None);
        let s = Summary::of(&[0.6, 0.8]).unwrap();
        assert!((s.half_width.unwrap() - 1.96 * 0.1f64.hypot(0.1) / 2f64.sqrt()).abs() < 1e-12);
    }
}
