//! Per-expert influence on a prediction and the consistency metrics m1, m2, m3.
//!
//! For expert `h` with case set `E_h`,
//! `I_h(x) = −(1/|E_h|) ∇_θP(x)ᵀ H⁻¹ Σ_{i∈E_h} ∇_θℓ(xᵢ, dᵢ, θ̂)`,
//! where `P` is the class-1 probability of the uncalibrated base model and `H`
//! is the penalized Hessian at `θ̂` including the ridge actually used. The
//! per-expert vectors `H⁻¹ Σ ∇ℓ` are computed once, so a query costs `O(k·m)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{risk_hessian, sigmoid, WeightedLogisticModel};

/// Normalization of the reported influence values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InfluenceScale {
    /// The derivative of the prediction under the `1 + ε` reweighting of
    /// the summed training risk, divided by `|E_h|`.
    #[default]
    PerCase,
    /// `PerCase` multiplied by the training-set size: the same derivative
    /// when the training risk is an average rather than a sum.
    MeanRisk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceProfile {
    pub per_expert: Vec<f64>,
    pub query_prob: f64,
    /// `|per_expert|` sorted descending; ties keep ascending expert id.
    pub sorted_abs: Vec<f64>,
    /// `None` when every influence is zero.
    pub m1: Option<f64>,
    pub m2: f64,
    pub m3: f64,
}

impl InfluenceProfile {
    pub fn from_values(per_expert: Vec<f64>, query_prob: f64) -> Self {
        let mut order: Vec<usize> = (0..per_expert.len()).collect();
        order.sort_by(|&a, &b| per_expert[b].abs().total_cmp(&per_expert[a].abs()));
        let sorted_abs: Vec<f64> = order.iter().map(|&j| per_expert[j].abs()).collect();
        let mut profile = InfluenceProfile {
            per_expert,
            query_prob,
            sorted_abs,
            m1: None,
            m2: 0.0,
            m3: 0.0,
        };
        profile.m1 = center_of_mass(&profile);
        profile.m2 = aligned_influence(&profile);
        profile.m3 = negligible_influence(&profile);
        profile
    }
}

/// `m1 = Σ j·s_j / Σ s_j` over 1-based ranks; `None` for all-zero influence.
pub fn center_of_mass(profile: &InfluenceProfile) -> Option<f64> {
    let total: f64 = profile.sorted_abs.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let weighted: f64 = profile
        .sorted_abs
        .iter()
        .enumerate()
        .map(|(j, s)| (j + 1) as f64 * s)
        .sum();
    Some(weighted / total)
}

/// Share of absolute influence pushing toward the predicted side; 0 when the
/// prediction is exactly 0.5 or all influence is zero.
pub fn aligned_influence(profile: &InfluenceProfile) -> f64 {
    let total: f64 = profile.per_expert.iter().map(|v| v.abs()).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let side = profile.query_prob - 0.5;
    let aligned: f64 = profile
        .per_expert
        .iter()
        .filter(|&&v| v * side > 0.0)
        .map(|v| v.abs())
        .sum();
    aligned / total
}

/// Largest absolute per-expert influence.
pub fn negligible_influence(profile: &InfluenceProfile) -> f64 {
    profile.sorted_abs.first().copied().unwrap_or(0.0)
}

/// Cached Hessian factorization and per-expert gradient solves for one fitted model.
#[derive(Debug, Clone)]
pub struct InfluenceEngine {
    model: WeightedLogisticModel,
    /// `H⁻¹ Σ_{i∈E_h} ∇ℓᵢ` for each expert.
    solved: Vec<DVector<f64>>,
    counts: Vec<usize>,
    factor: f64,
    hessian_inverse: DMatrix<f64>,
}

impl InfluenceEngine {
    /// `x_train`, `decisions` and `expert_ids` must be the data `model` was fitted on.
    pub fn new(
        model: &WeightedLogisticModel,
        x_train: &DMatrix<f64>,
        decisions: &[u8],
        expert_ids: &[usize],
        n_experts: usize,
        scale: InfluenceScale,
    ) -> Result<Self> {
        let n = x_train.nrows();
        let m = x_train.ncols();
        if decisions.len() != n || expert_ids.len() != n {
            return Err(Error::data("influence inputs differ in length"));
        }
        if m != model.feature_count {
            return Err(Error::data("feature count differs from the fitted model"));
        }
        let y: Vec<f64> = decisions.iter().map(|&d| d as f64).collect();
        let w = vec![1.0; n];
        let h = risk_hessian(&model.theta, x_train, &y, &w, model.ridge)?;
        let chol = h.cholesky().ok_or_else(|| {
            Error::numeric("Hessian is not positive definite; fit with a ridge from the grid")
        })?;

        let mut sums = vec![DVector::<f64>::zeros(m + 1); n_experts];
        let mut counts = vec![0usize; n_experts];
        for i in 0..n {
            let e = expert_ids[i];
            if e == 0 || e > n_experts {
                return Err(Error::data(format!("row {i}: expert id {e} out of range")));
            }
            let mut z = model.theta[m];
            for j in 0..m {
                z += model.theta[j] * x_train[(i, j)];
            }
            let r = sigmoid(z) - y[i];
            let s = &mut sums[e - 1];
            for j in 0..m {
                s[j] += r * x_train[(i, j)];
            }
            s[m] += r;
            counts[e - 1] += 1;
        }
        if let Some(h) = counts.iter().position(|&c| c == 0) {
            return Err(Error::data(format!("expert {} has no training cases", h + 1)));
        }
        let solved = sums.iter().map(|s| chol.solve(s)).collect();
        let factor = match scale {
            InfluenceScale::PerCase => 1.0,
            InfluenceScale::MeanRisk => n as f64,
        };
        Ok(InfluenceEngine {
            model: model.clone(),
            solved,
            counts,
            factor,
            hessian_inverse: chol.inverse(),
        })
    }

    pub fn n_experts(&self) -> usize {
        self.counts.len()
    }

    pub fn hessian_inverse(&self) -> &DMatrix<f64> {
        &self.hessian_inverse
    }

    /// Influence of every expert on the base model's class-1 probability at `x`.
    pub fn per_expert(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.model.check_input(x)?;
        Ok(self.per_expert_unchecked(x))
    }

    fn per_expert_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let m = self.model.feature_count;
        let p = self.model.prob_unclamped(x);
        let c = p * (1.0 - p);
        self.solved
            .iter()
            .zip(&self.counts)
            .map(|(v, &cnt)| {
                let mut dot = v[m];
                for j in 0..m {
                    dot += x[j] * v[j];
                }
                -c * dot / cnt as f64 * self.factor
            })
            .collect()
    }

    /// Profile whose aligned-influence side is taken from the base probability.
    pub fn profile(&self, x: &[f64]) -> Result<InfluenceProfile> {
        self.model.check_input(x)?;
        let p = self.model.prob_unclamped(x);
        Ok(InfluenceProfile::from_values(self.per_expert_unchecked(x), p))
    }

    /// Profile whose aligned-influence side is taken from `query_prob`
    /// (typically the calibrated f̂_h).
    pub fn profile_with_prob(&self, x: &[f64], query_prob: f64) -> Result<InfluenceProfile> {
        self.model.check_input(x)?;
        Ok(InfluenceProfile::from_values(
            self.per_expert_unchecked(x),
            query_prob,
        ))
    }
}

/// Everything an [`InfluenceEngine`] needs at prediction time, without the
/// training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEngineState {
    pub model: WeightedLogisticModel,
    pub solved: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub factor: f64,
    pub hessian_inverse: Vec<Vec<f64>>,
}

impl InfluenceEngine {
    pub fn to_state(&self) -> InfluenceEngineState {
        InfluenceEngineState {
            model: self.model.clone(),
            solved: self.solved.iter().map(|v| v.iter().copied().collect()).collect(),
            counts: self.counts.clone(),
            factor: self.factor,
            hessian_inverse: self
                .hessian_inverse
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }

    pub fn from_state(state: InfluenceEngineState) -> Result<Self> {
        let d = state.model.feature_count + 1;
        if state.solved.len() != state.counts.len()
            || state.solved.iter().any(|v| v.len() != d)
            || state.hessian_inverse.len() != d
            || state.hessian_inverse.iter().any(|r| r.len() != d)
        {
            return Err(Error::data("influence engine state has inconsistent dimensions"));
        }
        if state.counts.contains(&0) {
            return Err(Error::data("influence engine state has an expert without cases"));
        }
        let hessian_inverse = DMatrix::from_fn(d, d, |i, j| state.hessian_inverse[i][j]);
        Ok(InfluenceEngine {
            model: state.model,
            solved: state.solved.into_iter().map(DVector::from_vec).collect(),
            counts: state.counts,
            factor: state.factor,
            hessian_inverse,
        })
    }
}
