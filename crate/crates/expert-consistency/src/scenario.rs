//! Synthetic decision scenarios with a known construct label.
//!
//! Covariates come from fixed distributions. The observed-proxy outcome
//! `Ỹ₁ = [x1 > t1]` carries a little label noise, the unproxied need
//! `Ỹ₂ = [x2 > t2]` is noiseless, and the construct is `Y^c = Ỹ₁ ∨ Ỹ₂`.
//! The need feature `x2` mixes a wide uniform body with a long exponential
//! tail above `t2`, so part of the need region is unambiguous to experts.
//! Base decisions predict `Y^c` with a configurable accuracy; the errors are
//! concentrated near the rule boundaries. Each scenario then corrupts the
//! decisions of the hard subgroup `ℒ = {x1 > t1, x2 ≤ t2}` or of the minority.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DecisionDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    /// Random decisions on the hard subgroup.
    CHo,
    /// A fixed share of the hard subgroup decided against `Ỹ₁`.
    CIHo,
    /// Per-expert error rates on the hard subgroup.
    CIHe,
    /// Half of the experts screen out every minority case.
    DeP,
    /// A random 80% of minority cases screened out.
    HoF,
    /// One expert takes 95% of minority cases and screens them all out.
    NRnD,
    /// Every expert screens out every minority case.
    DeS,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::CHo,
        Scenario::CIHo,
        Scenario::CIHe,
        Scenario::DeP,
        Scenario::HoF,
        Scenario::NRnD,
        Scenario::DeS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::CHo => "CHo",
            Scenario::CIHo => "CIHo",
            Scenario::CIHe => "CIHe",
            Scenario::DeP => "DeP",
            Scenario::HoF => "HoF",
            Scenario::NRnD => "nRnD",
            Scenario::DeS => "DeS",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Scenario::ALL
            .iter()
            .copied()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown scenario `{s}`; expected one of CHo, CIHo, CIHe, DeP, HoF, nRnD, DeS"
                ))
            })
    }

    /// Scenarios whose corruption targets the minority; the minority flag is
    /// then appended as a model input.
    pub fn is_bias(self) -> bool {
        matches!(
            self,
            Scenario::DeP | Scenario::HoF | Scenario::NRnD | Scenario::DeS
        )
    }
}

impl Serialize for ScenarioName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.0.name())
    }
}

impl<'de> Deserialize<'de> for ScenarioName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Scenario::parse(&s)
            .map(ScenarioName)
            .map_err(serde::de::Error::custom)
    }
}

/// Scenario serialized by its conventional name (`nRnD` rather than `NRnD`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioName(pub Scenario);

/// Thresholds and distributions of the rule structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleStructure {
    /// `Ỹ₁ = [x1 > t1]`, `x1 ~ N(0, 1)`.
    pub t1: f64,
    /// `Ỹ₂ = [x2 > t2]`.
    pub t2: f64,
    /// Share of `x2` drawn from the tail `t2 + Exp(mean = tail_scale)`.
    pub tail_prob: f64,
    pub tail_scale: f64,
    /// The body of `x2` is `Uniform(−body_half_width, t2 + 0.5)`.
    pub body_half_width: f64,
    /// Flip probability applied to `Ỹ₁`.
    pub label_noise: f64,
    /// Width of the band around the rule boundaries where base errors concentrate.
    pub boundary_width: f64,
}

impl Default for RuleStructure {
    fn default() -> Self {
        RuleStructure {
            t1: -0.8,
            t2: 2.0,
            tail_prob: 0.25,
            tail_scale: 80.0,
            body_half_width: 8.0,
            label_noise: 0.03,
            boundary_width: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub scenario: ScenarioName,
    pub n: usize,
    /// Number of generated covariates (`x1`, `x2` and `m − 2` noise columns).
    /// Bias scenarios append the minority flag as one more input.
    pub m: usize,
    pub k: usize,
    /// Per-expert error-rate range for CIHe.
    pub error_range: (f64, f64),
    /// Share of the hard subgroup decided wrongly under CIHo.
    pub ciho_rate: f64,
    pub seed: u64,
    pub selective: bool,
    pub minority_fraction: f64,
    pub base_accuracy: f64,
    pub rules: RuleStructure,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            scenario: ScenarioName(Scenario::CHo),
            n: 5000,
            m: 6,
            k: 20,
            error_range: (0.7, 1.0),
            ciho_rate: 0.75,
            seed: 0,
            selective: false,
            minority_fraction: 0.5,
            base_accuracy: 0.95,
            rules: RuleStructure::default(),
        }
    }
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, n: usize, seed: u64) -> Self {
        ScenarioSpec {
            scenario: ScenarioName(scenario),
            n,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.error_range;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return Err(Error::usage(format!("error range ({a}, {b}) must satisfy 0 ≤ a ≤ b ≤ 1")));
        }
        if self.n < 2 {
            return Err(Error::usage("scenario needs at least 2 cases"));
        }
        if self.m < 2 {
            return Err(Error::usage("scenario needs at least the two rule covariates"));
        }
        if self.k < 2 || self.k > self.n {
            return Err(Error::usage(format!("expert count {} must be in 2..=n", self.k)));
        }
        if !(0.0..=1.0).contains(&self.ciho_rate) {
            return Err(Error::usage("ciho_rate outside [0, 1]"));
        }
        if !(self.minority_fraction > 0.0 && self.minority_fraction < 1.0) {
            return Err(Error::usage("minority_fraction outside (0, 1)"));
        }
        if !(self.base_accuracy > 0.5 && self.base_accuracy <= 1.0) {
            return Err(Error::usage("base_accuracy outside (0.5, 1]"));
        }
        let r = &self.rules;
        if !(0.0..=0.05).contains(&r.label_noise) {
            return Err(Error::usage("label_noise outside [0, 0.05]"));
        }
        if !(0.0..1.0).contains(&r.tail_prob) || r.tail_scale <= 0.0 || r.boundary_width <= 0.0 {
            return Err(Error::usage("invalid rule distribution parameters"));
        }
        if -r.body_half_width >= r.t2 + 0.5 {
            return Err(Error::usage("body_half_width too small for t2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBundle {
    pub spec: ScenarioSpec,
    /// Construct, group (minority) and censoring are filled in.
    pub dataset: DecisionDataset,
    pub y1: Vec<u8>,
    pub y2: Vec<u8>,
    pub hard_subgroup: Vec<bool>,
    pub minority: Vec<u8>,
}

/// Flip probability per case: `min(0.5, q·wᵢ)` with `q` chosen by bisection
/// so the mean equals `target`.
fn calibrated_flip_probs(weights: &[f64], target: f64) -> Vec<f64> {
    if target <= 0.0 {
        return vec![0.0; weights.len()];
    }
    let mean_at = |q: f64| weights.iter().map(|w| (q * w).min(0.5)).sum::<f64>() / weights.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while mean_at(hi) < target && hi < 1e12 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q = 0.5 * (lo + hi);
    weights.iter().map(|w| (q * w).min(0.5)).collect()
}

fn choose(rng: &mut ChaCha8Rng, pool: &[usize], share: f64) -> Vec<usize> {
    let count = (share * pool.len() as f64).round() as usize;
    let mut picked: Vec<usize> = sample(rng, pool.len(), count.min(pool.len()))
        .into_iter()
        .map(|j| pool[j])
        .collect();
    picked.sort_unstable();
    picked
}

/// Generates one bundle; deterministic given the spec.
pub fn generate(spec: &ScenarioSpec) -> Result<GroundTruthBundle> {
    spec.validate()?;
    let n = spec.n;
    let k = spec.k;
    let r = spec.rules;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let tail = Exp::new(1.0 / r.tail_scale).map_err(|e| Error::usage(e.to_string()))?;
    let body = Uniform::new(-r.body_half_width, r.t2 + 0.5).map_err(|e| Error::usage(e.to_string()))?;

    let mut attempt = 0;
    let (x1, y1) = loop {
        let x1: Vec<f64> = (0..n).map(|_| std_normal.sample(&mut rng)).collect();
        let y1: Vec<u8> = x1
            .iter()
            .map(|&v| {
                let clean = (v > r.t1) as u8;
                if rng.random::<f64>() < r.label_noise {
                    1 - clean
                } else {
                    clean
                }
            })
            .collect();
        let pos = y1.iter().filter(|&&v| v == 1).count();
        if pos > 0 && pos < n {
            break (x1, y1);
        }
        attempt += 1;
        if attempt >= 10 {
            return Err(Error::data("observed-proxy label stayed single-class after 10 draws"));
        }
    };
    let x2: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < r.tail_prob {
                r.t2 + tail.sample(&mut rng)
            } else {
                body.sample(&mut rng)
            }
        })
        .collect();
    let noise_cols = spec.m - 2;
    let noise: Vec<f64> = (0..n * noise_cols).map(|_| std_normal.sample(&mut rng)).collect();
    let minority: Vec<u8> = (0..n)
        .map(|_| (rng.random::<f64>() < spec.minority_fraction) as u8)
        .collect();
    let y2: Vec<u8> = x2.iter().map(|&v| (v > r.t2) as u8).collect();
    let yc: Vec<u8> = y1.iter().zip(&y2).map(|(a, b)| a | b).collect();

    let weights: Vec<f64> = (0..n)
        .map(|i| {
            let margin = (x1[i] - r.t1).max(x2[i] - r.t2);
            (-margin * margin / (2.0 * r.boundary_width * r.boundary_width)).exp()
        })
        .collect();
    let hard: Vec<bool> = (0..n).map(|i| x1[i] > r.t1 && x2[i] <= r.t2).collect();
    // Calibrated separately inside and outside the hard subgroup so the
    // uncorrupted remainder keeps the nominal accuracy in every scenario.
    let mut flip = vec![0.0; n];
    for stratum in [true, false] {
        let idx: Vec<usize> = (0..n).filter(|&i| hard[i] == stratum).collect();
        if idx.is_empty() {
            continue;
        }
        let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
        for (&i, p) in idx.iter().zip(calibrated_flip_probs(&w, 1.0 - spec.base_accuracy)) {
            flip[i] = p;
        }
    }
    let mut d: Vec<u8> = (0..n)
        .map(|i| {
            if rng.random::<f64>() < flip[i] {
                1 - yc[i]
            } else {
                yc[i]
            }
        })
        .collect();
    let mut experts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=k)).collect();
    let mut seen = vec![false; k];
    for &e in &experts {
        seen[e - 1] = true;
    }
    for (h, s) in seen.iter().enumerate() {
        if !s {
            experts[h] = h + 1;
        }
    }

    let hard_idx: Vec<usize> = (0..n).filter(|&i| hard[i]).collect();
    let minority_idx: Vec<usize> = (0..n).filter(|&i| minority[i] == 1).collect();
    match spec.scenario.0 {
        Scenario::CHo => {
            for &i in &hard_idx {
                d[i] = (rng.random::<f64>() < 0.5) as u8;
            }
        }
        Scenario::CIHo => {
            for i in choose(&mut rng, &hard_idx, spec.ciho_rate) {
                d[i] = 1 - y1[i];
            }
        }
        Scenario::CIHe => {
            let (a, b) = spec.error_range;
            let rates: Vec<f64> = (0..k)
                .map(|_| if a == b { a } else { rng.random_range(a..=b) })
                .collect();
            for h in 1..=k {
                let pool: Vec<usize> = hard_idx.iter().copied().filter(|&i| experts[i] == h).collect();
                for i in choose(&mut rng, &pool, rates[h - 1]) {
                    d[i] = 1 - y1[i];
                }
            }
        }
        Scenario::DeP => {
            for &i in &minority_idx {
                if experts[i] <= k / 2 {
                    d[i] = 0;
                }
            }
        }
        Scenario::HoF => {
            for i in choose(&mut rng, &minority_idx, 0.8) {
                d[i] = 0;
            }
        }
        Scenario::NRnD => {
            for i in choose(&mut rng, &minority_idx, 0.95) {
                d[i] = 0;
                experts[i] = 1;
            }
        }
        Scenario::DeS => {
            for &i in &minority_idx {
                d[i] = 0;
            }
        }
    }
    // Reassignment can empty an expert's caseload; give it back one case.
    let mut counts = vec![0usize; k];
    for &e in &experts {
        counts[e - 1] += 1;
    }
    for h in 2..=k {
        if counts[h - 1] == 0 {
            if let Some(i) = (0..n).find(|&i| experts[i] == 1 && minority[i] == 0) {
                experts[i] = h;
                counts[0] -= 1;
                counts[h - 1] += 1;
            }
        }
    }

    let with_minority = spec.scenario.0.is_bias();
    let m_total = spec.m + with_minority as usize;
    let features = DMatrix::from_fn(n, m_total, |i, j| match j {
        0 => x1[i],
        1 => x2[i],
        j if j < spec.m => noise[i * noise_cols + (j - 2)],
        _ => minority[i] as f64,
    });
    let outcomes: Vec<Option<u8>> = (0..n)
        .map(|i| {
            if spec.selective && d[i] == 0 {
                None
            } else {
                Some(y1[i])
            }
        })
        .collect();
    let mut ds = DecisionDataset::new(
        features,
        d,
        outcomes,
        experts,
        k,
        Some(minority.clone()),
        Some(yc),
    )?;
    let mut names = vec!["x1".to_string(), "x2".to_string()];
    names.extend((1..=noise_cols).map(|j| format!("noise{j}")));
    if with_minority {
        names.push("minority".into());
    }
    ds.feature_names = names;
    if spec.selective {
        ds.selective = Some(1);
    }
    ds.validate()?;
    Ok(GroundTruthBundle {
        spec: spec.clone(),
        dataset: ds,
        y1,
        y2,
        hard_subgroup: hard,
        minority,
    })
}

/// One bundle per seed, in seed order.
pub fn scenario_suite(base: &ScenarioSpec, seeds: &[u64]) -> Result<Vec<GroundTruthBundle>> {
    seeds
        .par_iter()
        .map(|&s| {
            let mut spec = base.clone();
            spec.seed = s;
            generate(&spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(Scenario::parse(s.name()).unwrap(), s);
        }
        assert!(Scenario::parse("nope").is_err());
    }

    #[test]
    fn construct_is_the_union_of_components() {
        let b = generate(&ScenarioSpec::new(Scenario::CIHo, 800, 3)).unwrap();
        let yc = b.dataset.construct.as_ref().unwrap();
        for i in 0..800 {
            assert_eq!(yc[i], b.y1[i] | b.y2[i]);
        }
    }

    #[test]
    fn selective_mode_censors_screened_out_cases() {
        let mut spec = ScenarioSpec::new(Scenario::CHo, 500, 1);
        spec.selective = true;
        let b = generate(&spec).unwrap();
        for i in 0..500 {
            assert_eq!(b.dataset.outcomes[i].is_some(), b.dataset.decisions[i] == 1);
        }
    }

    #[test]
    fn bias_scenarios_append_the_minority_input() {
        let b = generate(&ScenarioSpec::new(Scenario::DeS, 300, 1)).unwrap();
        assert_eq!(b.dataset.m(), 7);
        let b = generate(&ScenarioSpec::new(Scenario::CHo, 300, 1)).unwrap();
        assert_eq!(b.dataset.m(), 6);
    }

    #[test]
    fn invalid_error_range_is_rejected() {
        let mut spec = ScenarioSpec::new(Scenario::CIHe, 300, 1);
        spec.error_range = (0.8, 0.2);
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn flip_probabilities_hit_the_target_mean() {
        let w: Vec<f64> = (0..1000).map(|i| (i as f64 / 100.0).sin().abs()).collect();
        let p = calibrated_flip_probs(&w, 0.05);
        let mean = p.iter().sum::<f64>() / 1000.0;
        assert!((mean - 0.05).abs() < 1e-9);
    }
}
