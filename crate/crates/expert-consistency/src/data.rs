//! Tabular decision data: ingestion, validation, writing, and Monte-Carlo splits.
//!
//! A [`DecisionDataset`] holds covariates, one expert decision per case, an
//! optionally censored outcome, the assigned expert, and optional group and
//! construct columns. Expert ids are stored densely as `1..=k`; the original
//! labels are kept for output.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column-role mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub features: Vec<String>,
    pub decision: String,
    pub expert: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub construct: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linkage: Option<String>,
}

impl Schema {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::usage(format!("invalid schema: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionDataset {
    /// n × m covariate matrix.
    pub features: DMatrix<f64>,
    pub feature_names: Vec<String>,
    pub decisions: Vec<u8>,
    /// `None` marks a censored outcome.
    pub outcomes: Vec<Option<u8>>,
    /// Dense expert ids in `1..=n_experts`.
    pub expert_ids: Vec<usize>,
    /// Original expert label for dense id `h` at position `h - 1`.
    pub expert_labels: Vec<String>,
    pub n_experts: usize,
    pub group: Option<Vec<u8>>,
    pub construct: Option<Vec<u8>>,
    pub case_ids: Vec<u64>,
    pub linkage: Option<Vec<String>>,
    /// Decision value under which outcomes are observed, when in selective-labels mode.
    pub selective: Option<u8>,
}

impl DecisionDataset {
    /// Builds a dataset from already-dense expert ids and checks every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        features: DMatrix<f64>,
        decisions: Vec<u8>,
        outcomes: Vec<Option<u8>>,
        expert_ids: Vec<usize>,
        n_experts: usize,
        group: Option<Vec<u8>>,
        construct: Option<Vec<u8>>,
    ) -> Result<Self> {
        let n = decisions.len();
        let ds = DecisionDataset {
            feature_names: (1..=features.ncols()).map(|j| format!("x{j}")).collect(),
            features,
            decisions,
            outcomes,
            expert_ids,
            expert_labels: (1..=n_experts).map(|h| h.to_string()).collect(),
            n_experts,
            group,
            construct,
            case_ids: (0..n as u64).collect(),
            linkage: None,
            selective: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.decisions.len()
    }

    pub fn m(&self) -> usize {
        self.features.ncols()
    }

    pub fn k(&self) -> usize {
        self.n_experts
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().copied().collect()
    }

    /// Case count per dense expert id (index `h - 1`).
    pub fn expert_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_experts];
        for &h in &self.expert_ids {
            counts[h - 1] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::data("dataset has no rows"));
        }
        if self.m() == 0 {
            return Err(Error::data("dataset has no feature columns"));
        }
        if self.n_experts == 0 {
            return Err(Error::data("dataset has no experts"));
        }
        if self.features.nrows() != n
            || self.outcomes.len() != n
            || self.expert_ids.len() != n
            || self.case_ids.len() != n
        {
            return Err(Error::data("column lengths disagree"));
        }
        if self.feature_names.len() != self.m() {
            return Err(Error::data("feature name count disagrees with feature columns"));
        }
        for (name, col) in [("group", &self.group), ("construct", &self.construct)] {
            if let Some(v) = col {
                if v.len() != n {
                    return Err(Error::data(format!("{name} column length disagrees")));
                }
                if v.iter().any(|&b| b > 1) {
                    return Err(Error::data(format!("{name} column is not binary")));
                }
            }
        }
        if let Some(l) = &self.linkage {
            if l.len() != n {
                return Err(Error::data("linkage column length disagrees"));
            }
        }
        if let Some(i) = self.decisions.iter().position(|&d| d > 1) {
            return Err(Error::data(format!("row {i}: decision is not binary")));
        }
        if let Some(i) = self.outcomes.iter().position(|y| matches!(y, Some(v) if *v > 1)) {
            return Err(Error::data(format!("row {i}: outcome is not binary")));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "row {}: non-finite feature value",
                i % n
            )));
        }
        let counts = self.expert_counts_checked()?;
        if let Some(h) = counts.iter().position(|&c| c == 0) {
            return Err(Error::data(format!("expert {} has no cases", h + 1)));
        }
        let ids: BTreeSet<u64> = self.case_ids.iter().copied().collect();
        if ids.len() != n {
            return Err(Error::data("case ids are not unique"));
        }
        if let Some(d_star) = self.selective {
            for i in 0..n {
                let observed = self.outcomes[i].is_some();
                let should = self.decisions[i] == d_star;
                if observed && !should {
                    return Err(Error::data(format!(
                        "row {i}: outcome present but decision {} is not the observing decision {d_star}",
                        self.decisions[i]
                    )));
                }
                if !observed && should {
                    return Err(Error::data(format!(
                        "row {i}: outcome missing under observing decision {d_star}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn expert_counts_checked(&self) -> Result<Vec<usize>> {
        let mut counts = vec![0usize; self.n_experts];
        for (i, &h) in self.expert_ids.iter().enumerate() {
            if h == 0 || h > self.n_experts {
                return Err(Error::data(format!("row {i}: expert id {h} outside 1..={}", self.n_experts)));
            }
            counts[h - 1] += 1;
        }
        Ok(counts)
    }

    /// Row subset that keeps the parent's expert numbering. The subset is not
    /// re-validated for expert density.
    pub fn subset(&self, idx: &[usize]) -> DecisionDataset {
        let pick_u8 = |v: &Vec<u8>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        DecisionDataset {
            features: self.features.select_rows(idx),
            feature_names: self.feature_names.clone(),
            decisions: pick_u8(&self.decisions),
            outcomes: idx.iter().map(|&i| self.outcomes[i]).collect(),
            expert_ids: idx.iter().map(|&i| self.expert_ids[i]).collect(),
            expert_labels: self.expert_labels.clone(),
            n_experts: self.n_experts,
            group: self.group.as_ref().map(pick_u8),
            construct: self.construct.as_ref().map(pick_u8),
            case_ids: idx.iter().map(|&i| self.case_ids[i]).collect(),
            linkage: self
                .linkage
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i].clone()).collect()),
            selective: self.selective,
        }
    }

    pub fn decisions_f64(&self) -> Vec<f64> {
        self.decisions.iter().map(|&d| d as f64).collect()
    }
}

fn parse_binary(raw: &str, row: usize, col: &str) -> Result<u8> {
    match raw.trim() {
        "0" | "0.0" => Ok(0),
        "1" | "1.0" => Ok(1),
        other => Err(Error::data(format!(
            "row {row}: column `{col}` has non-binary value `{other}`"
        ))),
    }
}

/// Reads a CSV file with a header row according to `schema`.
///
/// Expert ids are re-indexed densely to `1..=k`, ordered numerically when
/// every id parses as an integer and lexically otherwise. With
/// `selective_mode = Some(d)`, an outcome present on a row whose decision is
/// not `d` is rejected.
pub fn load_dataset(path: &Path, schema: &Schema, selective_mode: Option<u8>) -> Result<DecisionDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_dataset(file, schema, selective_mode)
}

pub fn read_dataset<R: std::io::Read>(
    reader: R,
    schema: &Schema,
    selective_mode: Option<u8>,
) -> Result<DecisionDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::data(format!("cannot read header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("missing required column `{name}`")))
    };
    let opt_col = |name: &Option<String>| -> Result<Option<usize>> {
        name.as_ref().map(|c| col(c)).transpose()
    };
    if schema.features.is_empty() {
        return Err(Error::usage("schema lists no feature columns"));
    }
    let feat_cols: Vec<usize> = schema.features.iter().map(|f| col(f)).collect::<Result<_>>()?;
    let dec_col = col(&schema.decision)?;
    let exp_col = col(&schema.expert)?;
    let out_col = opt_col(&schema.outcome)?;
    let grp_col = opt_col(&schema.group)?;
    let con_col = opt_col(&schema.construct)?;
    let id_col = opt_col(&schema.case_id)?;
    let link_col = opt_col(&schema.linkage)?;

    let mut feats: Vec<f64> = Vec::new();
    let mut decisions = Vec::new();
    let mut outcomes = Vec::new();
    let mut raw_experts: Vec<String> = Vec::new();
    let mut group = Vec::new();
    let mut construct = Vec::new();
    let mut case_ids = Vec::new();
    let mut linkage = Vec::new();

    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("row {row}: {e}")))?;
        for (&c, name) in feat_cols.iter().zip(&schema.features) {
            let v: f64 = rec[c].trim().parse().map_err(|_| {
                Error::data(format!("row {row}: column `{name}` is not numeric: `{}`", &rec[c]))
            })?;
            feats.push(v);
        }
        let d = parse_binary(&rec[dec_col], row, &schema.decision)?;
        decisions.push(d);
        let y = match out_col {
            Some(c) if !rec[c].trim().is_empty() => {
                Some(parse_binary(&rec[c], row, schema.outcome.as_deref().unwrap_or(""))?)
            }
            _ => None,
        };
        if let (Some(d_star), Some(_)) = (selective_mode, y) {
            if d != d_star {
                return Err(Error::data(format!(
                    "row {row}: outcome present although decision {d} censors it (observing decision {d_star})"
                )));
            }
        }
        outcomes.push(y);
        raw_experts.push(rec[exp_col].trim().to_string());
        if let Some(c) = grp_col {
            group.push(parse_binary(&rec[c], row, "group")?);
        }
        if let Some(c) = con_col {
            construct.push(parse_binary(&rec[c], row, "construct")?);
        }
        match id_col {
            Some(c) => case_ids.push(rec[c].trim().parse::<u64>().map_err(|_| {
                Error::data(format!("row {row}: case id `{}` is not a nonnegative integer", &rec[c]))
            })?),
            None => case_ids.push(row as u64),
        }
        if let Some(c) = link_col {
            linkage.push(rec[c].to_string());
        }
    }
    let n = decisions.len();
    if n == 0 {
        return Err(Error::data("file has no data rows"));
    }
    let m = schema.features.len();
    let features = DMatrix::from_row_slice(n, m, &feats);

    let (expert_ids, expert_labels) = reindex_experts(&raw_experts);
    let ds = DecisionDataset {
        features,
        feature_names: schema.features.clone(),
        decisions,
        outcomes,
        n_experts: expert_labels.len(),
        expert_ids,
        expert_labels,
        group: grp_col.map(|_| group),
        construct: con_col.map(|_| construct),
        case_ids,
        linkage: link_col.map(|_| linkage),
        selective: selective_mode,
    };
    ds.validate()?;
    Ok(ds)
}

/// Dense re-indexing of raw expert labels.
pub fn reindex_experts(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let numeric: Option<Vec<i64>> = raw.iter().map(|s| s.parse::<i64>().ok()).collect();
    let labels: Vec<String> = match &numeric {
        Some(nums) => {
            let set: BTreeSet<i64> = nums.iter().copied().collect();
            set.into_iter().map(|v| v.to_string()).collect()
        }
        None => {
            let set: BTreeSet<&String> = raw.iter().collect();
            set.into_iter().cloned().collect()
        }
    };
    let lookup: BTreeMap<String, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), i + 1))
        .collect();
    let ids = match numeric {
        Some(nums) => nums.iter().map(|v| lookup[&v.to_string()]).collect(),
        None => raw.iter().map(|s| lookup[s]).collect(),
    };
    (ids, labels)
}

/// Extra string columns appended to a written dataset.
pub type ExtraColumns<'a> = &'a [(String, Vec<String>)];

/// Writes `ds` as CSV and returns the schema that reloads it.
///
/// Column order: case id, features, decision, expert, then outcome, group,
/// construct, linkage when present, then `extra`.
pub fn write_dataset(ds: &DecisionDataset, path: &Path, extra: ExtraColumns<'_>) -> Result<Schema> {
    let mut buf = Vec::new();
    let schema = write_dataset_to(ds, &mut buf, extra)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(schema)
}

pub fn write_dataset_to<W: std::io::Write>(
    ds: &DecisionDataset,
    out: W,
    extra: ExtraColumns<'_>,
) -> Result<Schema> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vec!["case_id".into()];
    header.extend(ds.feature_names.iter().cloned());
    header.push("decision".into());
    header.push("expert".into());
    header.push("outcome".into());
    if ds.group.is_some() {
        header.push("group".into());
    }
    if ds.construct.is_some() {
        header.push("construct".into());
    }
    if ds.linkage.is_some() {
        header.push("linkage".into());
    }
    for (name, _) in extra {
        header.push(name.clone());
    }
    let wr = |e: csv::Error| Error::data(format!("write failed: {e}"));
    w.write_record(&header).map_err(wr)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = vec![ds.case_ids[i].to_string()];
        rec.extend(ds.features.row(i).iter().map(|v| format!("{v:?}")));
        rec.push(ds.decisions[i].to_string());
        rec.push(ds.expert_labels[ds.expert_ids[i] - 1].clone());
        rec.push(ds.outcomes[i].map(|y| y.to_string()).unwrap_or_default());
        if let Some(g) = &ds.group {
            rec.push(g[i].to_string());
        }
        if let Some(c) = &ds.construct {
            rec.push(c[i].to_string());
        }
        if let Some(l) = &ds.linkage {
            rec.push(l[i].clone());
        }
        for (_, vals) in extra {
            rec.push(vals[i].clone());
        }
        w.write_record(&rec).map_err(wr)?;
    }
    w.flush().map_err(|e| Error::data(format!("write failed: {e}")))?;
    Ok(Schema {
        features: ds.feature_names.clone(),
        decision: "decision".into(),
        expert: "expert".into(),
        outcome: Some("outcome".into()),
        group: ds.group.as_ref().map(|_| "group".into()),
        construct: ds.construct.as_ref().map(|_| "construct".into()),
        case_id: Some("case_id".into()),
        linkage: ds.linkage.as_ref().map(|_| "linkage".into()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
    pub train_fraction: f64,
}

/// Random train/test split with expert representation in both folds.
///
/// Cases sharing a linkage key move together. The first `round(frac · n)`
/// cases of a seeded shuffle form the training fold. An expert missing from a
/// fold then receives its lowest-case-id case from the other fold, repeated
/// until every expert appears on both sides.
pub fn monte_carlo_split(
    ds: &DecisionDataset,
    train_fraction: f64,
    seed: u64,
    linkage: Option<&[String]>,
) -> Result<SplitPlan> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::usage(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let n = ds.n();
    let counts = ds.expert_counts();
    if let Some(h) = counts.iter().position(|&c| c < 2) {
        return Err(Error::data(format!(
            "expert {} has a single case; it cannot appear in both folds",
            ds.expert_labels[h]
        )));
    }

    // Units: groups of rows that must stay together, keyed by first row.
    let mut units: Vec<Vec<usize>> = Vec::new();
    match linkage {
        Some(keys) => {
            if keys.len() != n {
                return Err(Error::data("linkage length disagrees with dataset"));
            }
            let mut by_key: BTreeMap<&str, usize> = BTreeMap::new();
            for (i, key) in keys.iter().enumerate() {
                match by_key.get(key.as_str()) {
                    Some(&u) => units[u].push(i),
                    None => {
                        by_key.insert(key, units.len());
                        units.push(vec![i]);
                    }
                }
            }
        }
        None => units.extend((0..n).map(|i| vec![i])),
    }
    let mut unit_of = vec![0usize; n];
    for (u, rows) in units.iter().enumerate() {
        for &i in rows {
            unit_of[i] = u;
        }
    }

    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let target = (train_fraction * n as f64).round() as usize;
    let mut in_train = vec![false; units.len()];
    let mut taken = 0usize;
    for &u in &order {
        if taken >= target {
            break;
        }
        in_train[u] = true;
        taken += units[u].len();
    }

    // Cases of each expert, ordered by case id for the repair rule.
    let mut cases_by_expert: Vec<Vec<usize>> = vec![Vec::new(); ds.k()];
    for i in 0..n {
        cases_by_expert[ds.expert_ids[i] - 1].push(i);
    }
    for cases in &mut cases_by_expert {
        cases.sort_by_key(|&i| ds.case_ids[i]);
    }

    let max_rounds = 4 * n + 4;
    let mut rounds = 0;
    loop {
        let mut changed = false;
        for (h, cases) in cases_by_expert.iter().enumerate() {
            let has_train = cases.iter().any(|&i| in_train[unit_of[i]]);
            let has_test = cases.iter().any(|&i| !in_train[unit_of[i]]);
            if !has_train {
                in_train[unit_of[cases[0]]] = true;
                changed = true;
            } else if !has_test {
                in_train[unit_of[cases[0]]] = false;
                changed = true;
            }
            if changed && linkage.is_some() {
                let all_same = cases
                    .iter()
                    .all(|&i| unit_of[i] == unit_of[cases[0]]);
                if all_same {
                    return Err(Error::data(format!(
                        "expert {} has all cases in one linkage group",
                        ds.expert_labels[h]
                    )));
                }
            }
        }
        if !changed {
            break;
        }
        rounds += 1;
        if rounds > max_rounds {
            return Err(Error::data(
                "expert representation repair did not settle; linkage groups conflict",
            ));
        }
    }

    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    for i in 0..n {
        if in_train[unit_of[i]] {
            train_indices.push(i);
        } else {
            test_indices.push(i);
        }
    }
    Ok(SplitPlan {
        train_indices,
        test_indices,
        seed,
        train_fraction,
    })
}
