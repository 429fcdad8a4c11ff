//! Run configuration, artifact writing and parameter sweeps.
//!
//! A run is described by one TOML document. Every file a run writes records
//! the configuration hash and the seed: JSON and TOML files in a
//! `provenance` field, CSV files in a leading `#` comment line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amalgamation::{
    amalgamate, fit_amalgam_model, fit_on_labels, outside_set_labels, AmalgamationMode,
    LeveragedPredictor, MembershipRule, PredictorKind,
};
use crate::calibration::{fit_decision_model, CalibratedDecisionModel};
use crate::consistency::{
    build_consistency_set, reassign, validate_consistency, ConsistencyParams, Membership,
};
use crate::data::{load_dataset, monte_carlo_split, DecisionDataset, Schema};
use crate::error::{Error, Result};
use crate::evaluation::{
    profile_rows, run_evaluation, run_evaluation_over, EvaluationOutcome, FitSettings, ModelKind,
    Protocol,
};
use crate::glm::FitOptions;
use crate::influence::{InfluenceEngine, InfluenceEngineState, InfluenceScale};
use crate::scenario::{generate, scenario_suite, GroundTruthBundle, ScenarioSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
/// Exactly one of `path` and `scenario` is set. Fields missing from a
/// `[dataset]` table are absent, not defaulted.
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Schema file; defaults to the `manifest.toml` next to `path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    /// Decision value under which outcomes are observed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selective: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSpec>,
    /// One generated bundle per seed; repetition `r` uses bundle `r`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_seeds: Option<Vec<u64>>,
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource {
            path: None,
            schema: None,
            selective: None,
            scenario: Some(ScenarioSpec::default()),
            scenario_seeds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub scale: InfluenceScale,
    pub calibrate: bool,
    pub tol: f64,
    pub max_iter: usize,
    pub confidence: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let s = FitSettings::default();
        FitConfig {
            scale: s.scale,
            calibrate: s.calibrate,
            tol: s.fit.tol,
            max_iter: s.fit.max_iter,
            confidence: s.confidence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Delta,
    Gamma1,
    Gamma2,
    Gamma3,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "delta" => Ok(SweepParam::Delta),
            "gamma1" => Ok(SweepParam::Gamma1),
            "gamma2" => Ok(SweepParam::Gamma2),
            "gamma3" => Ok(SweepParam::Gamma3),
            _ => Err(Error::usage(format!(
                "unknown sweep parameter `{s}`; expected delta, gamma1, gamma2 or gamma3"
            ))),
        }
    }

    pub fn apply(self, base: &ConsistencyParams, value: f64) -> Result<ConsistencyParams> {
        let mut p = *base;
        match self {
            SweepParam::Delta => p.delta = value,
            SweepParam::Gamma1 => p.gamma1 = value,
            SweepParam::Gamma2 => p.gamma2 = value,
            SweepParam::Gamma3 => p.gamma3 = value,
        }
        p.validate()?;
        Ok(p)
    }

    /// Larger δ or γ₃ admit more cases; larger γ₁ or γ₂ admit fewer.
    pub fn expected_direction(self) -> Direction {
        match self {
            SweepParam::Delta | SweepParam::Gamma3 => Direction::NonDecreasing,
            SweepParam::Gamma1 | SweepParam::Gamma2 => Direction::NonIncreasing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    NonDecreasing,
    NonIncreasing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub values: Vec<f64>,
    /// Run the full evaluation for every value, not only the set fraction.
    #[serde(default = "yes")]
    pub evaluate: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output: PathBuf,
    pub amalgamation: AmalgamationMode,
    pub models: Vec<ModelKind>,
    pub dataset: DatasetSource,
    pub consistency: ConsistencyParams,
    pub protocol: Protocol,
    pub fit: FitConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output: PathBuf::from("out"),
            amalgamation: AmalgamationMode::Full,
            models: ModelKind::STANDARD.to_vec(),
            dataset: DatasetSource::default(),
            consistency: ConsistencyParams::tested(),
            protocol: Protocol::default(),
            fit: FitConfig::default(),
            sweep: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::data(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match (&d.path, &d.scenario) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::usage(
                    "dataset needs exactly one source: `path` or `scenario`",
                ))
            }
            (Some(_), None) if d.scenario_seeds.is_some() => {
                return Err(Error::usage("scenario_seeds needs a scenario source"))
            }
            (None, Some(spec)) => spec.validate()?,
            _ => {}
        }
        self.consistency.validate()?;
        if self.models.is_empty() {
            return Err(Error::usage("no models requested"));
        }
        if self.protocol.repetitions == 0 {
            return Err(Error::usage("repetitions must be at least 1"));
        }
        if !(self.protocol.train_fraction > 0.0 && self.protocol.train_fraction < 1.0) {
            return Err(Error::usage("train_fraction outside (0, 1)"));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::usage("sweep values are empty"));
            }
        }
        Ok(())
    }

    pub fn settings(&self) -> FitSettings {
        FitSettings {
            params: self.consistency,
            mode: self.amalgamation,
            scale: self.fit.scale,
            calibrate: self.fit.calibrate,
            fit: FitOptions {
                tol: self.fit.tol,
                max_iter: self.fit.max_iter,
            },
            confidence: self.fit.confidence,
        }
    }

    /// SHA-256 of the canonical TOML form with the output directory blanked,
    /// so the same run written elsewhere hashes the same.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let text = c.to_toml()?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn provenance(&self) -> Result<Provenance> {
        Ok(Provenance {
            config_hash: self.hash()?,
            seed: self.protocol.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    fn csv_comment(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

/// Loads the schema next to a data file: a plain schema document or the
/// `schema` table of a bundle manifest.
pub fn schema_for(data: &Path, explicit: Option<&Path>) -> Result<Schema> {
    if !data.exists() {
        return Err(Error::io(
            data.display().to_string(),
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => data.with_file_name("manifest.toml"),
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    #[derive(Deserialize)]
    struct WithSchema {
        schema: Schema,
    }
    if let Ok(w) = toml::from_str::<WithSchema>(&text) {
        return Ok(w.schema);
    }
    Schema::from_toml_str(&text)
}

/// Datasets described by the source: one per scenario seed, otherwise one.
pub fn load_source(source: &DatasetSource) -> Result<Vec<DecisionDataset>> {
    Ok(load_bundles(source)?.0)
}

fn load_bundles(source: &DatasetSource) -> Result<(Vec<DecisionDataset>, Vec<GroundTruthBundle>)> {
    if let Some(path) = &source.path {
        let schema = schema_for(path, source.schema.as_deref())?;
        let ds = load_dataset(path, &schema, source.selective)?;
        return Ok((vec![ds], Vec::new()));
    }
    let spec = source
        .scenario
        .as_ref()
        .ok_or_else(|| Error::usage("dataset has no source"))?;
    let bundles = match &source.scenario_seeds {
        Some(seeds) if seeds.is_empty() => return Err(Error::usage("scenario_seeds is empty")),
        Some(seeds) => scenario_suite(spec, seeds)?,
        None => vec![generate(spec)?],
    };
    Ok((bundles.iter().map(|b| b.dataset.clone()).collect(), bundles))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub provenance: Provenance,
    pub model: CalibratedDecisionModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineFile {
    pub format_version: u32,
    pub provenance: Provenance,
    pub engine: InfluenceEngineState,
}

/// Manifest of a saved hybrid, deferral or amalgam predictor. Component
/// paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorManifest {
    pub format_version: u32,
    pub provenance: Provenance,
    pub kind: PredictorKind,
    #[serde(default)]
    pub retrained: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<ConsistencyParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision_model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub influence_engine: Option<String>,
    /// f̂_A for the amalgam kind, the outcome model otherwise.
    pub model: String,
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::data(e.to_string()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn check_version(v: u32, path: &Path) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::data(format!(
            "{}: format_version {v} is not supported (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    Ok(())
}

pub fn model_to_toml(model: &CalibratedDecisionModel, provenance: &Provenance) -> Result<String> {
    to_toml(&ModelFile {
        format_version: FORMAT_VERSION,
        provenance: provenance.clone(),
        model: model.clone(),
    })
}

pub fn model_from_toml(text: &str) -> Result<CalibratedDecisionModel> {
    let f: ModelFile = toml::from_str(text).map_err(|e| Error::data(format!("invalid model file: {e}")))?;
    check_version(f.format_version, Path::new("model"))?;
    Ok(f.model)
}

pub fn save_model(model: &CalibratedDecisionModel, path: &Path, provenance: &Provenance) -> Result<()> {
    write_file(path, &model_to_toml(model, provenance)?)
}

pub fn load_model(path: &Path) -> Result<CalibratedDecisionModel> {
    model_from_toml(&read_file(path)?).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn save_engine(engine: &InfluenceEngine, path: &Path, provenance: &Provenance) -> Result<()> {
    write_file(
        path,
        &to_toml(&EngineFile {
            format_version: FORMAT_VERSION,
            provenance: provenance.clone(),
            engine: engine.to_state(),
        })?,
    )
}

pub fn load_engine(path: &Path) -> Result<InfluenceEngine> {
    let f: EngineFile = toml::from_str(&read_file(path)?)
        .map_err(|e| Error::data(format!("{}: invalid engine file: {e}", path.display())))?;
    check_version(f.format_version, path)?;
    InfluenceEngine::from_state(f.engine)
}

/// Writes the predictor's components next to `manifest_path` (named after
/// its stem) and the manifest itself.
pub fn save_predictor(pred: &LeveragedPredictor, manifest_path: &Path, provenance: &Provenance) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("predictor")
        .to_string();
    let model_name = format!("{stem}.model.toml");
    let mut manifest = PredictorManifest {
        format_version: FORMAT_VERSION,
        provenance: provenance.clone(),
        kind: pred.kind(),
        retrained: false,
        params: None,
        decision_model: None,
        influence_engine: None,
        model: model_name.clone(),
    };
    let outcome = match pred {
        LeveragedPredictor::Amalgam { model } => model,
        LeveragedPredictor::Hybrid {
            outcome_model,
            retrained,
            ..
        } => {
            manifest.retrained = *retrained;
            outcome_model
        }
        LeveragedPredictor::Deferral { outcome_model, .. } => outcome_model,
    };
    save_model(outcome, &dir.join(&model_name), provenance)?;
    if let Some(rule) = pred.rule() {
        let dm = format!("{stem}.decision.toml");
        let en = format!("{stem}.engine.toml");
        save_model(&rule.decision_model, &dir.join(&dm), provenance)?;
        save_engine(&rule.engine, &dir.join(&en), provenance)?;
        manifest.params = Some(rule.params);
        manifest.decision_model = Some(dm);
        manifest.influence_engine = Some(en);
    }
    write_file(manifest_path, &to_toml(&manifest)?)
}

pub fn load_predictor(manifest_path: &Path) -> Result<LeveragedPredictor> {
    let m: PredictorManifest = toml::from_str(&read_file(manifest_path)?)
        .map_err(|e| Error::data(format!("{}: invalid predictor manifest: {e}", manifest_path.display())))?;
    check_version(m.format_version, manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let model = load_model(&dir.join(&m.model))?;
    let rule = || -> Result<MembershipRule> {
        let missing = || Error::data("predictor manifest lacks its membership rule");
        Ok(MembershipRule {
            decision_model: load_model(&dir.join(m.decision_model.as_ref().ok_or_else(missing)?))?,
            engine: load_engine(&dir.join(m.influence_engine.as_ref().ok_or_else(missing)?))?,
            params: m.params.ok_or_else(missing)?,
        })
    };
    Ok(match m.kind {
        PredictorKind::Amalgam => LeveragedPredictor::Amalgam { model },
        PredictorKind::Hybrid => LeveragedPredictor::Hybrid {
            rule: rule()?,
            outcome_model: model,
            retrained: m.retrained,
        },
        PredictorKind::Deferral => LeveragedPredictor::Deferral {
            rule: rule()?,
            outcome_model: model,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub provenance: Provenance,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Written files, relative to the output directory.
    pub files: Vec<String>,
}

/// Collects files under one output directory and stamps their provenance.
pub struct ArtifactWriter {
    root: PathBuf,
    provenance: Provenance,
    files: Vec<String>,
}

impl ArtifactWriter {
    pub fn new(root: &Path, provenance: Provenance) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;
        let probe = root.join(".write-probe");
        std::fs::write(&probe, b"").map_err(|e| Error::io(root.display().to_string(), e))?;
        let _ = std::fs::remove_file(&probe);
        Ok(ArtifactWriter {
            root: root.to_path_buf(),
            provenance,
            files: Vec::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    fn record(&mut self, rel: &str) {
        self.files.push(rel.to_string());
    }

    pub fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        write_file(&self.path(rel), text)?;
        self.record(rel);
        Ok(())
    }

    pub fn csv(&mut self, rel: &str, body: &str) -> Result<()> {
        let text = format!("{}{}", self.provenance.csv_comment(), body);
        self.text(rel, &text)
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Stamped<'a, T> {
            provenance: &'a Provenance,
            #[serde(flatten)]
            value: &'a T,
        }
        let text = serde_json::to_string_pretty(&Stamped {
            provenance: &self.provenance,
            value,
        })
        .map_err(|e| Error::data(e.to_string()))?;
        self.text(rel, &(text + "\n"))
    }

    pub fn model(&mut self, rel: &str, model: &CalibratedDecisionModel) -> Result<()> {
        let text = model_to_toml(model, &self.provenance)?;
        self.text(rel, &text)
    }

    pub fn predictor(&mut self, rel: &str, pred: &LeveragedPredictor) -> Result<()> {
        let path = self.path(rel);
        save_predictor(pred, &path, &self.provenance)?;
        let stem = rel.trim_end_matches(".toml");
        self.record(&format!("{stem}.model.toml"));
        if pred.rule().is_some() {
            self.record(&format!("{stem}.decision.toml"));
            self.record(&format!("{stem}.engine.toml"));
        }
        self.record(rel);
        Ok(())
    }

    /// Writes `manifest.toml` and returns the list of files.
    pub fn finish(mut self, failure: Option<(&str, &Error)>) -> Result<Vec<String>> {
        let manifest = RunManifest {
            format_version: FORMAT_VERSION,
            provenance: self.provenance.clone(),
            status: if failure.is_some() { "failed (partial outputs)" } else { "complete" }.into(),
            failed_stage: failure.map(|(s, _)| s.to_string()),
            error: failure.map(|(_, e)| e.to_string()),
            files: self.files.clone(),
        };
        let text = to_toml(&manifest)?;
        write_file(&self.path("manifest.toml"), &text)?;
        self.files.push("manifest.toml".into());
        Ok(self.files)
    }
}

fn csv_body(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::data(e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::data(e.to_string()))
}

fn membership_name(m: Membership) -> &'static str {
    match m {
        Membership::InA0 => "A0",
        Membership::InA1 => "A1",
        Membership::Outside => "outside",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

/// Result of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub evaluation: EvaluationOutcome,
    pub files: Vec<String>,
    pub sweep: Option<SweepReport>,
}

/// Runs the stages in order on the reference repetition, writing each
/// artifact as soon as it exists, then the full evaluation.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineResult> {
    config.validate()?;
    let mut w = ArtifactWriter::new(&config.output, config.provenance()?)?;
    let mut stage = "load";
    let outcome = pipeline_stages(config, &mut w, &mut stage);
    match outcome {
        Ok((evaluation, sweep)) => {
            let files = w.finish(None)?;
            Ok(PipelineResult {
                evaluation,
                files,
                sweep,
            })
        }
        Err(e) => {
            let _ = w.finish(Some((stage, &e)));
            Err(e.at_stage(stage))
        }
    }
}

fn pipeline_stages(
    config: &RunConfig,
    w: &mut ArtifactWriter,
    stage: &mut &'static str,
) -> Result<(EvaluationOutcome, Option<SweepReport>)> {
    let settings = config.settings();
    let mut canonical = config.clone();
    canonical.output = PathBuf::new();
    w.text("config.toml", &canonical.to_toml()?)?;
    let (datasets, bundles) = load_bundles(&config.dataset)?;
    for (j, b) in bundles.iter().enumerate() {
        let mut body = Vec::new();
        let extra = bundle_extra(b);
        crate::data::write_dataset_to(&b.dataset, &mut body, &extra)?;
        let body = String::from_utf8(body).map_err(|e| Error::data(e.to_string()))?;
        w.csv(&format!("data/bundle_{j}.csv"), &body)?;
    }
    let ds = &datasets[0];

    *stage = "split";
    let split = monte_carlo_split(ds, config.protocol.train_fraction, config.protocol.seed, ds.linkage.as_deref())?;
    w.json("split.json", &split)?;
    let train = ds.subset(&split.train_indices);
    let test = ds.subset(&split.test_indices);

    *stage = "fit decision model";
    let decision = fit_decision_model(&train.features, &train.decisions, &settings.fit, settings.calibrate)?;
    w.model("models/decision_model.toml", &decision)?;

    *stage = "influence";
    let engine = InfluenceEngine::new(
        &decision.base,
        &train.features,
        &train.decisions,
        &train.expert_ids,
        train.k(),
        settings.scale,
    )?;
    let engine_text = to_toml(&EngineFile {
        format_version: FORMAT_VERSION,
        provenance: w.provenance().clone(),
        engine: engine.to_state(),
    })?;
    w.text("models/influence_engine.toml", &engine_text)?;
    let (probs, profiles) = profile_rows(&decision, &engine, &train)?;
    let mut header: Vec<String> = ["case_id", "probability", "m1", "m2", "m3"].map(String::from).to_vec();
    header.extend(ds.expert_labels.iter().map(|l| format!("influence[{l}]")));
    let body = csv_body(
        &header,
        (0..train.n()).map(|i| {
            let p = &profiles[i];
            let mut r = vec![
                train.case_ids[i].to_string(),
                format!("{:?}", probs[i]),
                opt(p.m1),
                format!("{:?}", p.m2),
                format!("{:?}", p.m3),
            ];
            r.extend(p.per_expert.iter().map(|v| format!("{v:?}")));
            r
        }),
    )?;
    w.csv("influence.csv", &body)?;

    *stage = "consistency";
    let assignment = build_consistency_set(&probs, &profiles, &settings.params, Some(&train.decisions))?;
    let body = csv_body(
        &["case_id", "decision", "membership"].map(String::from),
        (0..train.n()).map(|i| {
            vec![
                train.case_ids[i].to_string(),
                train.decisions[i].to_string(),
                membership_name(assignment.membership[i]).to_string(),
            ]
        }),
    )?;
    w.csv("consistency.csv", &body)?;
    let (tp, tprof) = profile_rows(&decision, &engine, &test)?;
    let validation = validate_consistency(&tp, &tprof, &test.decisions, &settings.params, settings.confidence)?;
    #[derive(Serialize)]
    struct ConsistencySummary<'a> {
        params: ConsistencyParams,
        train_cases: usize,
        members_a0: usize,
        members_a1: usize,
        holdout_validation: &'a crate::consistency::ValidationReport,
    }
    let count = |m: Membership| assignment.membership.iter().filter(|&&x| x == m).count();
    w.json(
        "consistency.json",
        &ConsistencySummary {
            params: settings.params,
            train_cases: train.n(),
            members_a0: count(Membership::InA0),
            members_a1: count(Membership::InA1),
            holdout_validation: &validation,
        },
    )?;

    *stage = "amalgamate";
    let plan = amalgamate(&train, &assignment, settings.mode)?;
    let body = csv_body(
        &["case_id", "label", "provenance"].map(String::from),
        (0..train.n()).map(|i| {
            vec![
                train.case_ids[i].to_string(),
                plan.labels[i].map_or(String::new(), |l| l.to_string()),
                format!("{:?}", plan.provenance[i]),
            ]
        }),
    )?;
    w.csv("amalgamation.csv", &body)?;

    *stage = "fit leveraged models";
    let outcome = fit_on_labels(&train.features, &train.outcomes, &settings.fit, settings.calibrate)?;
    w.model("models/outcome_model.toml", &outcome)?;
    let amalgam = fit_amalgam_model(&train.features, &plan, &settings.fit, settings.calibrate)?;
    w.model("models/amalgam_model.toml", &amalgam)?;
    let rule = MembershipRule {
        decision_model: decision.clone(),
        engine: engine.clone(),
        params: settings.params,
    };
    w.predictor(
        "predictors/f_A.toml",
        &LeveragedPredictor::Amalgam {
            model: amalgam.clone(),
        },
    )?;
    w.predictor(
        "predictors/f_hyb.toml",
        &LeveragedPredictor::Hybrid {
            rule: rule.clone(),
            outcome_model: outcome.clone(),
            retrained: false,
        },
    )?;
    let outside_labels = outside_set_labels(&train.outcomes, &assignment, settings.mode);
    match fit_on_labels(&train.features, &outside_labels, &settings.fit, settings.calibrate) {
        Ok(outside) => {
            w.model("models/outside_model.toml", &outside)?;
            w.predictor(
                "predictors/f_hyb_retrained.toml",
                &LeveragedPredictor::Hybrid {
                    rule: rule.clone(),
                    outcome_model: outside.clone(),
                    retrained: true,
                },
            )?;
            w.predictor(
                "predictors/f_defer.toml",
                &LeveragedPredictor::Deferral {
                    rule,
                    outcome_model: outside,
                },
            )?;
        }
        Err(e) => {
            if config.models.iter().any(|k| matches!(k, ModelKind::Deferral | ModelKind::HybridRetrained)) {
                return Err(e);
            }
        }
    }

    *stage = "evaluate";
    let evaluation = evaluate_datasets(&config.models, &datasets, config, &settings)?;
    w.json("report.json", &evaluation)?;
    w.csv("report.csv", &evaluation.to_csv())?;

    let sweep = match &config.sweep {
        None => None,
        Some(s) => {
            *stage = "sweep";
            Some(sweep_into(config, s, &datasets, w)?)
        }
    };
    Ok((evaluation, sweep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub provenance: Provenance,
    pub data_file: String,
    pub schema: Schema,
    pub spec: ScenarioSpec,
}

/// Writes `bundle.csv` (with the ground-truth columns `y1`, `y2`,
/// `hard_subgroup`) and `manifest.toml` into `dir`.
pub fn write_bundle(bundle: &GroundTruthBundle, dir: &Path, provenance: &Provenance) -> Result<(PathBuf, PathBuf)> {
    let mut body = Vec::new();
    let schema = crate::data::write_dataset_to(&bundle.dataset, &mut body, &bundle_extra(bundle))?;
    let body = String::from_utf8(body).map_err(|e| Error::data(e.to_string()))?;
    let data_path = dir.join("bundle.csv");
    write_file(&data_path, &format!("{}{}", provenance.csv_comment(), body))?;
    let manifest = BundleManifest {
        format_version: FORMAT_VERSION,
        provenance: provenance.clone(),
        data_file: "bundle.csv".into(),
        schema,
        spec: bundle.spec.clone(),
    };
    let manifest_path = dir.join("manifest.toml");
    write_file(&manifest_path, &to_toml(&manifest)?)?;
    Ok((data_path, manifest_path))
}

fn bundle_extra(b: &GroundTruthBundle) -> Vec<(String, Vec<String>)> {
    let to_s = |v: &[u8]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    vec![
        ("y1".into(), to_s(&b.y1)),
        ("y2".into(), to_s(&b.y2)),
        (
            "hard_subgroup".into(),
            b.hard_subgroup.iter().map(|&h| (h as u8).to_string()).collect(),
        ),
    ]
}

fn evaluate_datasets(
    kinds: &[ModelKind],
    datasets: &[DecisionDataset],
    config: &RunConfig,
    settings: &FitSettings,
) -> Result<EvaluationOutcome> {
    if datasets.len() > 1 {
        run_evaluation_over(kinds, datasets, &config.protocol, settings)
    } else {
        run_evaluation(kinds, &datasets[0], &config.protocol, settings)
    }
}

/// Only evaluates; no intermediate artifacts.
pub fn run_evaluate(config: &RunConfig) -> Result<EvaluationOutcome> {
    config.validate()?;
    let datasets = load_source(&config.dataset)?;
    evaluate_datasets(&config.models, &datasets, config, &config.settings())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub params: ConsistencyParams,
    /// Share of training cases whose label comes from the decision.
    pub amalgamated_fraction: f64,
    pub auc_amalgam: Option<f64>,
    pub auc_outcome: Option<f64>,
    pub minority_tnr_amalgam: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub expected: Direction,
    /// Points in ascending order of the swept value.
    pub points: Vec<SweepPoint>,
    pub monotone: bool,
}

/// Whether `values` moves in `direction`.
pub fn is_monotone(values: &[f64], direction: Direction) -> bool {
    values.windows(2).all(|w| match direction {
        Direction::NonDecreasing => w[1] >= w[0],
        Direction::NonIncreasing => w[1] <= w[0],
    })
}

/// Amalgamated fraction on the reference training fold for each value.
///
/// The decision model and influence profiles do not depend on the
/// thresholds, so they are fitted once and the set is re-derived per value.
pub fn sweep_fractions(
    ds: &DecisionDataset,
    config: &RunConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<(f64, ConsistencyParams, f64)>> {
    if values.is_empty() {
        return Err(Error::usage("sweep values are empty"));
    }
    let settings = config.settings();
    let split = monte_carlo_split(ds, config.protocol.train_fraction, config.protocol.seed, ds.linkage.as_deref())?;
    let train = ds.subset(&split.train_indices);
    let decision = fit_decision_model(&train.features, &train.decisions, &settings.fit, settings.calibrate)?;
    let engine = InfluenceEngine::new(
        &decision.base,
        &train.features,
        &train.decisions,
        &train.expert_ids,
        train.k(),
        settings.scale,
    )?;
    let (probs, profiles) = profile_rows(&decision, &engine, &train)?;
    let base = build_consistency_set(&probs, &profiles, &settings.params, Some(&train.decisions))?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|v| {
            let params = param.apply(&config.consistency, v)?;
            let a = reassign(&base, &params, Some(&train.decisions))?;
            let plan = amalgamate(&train, &a, settings.mode)?;
            Ok((v, params, plan.from_decision_count() as f64 / train.n() as f64))
        })
        .collect()
}

fn sweep_into(
    config: &RunConfig,
    sweep: &SweepConfig,
    datasets: &[DecisionDataset],
    w: &mut ArtifactWriter,
) -> Result<SweepReport> {
    let fractions = sweep_fractions(&datasets[0], config, sweep.param, &sweep.values)?;
    let mut points = Vec::new();
    for (v, params, frac) in fractions {
        let mut point = SweepPoint {
            value: v,
            params,
            amalgamated_fraction: frac,
            auc_amalgam: None,
            auc_outcome: None,
            minority_tnr_amalgam: None,
            report: None,
        };
        if sweep.evaluate {
            let mut c = config.clone();
            c.consistency = params;
            let out = evaluate_datasets(&config.models, datasets, &c, &c.settings())?;
            let rel = format!("sweep/{}={v}/report.json", param_name(sweep.param));
            w.json(&rel, &out)?;
            point.auc_amalgam = out.report(ModelKind::Amalgam).and_then(|r| r.auc).map(|s| s.mean);
            point.auc_outcome = out.report(ModelKind::Outcome).and_then(|r| r.auc).map(|s| s.mean);
            point.minority_tnr_amalgam = out
                .report(ModelKind::Amalgam)
                .and_then(|r| r.tnr_by_group.get("group=1"))
                .map(|s| s.mean);
            point.report = Some(rel);
        }
        points.push(point);
    }
    let fr: Vec<f64> = points.iter().map(|p| p.amalgamated_fraction).collect();
    let expected = sweep.param.expected_direction();
    let report = SweepReport {
        param: sweep.param,
        expected,
        monotone: is_monotone(&fr, expected),
        points,
    };
    w.json("sweep.json", &report)?;
    Ok(report)
}

fn param_name(p: SweepParam) -> &'static str {
    match p {
        SweepParam::Delta => "delta",
        SweepParam::Gamma1 => "gamma1",
        SweepParam::Gamma2 => "gamma2",
        SweepParam::Gamma3 => "gamma3",
    }
}

/// Sweep-only run: writes per-value reports, `sweep.json` and a manifest.
pub fn run_sweep(config: &RunConfig, sweep: &SweepConfig) -> Result<SweepReport> {
    config.validate()?;
    if sweep.values.is_empty() {
        return Err(Error::usage("sweep values are empty"));
    }
    let mut w = ArtifactWriter::new(&config.output, config.provenance()?)?;
    let result = load_source(&config.dataset).and_then(|ds| sweep_into(config, sweep, &ds, &mut w));
    match result {
        Ok(r) => {
            w.finish(None)?;
            Ok(r)
        }
        Err(e) => {
            let _ = w.finish(Some(("sweep", &e)));
            Err(e.at_stage("sweep"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output = PathBuf::from("elsewhere");
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.protocol.seed = 9;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn a_path_source_does_not_inherit_the_default_scenario() {
        let c = RunConfig::from_toml_str("[dataset]\npath = \"data.csv\"\n").unwrap();
        assert!(c.dataset.scenario.is_none());
        assert!(RunConfig::from_toml_str("").unwrap().dataset.scenario.is_some());
    }

    #[test]
    fn both_sources_are_rejected() {
        let mut c = RunConfig::default();
        c.dataset.path = Some("x.csv".into());
        assert!(c.validate().is_err());
        c.dataset.scenario = None;
        c.dataset.path = None;
        assert!(c.validate().is_err());
    }

    #[test]
    fn monotonicity_check() {
        assert!(is_monotone(&[0.1, 0.1, 0.3], Direction::NonDecreasing));
        assert!(!is_monotone(&[0.1, 0.05], Direction::NonDecreasing));
        assert!(is_monotone(&[0.3, 0.2], Direction::NonIncreasing));
    }

    #[test]
    fn unknown_sweep_parameter() {
        assert!(SweepParam::parse("gamma9").is_err());
        assert_eq!(SweepParam::parse("Gamma2").unwrap(), SweepParam::Gamma2);
    }
}
