use expert_consistency::calibration::{CalibratedDecisionModel, SigmoidCalibrator};
use expert_consistency::glm::WeightedLogisticModel;
use expert_consistency::pipeline::{
    load_engine, load_model, load_predictor, model_from_toml, model_to_toml, run_pipeline,
    run_sweep, DatasetSource, Provenance, RunConfig, RunManifest, SweepConfig, SweepParam,
};
use expert_consistency::scenario::{generate, Scenario, ScenarioSpec};
use expert_consistency::Error;
use proptest::prelude::*;

fn small_config(dir: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.output = dir.to_path_buf();
    c.protocol.repetitions = 2;
    c.dataset = DatasetSource {
        scenario: Some(ScenarioSpec::new(Scenario::CIHo, 1200, 4)),
        ..DatasetSource::default()
    };
    c
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e300f64..1e300, -1.0f64..1.0, Just(0.0), Just(-0.0), Just(f64::MIN_POSITIVE)]
}

proptest! {
    #[test]
    fn model_toml_round_trip_is_bit_exact(
        theta in prop::collection::vec(finite(), 1..8),
        ridge in 0.0f64..1e3,
        cal in prop::option::of((finite(), finite())),
    ) {
        let model = CalibratedDecisionModel {
            base: WeightedLogisticModel {
                feature_count: theta.len() - 1,
                theta,
                ridge,
                grad_norm_at_opt: 1e-9,
            },
            calibrator: cal.map(|(a, b)| SigmoidCalibrator { slope_a: a, offset_b: b }),
        };
        let prov = Provenance { config_hash: "h".into(), seed: 1 };
        let back = model_from_toml(&model_to_toml(&model, &prov).unwrap()).unwrap();
        let bits = |m: &CalibratedDecisionModel| {
            let mut v: Vec<u64> = m.base.theta.iter().map(|t| t.to_bits()).collect();
            v.push(m.base.ridge.to_bits());
            if let Some(c) = &m.calibrator {
                v.push(c.slope_a.to_bits());
                v.push(c.offset_b.to_bits());
            }
            v
        };
        prop_assert_eq!(bits(&back), bits(&model));
        prop_assert_eq!(back.calibrator.is_some(), model.calibrator.is_some());
    }
}

#[test]
fn saved_artifacts_reproduce_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let result = run_pipeline(&config).unwrap();
    for f in ["report.csv", "report.json", "consistency.json", "split.json", "manifest.toml"] {
        assert!(result.files.iter().any(|x| x == f), "missing {f}");
    }
    let probe = generate(&ScenarioSpec::new(Scenario::CIHo, 200, 99)).unwrap().dataset;
    let decision = load_model(&tmp.path().join("models/decision_model.toml")).unwrap();
    let engine = load_engine(&tmp.path().join("models/influence_engine.toml")).unwrap();
    let hybrid = load_predictor(&tmp.path().join("predictors/f_hyb.toml")).unwrap();
    let again = load_predictor(&tmp.path().join("predictors/f_hyb.toml")).unwrap();
    let deferral = load_predictor(&tmp.path().join("predictors/f_defer.toml")).unwrap();
    for i in 0..probe.n() {
        let r = probe.row(i);
        assert_eq!(hybrid.predict(&r).unwrap(), again.predict(&r).unwrap());
        let rule = deferral.rule().unwrap();
        assert_eq!(
            rule.decision_model.predict_proba(&r).unwrap().to_bits(),
            decision.predict_proba(&r).unwrap().to_bits()
        );
        let a = rule.engine.per_expert(&r).unwrap();
        let b = engine.per_expert(&r).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let csv = std::fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1 + 5, "{csv}");
}

#[test]
fn failed_stage_is_recorded_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_config(tmp.path());
    config.dataset = DatasetSource {
        path: Some(tmp.path().join("absent.csv")),
        scenario: None,
        ..DatasetSource::default()
    };
    let err = run_pipeline(&config).unwrap_err();
    assert_eq!(err.exit_code(), Error::io("x", std::io::ErrorKind::NotFound.into()).exit_code());
    let text = std::fs::read_to_string(tmp.path().join("manifest.toml")).unwrap();
    let manifest: RunManifest = toml::from_str(&text).unwrap();
    assert!(manifest.status.starts_with("failed"));
    assert_eq!(manifest.failed_stage.as_deref(), Some("load"));
}

#[test]
fn gamma2_sweep_writes_one_report_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let sweep = SweepConfig {
        param: SweepParam::Gamma2,
        values: vec![0.5, 0.8, 0.95],
        evaluate: true,
    };
    let report = run_sweep(&config, &sweep).unwrap();
    assert!(report.monotone);
    assert_eq!(report.points.len(), 3);
    for p in &report.points {
        let rel = p.report.as_ref().unwrap();
        assert!(tmp.path().join(rel).exists(), "{rel}");
        assert!(p.auc_amalgam.is_some() && p.auc_outcome.is_some());
    }
}
