//! `excons`: command-line front end for expert-consistency estimation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use expert_consistency::amalgamation::{amalgamate, AmalgamationMode};
use expert_consistency::calibration::fit_decision_model;
use expert_consistency::consistency::{build_consistency_set, ConsistencyParams, Membership};
use expert_consistency::data::DecisionDataset;
use expert_consistency::evaluation::profile_rows;
use expert_consistency::influence::InfluenceEngine;
use expert_consistency::pipeline::{
    load_source, run_evaluate, run_pipeline, run_sweep, save_model, write_bundle, ArtifactWriter,
    DatasetSource, RunConfig, SweepConfig, SweepParam,
};
use expert_consistency::scenario::{generate, Scenario, ScenarioName};
use expert_consistency::{Error, Result};

#[derive(Parser)]
#[command(name = "excons", version, about = "Expert-consistency estimation and label amalgamation")]
struct Cli {
    /// Run configuration (TOML); defaults are shown by `print-config`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for splits and scenario generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file for `fit`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Scenario name: CHo, CIHo, CIHe, DeP, HoF, nRnD or DeS.
    #[arg(long, global = true)]
    scenario: Option<String>,
    /// Consistency thresholds as `delta,gamma1,gamma2,gamma3`.
    #[arg(long, global = true)]
    params: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Schema TOML; defaults to the manifest next to the data file.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Outcomes are observed only when the decision equals this value.
    #[arg(long)]
    selective: Option<u8>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Decision,
    Outcome,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    PositiveOnly,
    NegativeOnly,
}

impl From<Mode> for AmalgamationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => AmalgamationMode::Full,
            Mode::PositiveOnly => AmalgamationMode::PositiveOnly,
            Mode::NegativeOnly => AmalgamationMode::NegativeOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario bundle (data file plus manifest).
    Simulate {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        /// Censor outcomes where the decision is 0.
        #[arg(long)]
        selective: bool,
        #[arg(long)]
        minority_fraction: Option<f64>,
        /// CIHe error-rate range as `a,b`.
        #[arg(long)]
        error_range: Option<String>,
    },
    /// Fit a calibrated logistic model on the whole dataset.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "decision")]
        target: Target,
        #[arg(long)]
        no_calibrate: bool,
    },
    /// Per-expert influence and m1/m2/m3 for every case.
    Influence {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Consistency-set membership for every case.
    Consistency {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Amalgamated labels for every case.
    Amalgamate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Monte-Carlo evaluation of the configured models.
    Evaluate,
    /// All stages with intermediate artifacts, then the evaluation.
    Pipeline,
    /// Amalgamated fraction and headline metrics across parameter values.
    Sweep {
        /// delta, gamma1, gamma2 or gamma3.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        /// Skip the per-value evaluation.
        #[arg(long)]
        fractions_only: bool,
    },
    /// Print the effective configuration with all defaults.
    PrintConfig,
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::usage(format!("`{t}` is not a number")))
        })
        .collect()
}

/// Configuration after applying the global flags.
fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        c.protocol.seed = seed;
        if let Some(spec) = c.dataset.scenario.as_mut() {
            spec.seed = seed;
        }
    }
    if let Some(out) = &cli.out {
        c.output = out.clone();
    }
    if let Some(name) = &cli.scenario {
        let sc = Scenario::parse(name)?;
        let spec = c.dataset.scenario.get_or_insert_with(Default::default);
        spec.scenario = ScenarioName(sc);
        c.dataset.path = None;
        c.dataset.schema = None;
    }
    if let Some(p) = &cli.params {
        c.consistency = ConsistencyParams::parse_list(p)?;
    }
    Ok(c)
}

fn with_data(mut c: RunConfig, data: &DataArgs) -> Result<RunConfig> {
    if let Some(path) = &data.data {
        c.dataset = DatasetSource {
            path: Some(path.clone()),
            schema: data.schema.clone(),
            selective: data.selective,
            scenario: None,
            scenario_seeds: None,
        };
    }
    c.validate()?;
    Ok(c)
}

fn single_dataset(c: &RunConfig) -> Result<DecisionDataset> {
    let mut v = load_source(&c.dataset)?;
    Ok(v.swap_remove(0))
}

struct Fitted {
    ds: DecisionDataset,
    probs: Vec<f64>,
    profiles: Vec<expert_consistency::influence::InfluenceProfile>,
}

fn fit_full(c: &RunConfig) -> Result<Fitted> {
    let ds = single_dataset(c)?;
    let s = c.settings();
    let decision = fit_decision_model(&ds.features, &ds.decisions, &s.fit, s.calibrate)
        .map_err(|e| e.at_stage("fit decision model"))?;
    let engine = InfluenceEngine::new(&decision.base, &ds.features, &ds.decisions, &ds.expert_ids, ds.k(), s.scale)
        .map_err(|e| e.at_stage("influence"))?;
    let (probs, profiles) = profile_rows(&decision, &engine, &ds).map_err(|e| e.at_stage("influence"))?;
    Ok(Fitted { ds, probs, profiles })
}

fn csv_text(header: &[String], rows: Vec<Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn membership_name(m: Membership) -> &'static str {
    match m {
        Membership::InA0 => "A0",
        Membership::InA1 => "A1",
        Membership::Outside => "outside",
    }
}

fn out_dir(c: &RunConfig) -> &Path {
    &c.output
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::PrintConfig => {
            print!("{}", effective_config(&cli)?.to_toml()?);
        }
        Command::Simulate {
            n,
            k,
            m,
            selective,
            minority_fraction,
            error_range,
        } => {
            let mut c = effective_config(&cli)?;
            let spec = c
                .dataset
                .scenario
                .as_mut()
                .ok_or_else(|| Error::usage("simulate needs a scenario"))?;
            if let Some(n) = n {
                spec.n = *n;
            }
            if let Some(k) = k {
                spec.k = *k;
            }
            if let Some(m) = m {
                spec.m = *m;
            }
            if *selective {
                spec.selective = true;
            }
            if let Some(f) = minority_fraction {
                spec.minority_fraction = *f;
            }
            if let Some(r) = error_range {
                let v = parse_list(r)?;
                if v.len() != 2 {
                    return Err(Error::usage("error range needs two values `a,b`"));
                }
                spec.error_range = (v[0], v[1]);
            }
            let spec = spec.clone();
            c.validate()?;
            let bundle = generate(&spec)?;
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("bundle"));
            let (d, m) = write_bundle(&bundle, &dir, &c.provenance()?)?;
            println!("wrote {}", d.display());
            println!("wrote {}", m.display());
        }
        Command::Fit {
            data,
            target,
            no_calibrate,
        } => {
            let c = with_data(effective_config(&cli)?, data)?;
            let ds = single_dataset(&c)?;
            let s = c.settings();
            let calibrate = s.calibrate && !no_calibrate;
            let model = match target {
                Target::Decision => fit_decision_model(&ds.features, &ds.decisions, &s.fit, calibrate)?,
                Target::Outcome => expert_consistency::amalgamation::fit_on_labels(
                    &ds.features,
                    &ds.outcomes,
                    &s.fit,
                    calibrate,
                )?,
            };
            let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("model.toml"));
            save_model(&model, &path, &c.provenance()?)?;
            println!(
                "ridge {} gradient norm {:e}; wrote {}",
                model.base.ridge,
                model.base.grad_norm_at_opt,
                path.display()
            );
        }
        Command::Influence { data } => {
            let c = with_data(effective_config(&cli)?, data)?;
            let f = fit_full(&c)?;
            let mut header: Vec<String> = ["case_id", "probability", "m1", "m2", "m3"].map(String::from).to_vec();
            header.extend(f.ds.expert_labels.iter().map(|l| format!("influence[{l}]")));
            let rows = (0..f.ds.n())
                .map(|i| {
                    let p = &f.profiles[i];
                    let mut r = vec![
                        f.ds.case_ids[i].to_string(),
                        format!("{:?}", f.probs[i]),
                        p.m1.map_or(String::new(), |v| format!("{v:?}")),
                        format!("{:?}", p.m2),
                        format!("{:?}", p.m3),
                    ];
                    r.extend(p.per_expert.iter().map(|v| format!("{v:?}")));
                    r
                })
                .collect();
            let mut w = ArtifactWriter::new(out_dir(&c), c.provenance()?)?;
            w.csv("influence.csv", &csv_text(&header, rows))?;
            w.finish(None)?;
            println!("wrote {}", c.output.join("influence.csv").display());
        }
        Command::Consistency { data } => {
            let c = with_data(effective_config(&cli)?, data)?;
            let f = fit_full(&c)?;
            let a = build_consistency_set(&f.probs, &f.profiles, &c.consistency, Some(&f.ds.decisions))?;
            let rows = (0..f.ds.n())
                .map(|i| {
                    vec![
                        f.ds.case_ids[i].to_string(),
                        f.ds.decisions[i].to_string(),
                        membership_name(a.membership[i]).to_string(),
                    ]
                })
                .collect();
            let mut w = ArtifactWriter::new(out_dir(&c), c.provenance()?)?;
            w.csv(
                "consistency.csv",
                &csv_text(&["case_id", "decision", "membership"].map(String::from), rows),
            )?;
            w.finish(None)?;
            println!(
                "{} of {} cases in the consistency set ({:.1}%)",
                a.member_count(),
                a.len(),
                100.0 * a.member_fraction()
            );
        }
        Command::Amalgamate { data, mode } => {
            let mut c = with_data(effective_config(&cli)?, data)?;
            if let Some(m) = mode {
                c.amalgamation = (*m).into();
            }
            let f = fit_full(&c)?;
            let a = build_consistency_set(&f.probs, &f.profiles, &c.consistency, Some(&f.ds.decisions))?;
            let plan = amalgamate(&f.ds, &a, c.amalgamation)?;
            let rows = (0..f.ds.n())
                .map(|i| {
                    vec![
                        f.ds.case_ids[i].to_string(),
                        plan.labels[i].map_or(String::new(), |l| l.to_string()),
                        format!("{:?}", plan.provenance[i]),
                    ]
                })
                .collect();
            let mut w = ArtifactWriter::new(out_dir(&c), c.provenance()?)?;
            w.csv(
                "amalgamation.csv",
                &csv_text(&["case_id", "label", "provenance"].map(String::from), rows),
            )?;
            w.finish(None)?;
            println!("{} labels taken from decisions", plan.from_decision_count());
        }
        Command::Evaluate => {
            let c = effective_config(&cli)?;
            c.validate()?;
            let outcome = run_evaluate(&c)?;
            let mut w = ArtifactWriter::new(out_dir(&c), c.provenance()?)?;
            w.json("report.json", &outcome)?;
            w.csv("report.csv", &outcome.to_csv())?;
            w.finish(None)?;
            print!("{}", outcome.to_csv());
        }
        Command::Pipeline => {
            let c = effective_config(&cli)?;
            let result = run_pipeline(&c)?;
            print!("{}", result.evaluation.to_csv());
            eprintln!("{} files written to {}", result.files.len(), c.output.display());
        }
        Command::Sweep {
            param,
            values,
            fractions_only,
        } => {
            let c = effective_config(&cli)?;
            let sweep = SweepConfig {
                param: SweepParam::parse(param)?,
                values: parse_list(values)?,
                evaluate: !fractions_only,
            };
            let report = run_sweep(&c, &sweep)?;
            println!("value,amalgamated_fraction,auc_amalgam,auc_outcome");
            let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
            for p in &report.points {
                println!(
                    "{},{:.4},{},{}",
                    p.value,
                    p.amalgamated_fraction,
                    fmt(p.auc_amalgam),
                    fmt(p.auc_outcome)
                );
            }
            println!(
                "monotone ({:?}): {}",
                report.expected,
                if report.monotone { "yes" } else { "NO" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let command_name = match &cli.command {
        Command::Simulate { .. } => "simulate",
        Command::Fit { .. } => "fit",
        Command::Influence { .. } => "influence",
        Command::Consistency { .. } => "consistency",
        Command::Amalgamate { .. } => "amalgamate",
        Command::Evaluate => "evaluate",
        Command::Pipeline => "pipeline",
        Command::Sweep { .. } => "sweep",
        Command::PrintConfig => "print-config",
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 1 {
                eprintln!("run `excons {command_name} --help` for usage");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
