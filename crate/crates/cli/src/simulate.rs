//! `simulate`: replication studies on the built-in scenarios.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use sepfx_core::inference::Estimator;
use sepfx_core::simulation::{run_study, ScenarioId, StudyConfig};
use sepfx_core::{Estimand, Execution};

use crate::output::OutDir;
use crate::{check_grid, parse_effect, parse_estimator, parse_scenario, parse_times, Failure, RunArgs};

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Table1, A1, A2, B1, B2, C1 or C2.
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: ScenarioId,
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    /// Evaluation times; defaults to the scenario's reporting grid.
    #[arg(long, value_delimiter = ',', value_parser = parse_times)]
    pub times: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "plugin,onestep", value_parser = parse_estimator)]
    pub estimators: Vec<Estimator>,
    #[arg(long, default_value = "direct1", value_parser = parse_effect)]
    #[serde(serialize_with = "label")]
    pub effect: Estimand,
    /// Bootstrap resamples per replicate; 0 disables the bootstrap column.
    #[arg(long = "bootstrap-B", default_value_t = 0)]
    pub bootstrap_b: usize,
    #[arg(long, default_value_t = 0.95)]
    pub ci_level: f64,
    /// Extra copy of the JSON report at this path, outside the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

fn label<S: serde::Serializer>(effect: &Estimand, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&effect.to_string())
}

pub fn run(args: &SimulateArgs) -> Result<(), Failure> {
    if args.n == 0 || args.reps == 0 {
        return Err(Failure::usage("--n and --reps must be positive"));
    }
    if args.estimators.is_empty() {
        return Err(Failure::usage("need at least one estimator"));
    }
    if args.bootstrap_b == 1 {
        return Err(Failure::usage("--bootstrap-B must be 0 or at least 2"));
    }
    let mut config = StudyConfig::new(args.scenario, args.n, args.reps, args.run.seed);
    if let Some(times) = &args.times {
        check_grid(times)?;
        config.times = times.clone();
    }
    config.estimators = args.estimators.clone();
    config.estimand = args.effect;
    config.bootstrap_b = args.bootstrap_b;
    config.level = args.ci_level;

    let report = run_study(&config, Execution::Parallel)?;

    let file = StudyFile { schema_version: crate::output::SCHEMA_VERSION, report: &report };
    let mut out = OutDir::create(&args.run.out_dir)?;
    out.write_json("study.json", &file)?;
    if let Some(path) = &args.out {
        let mut text = serde_json::to_string_pretty(&file).map_err(|e| Failure::output(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Failure::output(path, e))?;
    }
    out.write("study.md", report.to_markdown().as_bytes())?;
    out.finish("simulate", args, args.run.seed, None)
}

#[derive(Serialize)]
struct StudyFile<'a> {
    schema_version: u32,
    #[serde(flatten)]
    report: &'a sepfx_core::simulation::StudyReport,
}
