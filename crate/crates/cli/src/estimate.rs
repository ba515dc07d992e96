//! `estimate` and `cif`: analyses of a user-supplied dataset.

use clap::Args;
use serde::Serialize;
use sepfx_core::data::{read_csv, validate};
use sepfx_core::eif::{one_step, write_contributions_csv};
use sepfx_core::functionals::{cumulative_incidences, plug_in_effect, plug_in_see};
use sepfx_core::inference::{
    bootstrap, bootstrap_statistic, normal_quantile, EffectEstimate, Estimator, EstimatorSpec,
};
use sepfx_core::nuisance::{fit_cox, Design, PropensitySpec, Target};
use sepfx_core::tmle::{tmle_curve, TmleOptions};
use sepfx_core::{
    CoxFit, CsvSchema, Dataset, Estimand, Event, Execution, NuisanceSet, NuisanceSpec,
    Propensity, StepFunction, SurvivalForm,
};

use crate::output::{opt, CurveTable, InputRecord, OutDir, SCHEMA_VERSION};
use crate::{
    check_grid, parse_effect, parse_estimator, parse_times, DataArgs, Failure, PropensityMode,
    RunArgs,
};

const EXEC: Execution = Execution::Parallel;
const FORM: SurvivalForm = SurvivalForm::Exponential;

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated evaluation times, strictly increasing.
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_times)]
    pub times: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "plugin,onestep", value_parser = parse_estimator)]
    pub estimators: Vec<Estimator>,
    /// Effects to estimate: direct0, direct1, indirect0, indirect1 (or total, riskXY).
    #[arg(long, value_delimiter = ',', default_value = "direct0,direct1,indirect0,indirect1", value_parser = parse_effect)]
    #[serde(serialize_with = "labels")]
    pub effect: Vec<Estimand>,
    /// Bootstrap resamples; 0 disables the bootstrap.
    #[arg(long = "bootstrap-B", default_value_t = 0)]
    pub bootstrap_b: usize,
    #[arg(long, default_value_t = 0.95)]
    pub ci_level: f64,
    /// Points of the evenly spaced plotting grid on [0, max time] in curves.csv.
    #[arg(long, default_value_t = 101)]
    pub grid_points: usize,
    /// Also write per-subject influence values of the one-step estimator.
    #[arg(long)]
    pub dump_eif: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CifArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Evaluation times; defaults to an evenly spaced grid up to the last observed time.
    #[arg(long, value_delimiter = ',', value_parser = parse_times)]
    pub times: Option<Vec<f64>>,
    #[arg(long, default_value_t = 101)]
    pub grid_points: usize,
    /// Bootstrap resamples for the pointwise bands; 0 disables them.
    #[arg(long = "bootstrap-B", default_value_t = 200)]
    pub bootstrap_b: usize,
    #[arg(long, default_value_t = 0.95)]
    pub ci_level: f64,
    #[command(flatten)]
    pub run: RunArgs,
}

fn labels<S: serde::Serializer>(effects: &[Estimand], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(effects.iter().map(|e| e.to_string()))
}

fn check_level(level: f64) -> Result<(), Failure> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Failure::usage(format!("--ci-level must lie in (0,1), got {level}")))
    }
}

fn check_bootstrap(b: usize) -> Result<(), Failure> {
    if b == 1 {
        Err(Failure::usage("--bootstrap-B must be 0 or at least 2"))
    } else {
        Ok(())
    }
}

fn load(data: &DataArgs) -> Result<(InputRecord, Dataset), Failure> {
    let (record, bytes) = InputRecord::read(&data.input)?;
    let schema = CsvSchema {
        time: data.time_col.clone(),
        event: data.event_col.clone(),
        treatment: data.treat_col.clone(),
        covariates: data.covars.clone(),
    };
    let ds = read_csv(bytes.as_slice(), &schema)?;
    Ok((record, ds))
}

/// Column indices of `names`, or every covariate when `names` is `None`.
fn columns(ds: &Dataset, names: Option<&[String]>, flag: &str) -> Result<Vec<usize>, Failure> {
    let Some(names) = names else {
        return Ok((0..ds.dim()).collect());
    };
    names
        .iter()
        .filter(|n| !n.is_empty())
        .map(|n| {
            ds.covariate_index(n)
                .ok_or_else(|| Failure::usage(format!("{flag}: unknown covariate `{n}`")))
        })
        .collect()
}

fn nuisance_spec(ds: &Dataset, data: &DataArgs) -> Result<NuisanceSpec, Failure> {
    let design = |cols| Design {
        treatment: true,
        covariates: cols,
    };
    Ok(NuisanceSpec {
        cause1: design(columns(ds, data.cause1_covars.as_deref(), "--cause1-covars")?),
        cause2: design(columns(ds, data.cause2_covars.as_deref(), "--cause2-covars")?),
        propensity: match data.propensity {
            PropensityMode::Fit => PropensitySpec::Fit(columns(
                ds,
                data.propensity_covars.as_deref(),
                "--propensity-covars",
            )?),
            PropensityMode::Known(p) => PropensitySpec::Known(p),
        },
        censoring: design(columns(ds, Some(&data.censor_covars), "--censor-covars")?),
    })
}

#[derive(Debug, Serialize)]
struct DataSummary {
    n: usize,
    treated: usize,
    cause1_events: usize,
    cause2_events: usize,
    censored: usize,
    covariates: Vec<String>,
    warnings: Vec<String>,
}

impl DataSummary {
    fn new(ds: &Dataset, horizon: f64) -> Self {
        DataSummary {
            n: ds.len(),
            treated: ds.n_treated(),
            cause1_events: ds.count_events(Event::Cause1),
            cause2_events: ds.count_events(Event::Cause2),
            censored: ds.count_events(Event::Censored),
            covariates: ds.covariate_names().to_vec(),
            warnings: validate(ds, Some(horizon)).iter().map(|w| w.to_string()).collect(),
        }
    }
}

#[derive(Debug, Serialize)]
struct HazardRatio {
    model: &'static str,
    term: String,
    coef: f64,
    se: f64,
    hr: f64,
    lo: f64,
    hi: f64,
}

fn hazard_ratios(
    ds: &Dataset,
    nuis: &NuisanceSet,
    level: f64,
) -> Result<Vec<HazardRatio>, Failure> {
    let z = normal_quantile(0.5 + level / 2.0);
    let mut out = Vec::new();
    let models: [(&'static str, Option<&CoxFit>); 3] = [
        ("cause1", Some(&nuis.cause1)),
        ("cause2", Some(&nuis.cause2)),
        ("censoring", nuis.censoring.as_ref()),
    ];
    for (model, fit) in models {
        let Some(fit) = fit else { continue };
        let se = fit.std_errors()?;
        let names = fit
            .design
            .treatment
            .then(|| "treatment".to_string())
            .into_iter()
            .chain(fit.design.covariates.iter().map(|&k| ds.covariate_names()[k].clone()));
        for ((term, &coef), &se) in names.zip(&fit.beta).zip(&se) {
            out.push(HazardRatio {
                model,
                term,
                coef,
                se,
                hr: coef.exp(),
                lo: (coef - z * se).exp(),
                hi: (coef + z * se).exp(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct EffectBlock {
    effect: String,
    estimator: Estimator,
    estimates: Vec<EffectEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap_dropped: Option<usize>,
}

#[derive(Debug, Serialize)]
struct TmleTrace {
    effect: String,
    time: f64,
    initial: f64,
    estimate: f64,
    gammas: Vec<f64>,
    eif_mean: f64,
}

#[derive(Debug, Serialize)]
struct Results {
    schema_version: u32,
    command: &'static str,
    data: DataSummary,
    propensity: String,
    hazard_ratios: Vec<HazardRatio>,
    effects: Vec<EffectBlock>,
    tmle: Vec<TmleTrace>,
    notes: Vec<String>,
}

/// Point estimates and internal standard errors of one estimator.
fn point_estimates(
    ds: &Dataset,
    nuis: &NuisanceSet,
    times: &[f64],
    effect: Estimand,
    estimator: Estimator,
    level: f64,
    traces: &mut Vec<TmleTrace>,
) -> Result<Vec<EffectEstimate>, Failure> {
    let out = match estimator {
        Estimator::PlugIn => {
            let curve = plug_in_effect(ds, nuis, times, effect, FORM, EXEC)?;
            let se = plug_in_see(ds, nuis, times, effect, EXEC)?;
            times
                .iter()
                .zip(curve.values)
                .zip(se)
                .map(|((&t, v), s)| EffectEstimate {
                    se_analytic: Some(s),
                    ..EffectEstimate::new(t, v, level)
                })
                .collect()
        }
        Estimator::OneStep => {
            let os = one_step(ds, nuis, times, effect, FORM, EXEC)?;
            let se = os.curve.se.unwrap_or_default();
            times
                .iter()
                .zip(os.curve.values)
                .zip(se)
                .map(|((&t, v), s)| EffectEstimate {
                    se_eif: s.is_finite().then_some(s),
                    ..EffectEstimate::new(t, v, level)
                })
                .collect()
        }
        Estimator::Tmle => {
            let res = tmle_curve(ds, nuis, times, effect, &TmleOptions::default(), EXEC)?;
            res.into_iter()
                .map(|r| {
                    let e = EffectEstimate::new(r.time, r.estimate, level);
                    traces.push(TmleTrace {
                        effect: effect.to_string(),
                        time: r.time,
                        initial: r.initial,
                        estimate: r.estimate,
                        gammas: r.gammas,
                        eif_mean: r.eif_mean,
                    });
                    e
                })
                .collect()
        }
    };
    Ok(out)
}

fn grid(t_max: f64, points: usize) -> Vec<f64> {
    if points < 2 || t_max <= 0.0 {
        return vec![t_max];
    }
    (0..points)
        .map(|k| t_max * k as f64 / (points - 1) as f64)
        .collect()
}

/// Cumulative incidences stacked as cause 1 arm 0, cause 1 arm 1, cause 2
/// arm 0, cause 2 arm 1; `arms[a]` holds the cause models used for arm `a`.
fn cif_values(
    ds: &Dataset,
    arms: [&NuisanceSet; 2],
    times: &[f64],
    exec: Execution,
) -> sepfx_core::Result<Vec<f64>> {
    let mut by_arm = Vec::with_capacity(2);
    for arm in [0u8, 1] {
        by_arm.push(cumulative_incidences(ds, arms[usize::from(arm)], times, arm, FORM, exec)?);
    }
    let mut out = Vec::with_capacity(4 * times.len());
    for cause in 0..2 {
        for curves in &by_arm {
            out.extend_from_slice(&curves[cause].values);
        }
    }
    Ok(out)
}

/// Cause models for per-arm incidence curves. When an arm has no events of a
/// cause the treatment coefficient has no finite maximizer, so that cause is
/// fitted within each arm on covariates alone and the empty arm gets a zero
/// hazard.
fn arm_models(ds: &Dataset, spec: &NuisanceSpec) -> sepfx_core::Result<[NuisanceSet; 2]> {
    let mut per_arm: [Vec<CoxFit>; 2] = [Vec::new(), Vec::new()];
    for (target, event, design) in [
        (Target::Cause1, Event::Cause1, &spec.cause1),
        (Target::Cause2, Event::Cause2, &spec.cause2),
    ] {
        let events = |a: u8| {
            ds.records()
                .iter()
                .filter(|r| r.treatment == a && r.event == event)
                .count()
        };
        if events(0) > 0 && events(1) > 0 {
            let fit = fit_cox(ds, target, design)?;
            per_arm[0].push(fit.clone());
            per_arm[1].push(fit);
            continue;
        }
        let within = Design {
            treatment: false,
            covariates: design.covariates.clone(),
        };
        for a in [0u8, 1] {
            let fit = if events(a) > 0 {
                let idx: Vec<usize> = (0..ds.len())
                    .filter(|&i| ds.records()[i].treatment == a)
                    .collect();
                fit_cox(&ds.resample(&idx)?, target, &within)?
            } else {
                CoxFit::from_parts(target, Design::empty(), vec![], StepFunction::zero())?
            };
            per_arm[usize::from(a)].push(fit);
        }
    }
    let [mut m0, mut m1] = per_arm;
    let set = |m: &mut Vec<CoxFit>| {
        let c2 = m.pop().expect("two models");
        let c1 = m.pop().expect("two models");
        NuisanceSet::new(c1, c2, Propensity::Known(0.5), None)
    };
    Ok([set(&mut m0)?, set(&mut m1)?])
}

const CIF_LABELS: [(&str, u8); 4] = [("cause1", 0), ("cause1", 1), ("cause2", 0), ("cause2", 1)];

pub fn run_estimate(args: &EstimateArgs) -> Result<(), Failure> {
    check_grid(&args.times)?;
    check_level(args.ci_level)?;
    check_bootstrap(args.bootstrap_b)?;
    if args.estimators.is_empty() || args.effect.is_empty() {
        return Err(Failure::usage("need at least one estimator and one effect"));
    }
    let (input, ds) = load(&args.data)?;
    let spec = nuisance_spec(&ds, &args.data)?;
    let nuis = NuisanceSet::fit(&ds, &spec)?;
    let t_max = *args.times.last().expect("nonempty grid");
    let level = args.ci_level;

    let mut effects = Vec::new();
    let mut traces = Vec::new();
    let mut notes = Vec::new();
    let mut curves = CurveTable::new(&["curve", "estimator", "time", "value", "se", "lo", "hi"]);
    let plot_grid = grid(t_max, args.grid_points);

    for &effect in &args.effect {
        for &estimator in &args.estimators {
            if estimator == Estimator::Tmle && !matches!(effect, Estimand::Direct { .. }) {
                notes.push(format!("tmle skipped for {effect}: only direct effects are targeted"));
                continue;
            }
            let mut estimates =
                point_estimates(&ds, &nuis, &args.times, effect, estimator, level, &mut traces)?;
            let mut dropped = None;
            if args.bootstrap_b >= 2 {
                let bspec = EstimatorSpec::new(estimator, effect, spec.clone());
                let boot = bootstrap(&ds, &bspec, &args.times, args.bootstrap_b, args.run.seed, level, EXEC)?;
                for (j, e) in estimates.iter_mut().enumerate() {
                    e.se_bootstrap = Some(boot.se[j]);
                    e.ci_percentile = Some(boot.percentile[j]);
                }
                dropped = Some(boot.dropped);
            }
            let estimates = estimates
                .into_iter()
                .map(EffectEstimate::finish)
                .collect::<sepfx_core::Result<Vec<_>>>()?;
            effects.push(EffectBlock {
                effect: effect.to_string(),
                estimator,
                estimates,
                bootstrap_dropped: dropped,
            });

            // Plotting curves on the fine grid; TMLE targets each time separately,
            // so it is only plotted at the requested times.
            let plotted = if estimator == Estimator::Tmle {
                effects.last().expect("just pushed").estimates.clone()
            } else {
                point_estimates(&ds, &nuis, &plot_grid, effect, estimator, level, &mut Vec::new())?
                    .into_iter()
                    .map(EffectEstimate::finish)
                    .collect::<sepfx_core::Result<Vec<_>>>()?
            };
            for e in plotted {
                curves.row(&[
                    effect.to_string(),
                    estimator.to_string(),
                    e.time.to_string(),
                    e.estimate.to_string(),
                    opt(e.primary_se()),
                    opt(e.ci.map(|c| c.0)),
                    opt(e.ci.map(|c| c.1)),
                ]);
            }
        }
    }

    let cifs = cif_values(&ds, [&nuis, &nuis], &plot_grid, EXEC)?;
    for (c, (cause, arm)) in CIF_LABELS.iter().enumerate() {
        for (k, &t) in plot_grid.iter().enumerate() {
            curves.row(&[
                format!("cif_{cause}_arm{arm}"),
                "plugin".into(),
                t.to_string(),
                cifs[c * plot_grid.len() + k].to_string(),
                String::new(),
                String::new(),
                String::new(),
            ]);
        }
    }

    let results = Results {
        schema_version: SCHEMA_VERSION,
        command: "estimate",
        data: DataSummary::new(&ds, t_max),
        propensity: match args.data.propensity {
            PropensityMode::Fit => "logistic".into(),
            PropensityMode::Known(p) => format!("known:{p}"),
        },
        hazard_ratios: hazard_ratios(&ds, &nuis, level)?,
        effects,
        tmle: traces,
        notes,
    };

    let mut out = OutDir::create(&args.run.out_dir)?;
    out.write_json("results.json", &results)?;
    out.write("curves.csv", &curves.into_bytes())?;
    if args.dump_eif {
        for &effect in &args.effect {
            let os = one_step(&ds, &nuis, &args.times, effect, FORM, EXEC)?;
            let mut buf = Vec::new();
            write_contributions_csv(&args.times, &os.contributions, &mut buf)?;
            out.write(&format!("eif_{effect}.csv"), &buf)?;
        }
    }
    out.finish("estimate", args, args.run.seed, Some(input))
}

pub fn run_cif(args: &CifArgs) -> Result<(), Failure> {
    check_level(args.ci_level)?;
    check_bootstrap(args.bootstrap_b)?;
    let (input, ds) = load(&args.data)?;
    let times = match &args.times {
        Some(t) => {
            check_grid(t)?;
            t.clone()
        }
        None => grid(ds.max_time(), args.grid_points),
    };
    let spec = nuisance_spec(&ds, &args.data)?;
    let models = arm_models(&ds, &spec)?;
    let values = cif_values(&ds, [&models[0], &models[1]], &times, EXEC)?;

    let m = times.len();
    let bands = if args.bootstrap_b >= 2 {
        // The statistic covers all four curves, stacked along the time axis.
        let stacked: Vec<f64> = (0..4).flat_map(|_| times.iter().copied()).collect();
        let boot = bootstrap_statistic(&ds, &stacked, args.bootstrap_b, args.run.seed, args.ci_level, EXEC, |d, exec| {
            let m = arm_models(d, &spec)?;
            cif_values(d, [&m[0], &m[1]], &times, exec)
        })?;
        Some(boot)
    } else {
        None
    };

    let mut table = CurveTable::new(&["time", "cause", "arm", "value", "se", "lo", "hi"]);
    for (c, (cause, arm)) in CIF_LABELS.iter().enumerate() {
        for (k, &t) in times.iter().enumerate() {
            let j = c * m + k;
            let (se, ci) = match &bands {
                Some(b) => (Some(b.se[j]), Some(b.normal[j])),
                None => (None, None),
            };
            table.row(&[
                t.to_string(),
                cause.trim_start_matches("cause").to_string(),
                arm.to_string(),
                values[j].to_string(),
                opt(se),
                opt(ci.map(|c| c.0)),
                opt(ci.map(|c| c.1)),
            ]);
        }
    }
    let mut out = OutDir::create(&args.run.out_dir)?;
    out.write("cif.csv", &table.into_bytes())?;
    out.finish("cif", args, args.run.seed, Some(input))
}
