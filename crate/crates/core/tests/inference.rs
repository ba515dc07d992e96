mod common;

use sepfx_core::functionals::plug_in_see;
use sepfx_core::inference::{bootstrap, bootstrap_statistic, confidence_interval, sample_sd, Estimator, EstimatorSpec};
use sepfx_core::simulation::{Scenario, ScenarioId};
use sepfx_core::{Error, Estimand, Execution, NuisanceSet};

const DIRECT1: Estimand = Estimand::Direct { a_d: 1 };

#[test]
fn standard_normal_interval_and_degenerate_se() {
    let (lo, hi) = confidence_interval(0.0, 1.0, 0.95).unwrap();
    assert!((lo + 1.959_963_984_540_054).abs() < 1e-12 && (hi - 1.959_963_984_540_054).abs() < 1e-12);
    assert_eq!(confidence_interval(-0.09, 0.0, 0.95).unwrap(), (-0.09, -0.09));
    assert!(confidence_interval(0.0, 1.0, 1.0).is_err());
    assert!(confidence_interval(0.0, -0.1, 0.9).is_err());
}

#[test]
fn constant_statistic_has_zero_spread() {
    let ds = common::tied_dataset(60, 1);
    let res = bootstrap_statistic(&ds, &[1.0, 2.0], 50, 3, 0.95, Execution::Sequential, |_, _| Ok(vec![0.25, -0.5])).unwrap();
    assert_eq!(res.se, vec![0.0, 0.0]);
    assert_eq!(res.normal, vec![(0.25, 0.25), (-0.5, -0.5)]);
    assert_eq!(res.percentile, vec![(0.25, 0.25), (-0.5, -0.5)]);
}

#[test]
fn failing_resamples_abort_the_bootstrap() {
    let ds = common::tied_dataset(60, 2);
    let res = bootstrap_statistic(&ds, &[1.0], 40, 3, 0.95, Execution::Sequential, |d, _| {
        if d.records() == ds.records() {
            Ok(vec![0.0])
        } else {
            Err(Error::State("refit failed".into()))
        }
    });
    assert!(matches!(res, Err(Error::TooManyFailures { .. })), "{res:?}");
}

#[test]
fn bootstrap_is_deterministic_and_policy_free() {
    let s = Scenario::new(ScenarioId::A1);
    let ds = s.generate(300, 4).unwrap();
    let spec = EstimatorSpec::new(Estimator::OneStep, DIRECT1, s.working_spec());
    let run = |exec| bootstrap(&ds, &spec, &[3.0, 6.0], 40, 77, 0.9, exec).unwrap();
    let a = run(Execution::Sequential);
    assert_eq!(a, run(Execution::Sequential));
    assert_eq!(a, run(Execution::Parallel));
    assert_ne!(a.se, bootstrap(&ds, &spec, &[3.0, 6.0], 40, 78, 0.9, Execution::Parallel).unwrap().se);
}

#[test]
fn bootstrap_se_is_stable_in_b() {
    let s = Scenario::new(ScenarioId::A1);
    let ds = s.generate(400, 5).unwrap();
    let spec = EstimatorSpec::new(Estimator::OneStep, DIRECT1, s.working_spec());
    let small = bootstrap(&ds, &spec, &[5.0], 250, 1, 0.95, Execution::Parallel).unwrap().se[0];
    let large = bootstrap(&ds, &spec, &[5.0], 2000, 2, 0.95, Execution::Parallel).unwrap().se[0];
    assert!((small / large - 1.0).abs() < 0.15, "B=250 {small}, B=2000 {large}");
}

#[test]
fn table1_bootstrap_agrees_with_analytic_se() {
    let s = Scenario::new(ScenarioId::Table1);
    let spec = EstimatorSpec::new(Estimator::PlugIn, DIRECT1, s.working_spec());
    let t = [4.0];
    let mut ratios: Vec<f64> = (0..100)
        .map(|r| {
            let ds = s.generate_replicate(400, 6, r).unwrap();
            let nuis = NuisanceSet::fit(&ds, &spec.nuisance).unwrap();
            let see = plug_in_see(&ds, &nuis, &t, DIRECT1, Execution::Sequential).unwrap()[0];
            see / bootstrap(&ds, &spec, &t, 250, 500 + r, 0.95, Execution::Parallel).unwrap().se[0]
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let median = 0.5 * (ratios[49] + ratios[50]);
    assert!((median - 1.0).abs() < 0.15, "median ratio {median}");
}

#[test]
#[ignore = "published A1 spread not reproduced under the mandated censoring; see decisions ledger"]
fn a1_bootstrap_see_matches_published_at_five() {
    let s = Scenario::new(ScenarioId::A1);
    let spec = EstimatorSpec::new(Estimator::OneStep, DIRECT1, s.working_spec());
    let runs: Vec<(f64, f64)> = (0..1000)
        .map(|r| {
            let ds = s.generate_replicate(400, 7, r).unwrap();
            let b = bootstrap(&ds, &spec, &[5.0], 250, 900 + r, 0.95, Execution::Parallel).unwrap();
            (b.estimate[0], b.se[0])
        })
        .collect();
    let est: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let see = runs.iter().map(|r| r.1).sum::<f64>() / runs.len() as f64;
    assert!((see - 0.033).abs() <= 0.0015, "mean bootstrap see {see}");
    assert!((sample_sd(&est) - 0.033).abs() <= 0.0015, "sd {}", sample_sd(&est));
}
