mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepfx_core::eif::{eif_direct_contribution, one_step};
use sepfx_core::inference::sample_sd;
use sepfx_core::nuisance::{Design, PropensitySpec};
use sepfx_core::simulation::{Scenario, ScenarioId};
use sepfx_core::tmle::{clever_covariates, fluctuation_score, solve_fluctuation, tmle_estimate, TmleOptions};
use sepfx_core::{Dataset, Estimand, Event, Execution, NuisanceSet, NuisanceSpec, Record, SurvivalForm};

const SEQ: Execution = Execution::Sequential;
const EXP: SurvivalForm = SurvivalForm::Exponential;
const DIRECT1: Estimand = Estimand::Direct { a_d: 1 };

#[test]
fn clever_covariates_vanish_after_horizon() {
    let (ds, nuis) = common::fitted(ScenarioId::A1, 200, 1);
    for rec in ds.records().iter().take(10) {
        assert_eq!(clever_covariates(5.0, 4.0, rec, &nuis, EXP).unwrap(), (0.0, 0.0));
    }
}

/// An event of cause `j` at `s` and a censoring at `s` share every compensator
/// term, so the difference of their martingale integrals is the kernel at `s`.
#[test]
fn clever_covariates_match_influence_kernels() {
    let (_, nuis) = common::fitted(ScenarioId::A2, 400, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = rng.random_range(1.0..9.0);
        let s = rng.random_range(0.01..t);
        let a = u8::from(rng.random::<bool>());
        let w = vec![rng.random::<f64>()];
        let at = |e| eif_direct_contribution(t, &Record::new(s, e, a, w.clone()), &nuis).unwrap();
        let censored = at(Event::Censored);
        let h1 = at(Event::Cause1).martingale1 - censored.martingale1;
        let h2 = at(Event::Cause2).martingale2 - censored.martingale2;
        let (c1, c2) = clever_covariates(s, t, &Record::new(s, Event::Censored, a, w.clone()), &nuis, EXP).unwrap();
        worst = worst.max((c1 - h1).abs()).max((c2 - h2).abs());
    }
    assert!(worst < 1e-12, "max difference {worst:e}");
}

#[test]
fn treated_h1_reduces_without_ratio() {
    let (_, nuis) = common::fitted_uncensored(ScenarioId::A1, 400, 4);
    let (s, t, w) = (2.0, 6.0, vec![0.4]);
    let (h1, _) = clever_covariates(s, t, &Record::new(s, Event::Censored, 1, w.clone()), &nuis, EXP).unwrap();
    let f1 = |u: f64| sepfx_core::functionals::p1_conditional(u, 1, 1, &w, &nuis.cause1, &nuis.cause2, EXP).unwrap();
    let surv = nuis.cause1.survival(s, 1, &w) * nuis.cause2.survival(s, 1, &w);
    let g = 1.0 / nuis.propensity.arm(1, &w);
    assert!((h1 - g * (1.0 - (f1(t) - f1(s)) / surv)).abs() < 1e-12);
}

fn toy() -> (Dataset, NuisanceSet) {
    let rows = [
        (0.8, 1, 1, 0.2),
        (1.1, 2, 0, 0.7),
        (1.5, 1, 0, 0.4),
        (2.0, 0, 1, 0.9),
        (2.3, 2, 1, 0.1),
        (2.9, 1, 0, 0.6),
        (3.4, 1, 1, 0.5),
        (4.0, 2, 0, 0.3),
    ];
    let ds = Dataset::new(
        rows.iter().map(|&(t, e, a, w)| Record::new(t, Event::from_code(e).unwrap(), a, vec![w])).collect(),
        vec!["w".into()],
    )
    .unwrap();
    let spec = NuisanceSpec {
        cause1: Design::treatment_only(),
        cause2: Design::treatment_only(),
        propensity: PropensitySpec::Known(0.5),
        censoring: Design::empty(),
    };
    let nuis = NuisanceSet::fit(&ds, &spec).unwrap();
    (ds, nuis)
}

#[test]
fn fluctuation_root_matches_brute_force() {
    let (ds, nuis) = toy();
    let t = 3.5;
    let gamma = solve_fluctuation(&ds, &nuis, t).unwrap();
    let u = |g: f64| fluctuation_score(&ds, &nuis, t, g).unwrap();
    assert!(u(gamma).abs() < 1e-8);

    let argmin = |lo: f64, step: f64, count: i32| {
        (0..=count)
            .map(|k| lo + f64::from(k) * step)
            .min_by(|a, b| u(*a).abs().total_cmp(&u(*b).abs()))
            .unwrap()
    };
    let coarse = argmin(-10.0, 1e-3, 20_000);
    let fine = argmin(coarse - 1e-3, 1e-6, 2000);
    assert!((gamma - fine).abs() <= 1e-6, "solver {gamma}, grid {fine}");
}

#[test]
fn converged_fits_are_targeted() {
    let (ds, nuis) = common::fitted(ScenarioId::C1, 400, 5);
    let res = tmle_estimate(&ds, &nuis, 3.0, DIRECT1, &TmleOptions::default(), SEQ).unwrap();
    assert!(res.gammas.last().unwrap().abs() < 1e-6);
    assert!(res.eif_mean.abs() < 1e-6, "{}", res.eif_mean);
    assert!((-1.0..=1.0).contains(&res.estimate));

    // A further round on hazards that are already targeted does not move.
    let opts = TmleOptions {
        max_iter: res.iterations() + 3,
        ..TmleOptions::default()
    };
    let again = tmle_estimate(&ds, &nuis, 3.0, DIRECT1, &opts, SEQ).unwrap();
    assert_eq!(again.estimate, res.estimate);
}

#[test]
fn tmle_tracks_one_step_in_a1() {
    let s = Scenario::new(ScenarioId::A1);
    let reps = 200;
    let runs: Vec<(f64, f64)> = Execution::Parallel.map(reps, |r| {
        let ds = s.generate_replicate(400, 71, r as u64).unwrap();
        let nuis = NuisanceSet::fit(&ds, &s.working_spec()).unwrap();
        let os = one_step(&ds, &nuis, &[5.0], DIRECT1, EXP, SEQ).unwrap().curve.values[0];
        let tm = tmle_estimate(&ds, &nuis, 5.0, DIRECT1, &TmleOptions::default(), SEQ).unwrap().estimate;
        (os, tm)
    });
    let os: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let tm: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mc = sample_sd(&os) / (reps as f64).sqrt();
    assert!((mean(&tm) - mean(&os)).abs() <= 2.0 * mc, "tmle {} one-step {} mc {mc}", mean(&tm), mean(&os));
}

#[test]
fn tmle_is_robust_in_c1() {
    let s = Scenario::new(ScenarioId::C1);
    let vals: Vec<f64> = Execution::Parallel
        .map(500, |r| {
            let ds = s.generate_replicate(400, 73, r as u64).unwrap();
            let nuis = NuisanceSet::fit(&ds, &s.working_spec()).unwrap();
            tmle_estimate(&ds, &nuis, 1.0, DIRECT1, &TmleOptions::default(), SEQ).ok().map(|r| r.estimate)
        })
        .into_iter()
        .flatten()
        .collect();
    assert!(vals.len() >= 495);
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((mean - 0.065).abs() < 0.01, "mean {mean}");
}
