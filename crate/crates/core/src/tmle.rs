//! Targeted maximum likelihood for the separable direct effect.
//!
//! Both cause-specific hazards of every subject, in both treatment arms, are
//! moved along `dLambda_j * exp(gamma * H_j)` where `H_j` is the influence
//! kernel of the target divided by `K_C(s- | a, W)`. Each round solves the
//! score equation in `gamma`, applies the update and recomputes the kernels
//! until `gamma` is negligible; the estimate is the plug-in at the final hazards.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Event, Record};
use crate::eif::{EifEngine, POSITIVITY_FLOOR};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::functionals::{at_count, p1_conditional, Estimand, SurvivalForm};
use crate::nuisance::{ArmPaths, NuisanceSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TmleOptions {
    pub max_iter: usize,
    /// Convergence threshold on `|gamma|`.
    pub tol: f64,
    /// Required `|U(gamma)|` at each root.
    pub score_tol: f64,
    pub bracket: (f64, f64),
    pub form: SurvivalForm,
}

impl Default for TmleOptions {
    fn default() -> Self {
        TmleOptions {
            max_iter: 20,
            tol: 1e-6,
            score_tol: 1e-8,
            bracket: (-10.0, 10.0),
            form: SurvivalForm::Exponential,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmleResult {
    pub time: f64,
    pub estimate: f64,
    /// Plug-in estimate at the initial hazards.
    pub initial: f64,
    /// Fluctuation parameter of each round.
    pub gammas: Vec<f64>,
    /// Mean of the martingale part of the influence values at the final hazards.
    pub eif_mean: f64,
}

impl TmleResult {
    pub fn iterations(&self) -> usize {
        self.gammas.len()
    }
}

/// Current fluctuated hazards of every subject.
#[derive(Debug, Clone)]
pub struct FluctuationState {
    pub gamma: f64,
    pub paths: Vec<ArmPaths>,
    pub iteration: usize,
}

/// Per-subject pieces of the score equation at the current hazards.
struct ScoreTerms {
    /// Sum of clever covariates at observed events.
    observed: f64,
    /// `(H, dLambda)` pairs over every at-risk grid point of every subject.
    pairs: Vec<(f64, f64)>,
}

impl ScoreTerms {
    fn eval(&self, gamma: f64) -> (f64, f64) {
        let (mut u, mut du) = (self.observed, 0.0);
        for &(h, d) in &self.pairs {
            let e = d * (gamma * h).exp();
            u -= h * e;
            du -= h * h * e;
        }
        (u, du)
    }
}

fn check_estimand(estimand: Estimand) -> Result<()> {
    match estimand {
        Estimand::Direct { .. } => Ok(()),
        other => Err(Error::Unsupported(format!(
            "TMLE targets direct effects only, got {other}"
        ))),
    }
}

struct Tmle<'a> {
    engine: EifEngine<'a>,
    dataset: &'a Dataset,
    count: usize,
    exec: Execution,
}

/// Clever covariates of one subject (both arms) on the grid up to `t`.
struct SubjectClever {
    /// `[arm] -> (H1, H2)` per grid point.
    h1: [Vec<f64>; 2],
    h2: [Vec<f64>; 2],
    observed: f64,
    at_risk: usize,
}

impl<'a> Tmle<'a> {
    fn new(
        dataset: &'a Dataset,
        nuisance: &'a NuisanceSet,
        t: f64,
        estimand: Estimand,
        form: SurvivalForm,
        exec: Execution,
    ) -> Result<Self> {
        check_estimand(estimand)?;
        let engine = EifEngine::new(nuisance, &[t], estimand, form)?;
        let count = engine.counts[0];
        Ok(Tmle {
            engine,
            dataset,
            count,
            exec,
        })
    }

    fn initial_paths(&self) -> Vec<ArmPaths> {
        let records = self.dataset.records();
        self.exec.map(records.len(), |i| {
            self.engine
                .grid
                .arm_paths(self.engine.nuisance, &records[i].covariates)
        })
    }

    fn clever(&self, record: &Record, paths: &ArmPaths) -> Result<SubjectClever> {
        let w = &record.covariates;
        let a_obs = record.treatment;
        let c = self.count;
        let nuisance = self.engine.nuisance;
        let mut h1: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut h2: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut observed = 0.0;
        for a in [0u8, 1] {
            let event = (a == a_obs && record.event.is_event()).then_some(record.time);
            let k = self.engine.arm_kernels(paths, a, w, c, event)?;
            let kc = self.engine.grid.censoring_left(nuisance, a, w, c);
            if let Some(m) = kc.iter().position(|&x| x < POSITIVITY_FLOOR) {
                return Err(Error::Positivity {
                    quantity: "censoring survival",
                    value: kc[m],
                    time: self.engine.grid.times[m],
                });
            }
            let ai = usize::from(a);
            h1[ai] = (0..c).map(|m| k.k1(m, 0) / kc[m]).collect();
            h2[ai] = (0..c).map(|m| k.k2(m, 0) / kc[m]).collect();
            if let Some(s) = event {
                if s <= self.engine.times[0] {
                    let kc_s = nuisance.censoring_survival_left(s, a, w);
                    if kc_s < POSITIVITY_FLOOR {
                        return Err(Error::Positivity {
                            quantity: "censoring survival",
                            value: kc_s,
                            time: s,
                        });
                    }
                    let (k1, k2) = self.engine.kernels_at_event(&k, s, 0);
                    observed += match record.event {
                        Event::Cause1 => k1 / kc_s,
                        Event::Cause2 => k2 / kc_s,
                        Event::Censored => 0.0,
                    };
                }
            }
        }
        Ok(SubjectClever {
            h1,
            h2,
            observed,
            at_risk: self.engine.grid.count_through(record.time).min(c),
        })
    }

    fn clever_all(&self, paths: &[ArmPaths]) -> Result<Vec<SubjectClever>> {
        let records = self.dataset.records();
        self.exec
            .map(records.len(), |i| self.clever(&records[i], &paths[i]))
            .into_iter()
            .collect()
    }

    fn score_terms(&self, clever: &[SubjectClever], paths: &[ArmPaths]) -> ScoreTerms {
        let mut observed = 0.0;
        let mut pairs = Vec::new();
        for (i, (cl, p)) in clever.iter().zip(paths).enumerate() {
            let a = usize::from(self.dataset.records()[i].treatment);
            observed += cl.observed;
            for m in 0..cl.at_risk {
                pairs.push((cl.h1[a][m], p.d1[a][m]));
                pairs.push((cl.h2[a][m], p.d2[a][m]));
            }
        }
        ScoreTerms { observed, pairs }
    }

    fn readout(&self, paths: &[ArmPaths]) -> f64 {
        let form = self.engine.form;
        let c = self.count;
        let total: f64 = paths
            .iter()
            .map(|p| {
                self.engine
                    .estimand
                    .terms()
                    .iter()
                    .map(|term| {
                        let path = crate::functionals::term_path(p, term.a_y, term.a_d, c, form);
                        term.coef * at_count(&path.p, c)
                    })
                    .sum::<f64>()
            })
            .sum();
        total / paths.len() as f64
    }
}

fn solve_score(terms: &ScoreTerms, opts: &TmleOptions) -> Result<f64> {
    let (u0, _) = terms.eval(0.0);
    if u0.abs() < opts.score_tol {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = opts.bracket;
    let (u_lo, _) = terms.eval(lo);
    let (u_hi, _) = terms.eval(hi);
    // U is nonincreasing in gamma, so a root needs U(lo) >= 0 >= U(hi).
    if u_lo.abs() < opts.score_tol {
        return Ok(lo);
    }
    if u_hi.abs() < opts.score_tol {
        return Ok(hi);
    }
    if !(u_lo > 0.0 && u_hi < 0.0) {
        return Err(Error::FluctuationRoot { lo, hi });
    }
    let mut gamma = 0.0;
    for _ in 0..500 {
        let (u, du) = terms.eval(gamma);
        if u.abs() < opts.score_tol {
            return Ok(gamma);
        }
        if u > 0.0 {
            lo = gamma;
        } else {
            hi = gamma;
        }
        let newton = gamma - u / du;
        gamma = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
            break;
        }
    }
    let (u, _) = terms.eval(gamma);
    if u.abs() < opts.score_tol {
        Ok(gamma)
    } else {
        Err(Error::FluctuationRoot {
            lo: opts.bracket.0,
            hi: opts.bracket.1,
        })
    }
}

/// Score `U(gamma)` of the first fluctuation round at the initial hazards.
pub fn fluctuation_score(
    dataset: &Dataset,
    nuisance: &NuisanceSet,
    t: f64,
    gamma: f64,
) -> Result<f64> {
    let tm = Tmle::new(
        dataset,
        nuisance,
        t,
        Estimand::Direct { a_d: 1 },
        SurvivalForm::Exponential,
        Execution::Sequential,
    )?;
    let paths = tm.initial_paths();
    let clever = tm.clever_all(&paths)?;
    Ok(tm.score_terms(&clever, &paths).eval(gamma).0)
}

/// Root of the first-round score equation for `delta1(t, 1)`.
pub fn solve_fluctuation(dataset: &Dataset, nuisance: &NuisanceSet, t: f64) -> Result<f64> {
    let opts = TmleOptions::default();
    let tm = Tmle::new(
        dataset,
        nuisance,
        t,
        Estimand::Direct { a_d: 1 },
        opts.form,
        Execution::Sequential,
    )?;
    let paths = tm.initial_paths();
    let clever = tm.clever_all(&paths)?;
    solve_score(&tm.score_terms(&clever, &paths), &opts)
}

/// Iterated fluctuation of both cause-specific hazards, then plug-in readout.
pub fn tmle_estimate(
    dataset: &Dataset,
    nuisance: &NuisanceSet,
    t: f64,
    estimand: Estimand,
    opts: &TmleOptions,
    exec: Execution,
) -> Result<TmleResult> {
    let tm = Tmle::new(dataset, nuisance, t, estimand, opts.form, exec)?;
    let mut state = FluctuationState {
        gamma: 0.0,
        paths: tm.initial_paths(),
        iteration: 0,
    };
    let initial = tm.readout(&state.paths);
    let mut gammas = Vec::new();
    let mut converged = false;
    while state.iteration < opts.max_iter {
        let clever = tm.clever_all(&state.paths)?;
        let gamma = solve_score(&tm.score_terms(&clever, &state.paths), opts)?;
        gammas.push(gamma);
        state.gamma = gamma;
        state.iteration += 1;
        if gamma != 0.0 {
            for (p, cl) in state.paths.iter_mut().zip(&clever) {
                for a in 0..2 {
                    for m in 0..tm.count {
                        p.d1[a][m] *= (gamma * cl.h1[a][m]).exp();
                        p.d2[a][m] *= (gamma * cl.h2[a][m]).exp();
                    }
                }
            }
        }
        if gamma.abs() < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::TmleNonConvergence {
            iterations: state.iteration,
            trajectory: gammas,
        });
    }
    let clever = tm.clever_all(&state.paths)?;
    let eif_mean = tm.score_terms(&clever, &state.paths).eval(0.0).0 / dataset.len() as f64;
    Ok(TmleResult {
        time: t,
        estimate: tm.readout(&state.paths),
        initial,
        gammas,
        eif_mean,
    })
}

/// TMLE at each time, targeting every time separately.
pub fn tmle_curve(
    dataset: &Dataset,
    nuisance: &NuisanceSet,
    times: &[f64],
    estimand: Estimand,
    opts: &TmleOptions,
    exec: Execution,
) -> Result<Vec<TmleResult>> {
    times
        .iter()
        .map(|&t| tmle_estimate(dataset, nuisance, t, estimand, opts, exec))
        .collect()
}

/// Clever covariates `(H1, H2)` of `delta1(t, 1)` at time `s` for a subject in
/// its observed arm, evaluated directly from the Cox models.
pub fn clever_covariates(
    s: f64,
    t: f64,
    record: &Record,
    nuisance: &NuisanceSet,
    form: SurvivalForm,
) -> Result<(f64, f64)> {
    if s > t {
        return Ok((0.0, 0.0));
    }
    let a = record.treatment;
    let w = &record.covariates;
    let (c1, c2) = (&nuisance.cause1, &nuisance.cause2);
    let g = f64::from(a) / nuisance.propensity.arm(1, w)
        - f64::from(1 - a) / nuisance.propensity.arm(0, w);

    // Event-free survival of world (a_y, a_d) at s- and s.
    let survival = |a_y: u8, a_d: u8, at: f64, left: bool| -> f64 {
        match form {
            SurvivalForm::Exponential => {
                let (l1, l2) = if left {
                    (c1.baseline.left_value(at), c2.baseline.left_value(at))
                } else {
                    (c1.baseline.value(at), c2.baseline.value(at))
                };
                (-l1 * c1.relative_risk(a_y, w) - l2 * c2.relative_risk(a_d, w)).exp()
            }
            SurvivalForm::ProductLimit => {
                let (r1, r2) = (c1.relative_risk(a_y, w), c2.relative_risk(a_d, w));
                let (times, b1, b2) =
                    crate::nuisance::merge_baselines(&c1.baseline, &c2.baseline, at);
                let mut e = 1.0;
                for m in 0..times.len() {
                    if left && times[m] >= at {
                        break;
                    }
                    e *= (1.0 - b1[m] * r1 - b2[m] * r2).max(0.0);
                }
                e
            }
        }
    };
    let p1 = |at: f64, a_y: u8, a_d: u8| p1_conditional(at, a_y, a_d, w, c1, c2, form);

    // Direct effect terms: +P1(t,1,1) and -P1(t,0,1).
    let s_left = survival(a, a, s, true);
    let s_at = survival(a, a, s, false);
    if s_at < POSITIVITY_FLOOR {
        return Err(Error::Positivity {
            quantity: "event-free survival",
            value: s_at,
            time: s,
        });
    }
    let kc = nuisance.censoring_survival_left(s, a, w);
    let (f_t, f_s) = (p1(t, a, a)?, p1(s, a, a)?);
    let (q_t, q_s) = (p1(t, 0, 1)?, p1(s, 0, 1)?);
    let z = survival(a, 1, s, true) / s_left;
    let (h1, h2) = if a == 1 {
        (
            g * (z - (f_t - f_s) / s_at),
            g * ((q_t - q_s) - (f_t - f_s)) / s_at,
        )
    } else {
        // Only the -P1(t,0,1) term involves the cause-1 hazard of arm 0,
        // and no term involves the cause-2 hazard of arm 0.
        (g * (z - (q_t - q_s) / s_at), 0.0)
    };
    Ok((h1 / kc, h2 / kc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_root_solves_monotone_equation() {
        let terms = ScoreTerms {
            observed: 1.0,
            pairs: vec![(0.5, 0.4), (-1.0, 0.3), (2.0, 0.2)],
        };
        let gamma = solve_score(&terms, &TmleOptions::default()).unwrap();
        assert!(terms.eval(gamma).0.abs() < 1e-8);
    }

    #[test]
    fn fluctuated_hazards_stay_nonnegative() {
        use crate::simulation::{Scenario, ScenarioId};
        let s = Scenario::new(ScenarioId::C1);
        let ds = s.generate(300, 3).unwrap();
        let nuis = NuisanceSet::fit(&ds, &s.working_spec()).unwrap();
        let opts = TmleOptions::default();
        let tm = Tmle::new(&ds, &nuis, 3.0, Estimand::Direct { a_d: 1 }, opts.form, Execution::Sequential).unwrap();
        let mut paths = tm.initial_paths();
        for _ in 0..5 {
            let clever = tm.clever_all(&paths).unwrap();
            let gamma = solve_score(&tm.score_terms(&clever, &paths), &opts).unwrap();
            for (p, cl) in paths.iter_mut().zip(&clever) {
                for a in 0..2 {
                    for m in 0..tm.count {
                        p.d1[a][m] *= (gamma * cl.h1[a][m]).exp();
                        p.d2[a][m] *= (gamma * cl.h2[a][m]).exp();
                    }
                }
            }
            assert!(paths.iter().all(|p| p.d1.iter().chain(&p.d2).flatten().all(|&d| d >= 0.0 && d.is_finite())));
        }
    }

    #[test]
    fn missing_root_is_reported() {
        let terms = ScoreTerms {
            observed: 100.0,
            pairs: vec![(1e-3, 1e-3)],
        };
        assert!(matches!(
            solve_score(&terms, &TmleOptions::default()),
            Err(Error::FluctuationRoot { .. })
        ));
    }
}
