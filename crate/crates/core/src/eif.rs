//! Efficient influence function of the separable risk contrasts under
//! independent censoring given `(A, W)`, and the one-step estimator built on it.
//!
//! For a contrast `sum coef * P1(t, a_y, a_d)` the influence function of a
//! subject observed in arm `A` is
//!
//! ```text
//! sum_j  int_0^t  k_j(s, t) / K_C(s- | A, W)  dM_j(s | A, W)   +   sum coef * P1(t, a_y, a_d, W)
//! ```
//!
//! where `M_j` is the observed cause-`j` counting-process martingale. A term
//! contributes to the cause-1 kernel only when `A = a_y` and to the cause-2
//! kernel when `A = a_d`; its kernels are
//!
//! ```text
//! k_1(s) = coef / P(A|W) * { E(s-) / S(s-) - (P1(t) - P1(s)) / S(s) }      if A = a_y
//! k_2(s) = -coef / P(A|W) * (P1(t) - P1(s)) / S(s)                          if A = a_d
//! ```
//!
//! with `E` the event-free survival in the counterfactual world `(a_y, a_d)`
//! and `S` the event-free survival in the observed arm. The censoring
//! augmentation term is folded into the `1/K_C` weights and never built.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Event, Record};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::functionals::{
    at_count, check_times, term_path, Estimand, RiskCurve, SurvivalForm,
};
use crate::nuisance::{ArmPaths, HazardGrid, NuisanceSet};

/// Survival probabilities below this are treated as positivity violations.
pub const POSITIVITY_FLOOR: f64 = 1e-10;

/// One subject's uncentered influence value at one time, with its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EifContribution {
    /// `martingale1 + martingale2 + conditional`.
    pub value: f64,
    pub martingale1: f64,
    pub martingale2: f64,
    /// Conditional contrast at the subject's covariates.
    pub conditional: f64,
}

/// Kernels of one subject in one arm, without censoring weights.
///
/// On grid point `m` and horizon index `j`:
/// `k1 = b1[m] - c1[j] * v[m]` and `k2 = b2[m] - c2[j] * v[m]`.
#[derive(Debug, Clone)]
pub(crate) struct ArmKernels {
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub v: Vec<f64>,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    /// `(b1, b2, v)` evaluated at an event time that falls between grid points.
    pub at_event: Option<(f64, f64, f64)>,
    pub conditional: Vec<f64>,
}

impl ArmKernels {
    #[inline]
    pub fn k1(&self, m: usize, j: usize) -> f64 {
        self.b1[m] - self.c1[j] * self.v[m]
    }

    #[inline]
    pub fn k2(&self, m: usize, j: usize) -> f64 {
        self.b2[m] - self.c2[j] * self.v[m]
    }
}

/// Precomputed grid and horizon bookkeeping shared by all subjects.
#[derive(Debug, Clone)]
pub struct EifEngine<'a> {
    pub(crate) nuisance: &'a NuisanceSet,
    pub(crate) grid: HazardGrid,
    pub(crate) times: Vec<f64>,
    /// Number of grid times `<= t` for each requested `t`.
    pub(crate) counts: Vec<usize>,
    pub(crate) estimand: Estimand,
    pub(crate) form: SurvivalForm,
}

impl<'a> EifEngine<'a> {
    pub fn new(
        nuisance: &'a NuisanceSet,
        times: &[f64],
        estimand: Estimand,
        form: SurvivalForm,
    ) -> Result<Self> {
        let t_max = check_times(times)?;
        let grid = HazardGrid::new(nuisance, t_max);
        let counts = times.iter().map(|&t| grid.count_through(t)).collect();
        Ok(EifEngine {
            nuisance,
            grid,
            times: times.to_vec(),
            counts,
            estimand,
            form,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Kernels for a subject with covariates `w` placed in arm `a`, checked
    /// for positivity on the first `len` grid points.
    pub(crate) fn arm_kernels(
        &self,
        paths: &ArmPaths,
        a: u8,
        w: &[f64],
        len: usize,
        event_time: Option<f64>,
    ) -> Result<ArmKernels> {
        let g = self.grid.len();
        let nt = self.times.len();
        let obs = term_path(paths, a, a, g, self.form);
        for m in 0..len {
            if obs.e_post[m] < POSITIVITY_FLOOR {
                return Err(Error::Positivity {
                    quantity: "event-free survival",
                    value: obs.e_post[m],
                    time: self.grid.times[m],
                });
            }
        }
        let pi = self.nuisance.propensity.arm(a, w);
        let v: Vec<f64> = obs.e_post.iter().map(|s| 1.0 / s).collect();
        let event_index = event_time.map(|s| self.grid.count_through(s));
        let off_grid = event_time.zip(event_index).and_then(|(s, c)| {
            (c == 0 || self.grid.times[c - 1] != s).then_some(c)
        });
        let mut k = ArmKernels {
            b1: vec![0.0; g],
            b2: vec![0.0; g],
            v,
            c1: vec![0.0; nt],
            c2: vec![0.0; nt],
            at_event: None,
            conditional: vec![0.0; nt],
        };
        let mut ev = off_grid.map(|c| {
            let v = if c == 0 { 1.0 } else { k.v[c - 1] };
            (0.0, 0.0, v)
        });
        for term in self.estimand.terms() {
            let path = term_path(paths, term.a_y, term.a_d, g, self.form);
            for (j, &c) in self.counts.iter().enumerate() {
                k.conditional[j] += term.coef * at_count(&path.p, c);
            }
            let scale = term.coef / pi;
            let hits_y = a == term.a_y;
            let hits_d = a == term.a_d;
            if !hits_y && !hits_d {
                continue;
            }
            for m in 0..g {
                let tail = path.p[m] * k.v[m];
                if hits_y {
                    k.b1[m] += scale * (path.e_pre[m] / obs.e_pre[m] + tail);
                }
                if hits_d {
                    k.b2[m] += scale * tail;
                }
            }
            for (j, &c) in self.counts.iter().enumerate() {
                let p_t = at_count(&path.p, c);
                if hits_y {
                    k.c1[j] += scale * p_t;
                }
                if hits_d {
                    k.c2[j] += scale * p_t;
                }
            }
            if let (Some(c), Some(e)) = (off_grid, ev.as_mut()) {
                let (ratio, p_s) = if c == 0 {
                    (1.0, 0.0)
                } else {
                    (path.e_post[c - 1] / obs.e_post[c - 1], path.p[c - 1] * k.v[c - 1])
                };
                if hits_y {
                    e.0 += scale * (ratio + p_s);
                }
                if hits_d {
                    e.1 += scale * p_s;
                }
            }
        }
        k.at_event = ev;
        Ok(k)
    }

    /// Kernel values `(k1, k2)` at the subject's event time for horizon index `j`.
    pub(crate) fn kernels_at_event(&self, k: &ArmKernels, event_time: f64, j: usize) -> (f64, f64) {
        match k.at_event {
            Some((b1, b2, v)) => (b1 - k.c1[j] * v, b2 - k.c2[j] * v),
            None => {
                let m = self.grid.count_through(event_time) - 1;
                (k.k1(m, j), k.k2(m, j))
            }
        }
    }

    /// Influence values of one subject at every requested time.
    pub fn contribution(&self, record: &Record) -> Result<Vec<EifContribution>> {
        let paths = self.grid.arm_paths(self.nuisance, &record.covariates);
        self.contribution_with_paths(record, &paths)
    }

    pub(crate) fn contribution_with_paths(
        &self,
        record: &Record,
        paths: &ArmPaths,
    ) -> Result<Vec<EifContribution>> {
        let a = record.treatment;
        let w = &record.covariates;
        let at_risk = self.grid.count_through(record.time);
        let event_time = record.event.is_event().then_some(record.time);
        let k = self.arm_kernels(paths, a, w, at_risk, event_time)?;
        let kc = self.grid.censoring_left(self.nuisance, a, w, at_risk);
        if let Some(m) = kc.iter().position(|&x| x < POSITIVITY_FLOOR) {
            return Err(Error::Positivity {
                quantity: "censoring survival",
                value: kc[m],
                time: self.grid.times[m],
            });
        }
        let ai = usize::from(a);
        // Prefix sums of b_j d_j / K and v d_j / K over the at-risk grid points.
        let mut cum = vec![[0.0f64; 4]; at_risk + 1];
        for m in 0..at_risk {
            let d1 = paths.d1[ai][m] / kc[m];
            let d2 = paths.d2[ai][m] / kc[m];
            let prev = cum[m];
            cum[m + 1] = [
                prev[0] + k.b1[m] * d1,
                prev[1] + k.v[m] * d1,
                prev[2] + k.b2[m] * d2,
                prev[3] + k.v[m] * d2,
            ];
        }
        let k_event = match event_time {
            Some(s) => {
                let kc_s = self.nuisance.censoring_survival_left(s, a, w);
                if kc_s < POSITIVITY_FLOOR {
                    return Err(Error::Positivity {
                        quantity: "censoring survival",
                        value: kc_s,
                        time: s,
                    });
                }
                Some(kc_s)
            }
            None => None,
        };
        let mut out = Vec::with_capacity(self.times.len());
        for (j, (&t, &count)) in self.times.iter().zip(&self.counts).enumerate() {
            let upto = count.min(at_risk);
            let c = cum[upto];
            let mut m1 = -(c[0] - k.c1[j] * c[1]);
            let mut m2 = -(c[2] - k.c2[j] * c[3]);
            if let Some(kc_s) = k_event {
                if record.time <= t {
                    let (h1, h2) = self.kernels_at_event(&k, record.time, j);
                    match record.event {
                        Event::Cause1 => m1 += h1 / kc_s,
                        Event::Cause2 => m2 += h2 / kc_s,
                        Event::Censored => {}
                    }
                }
            }
            let conditional = k.conditional[j];
            out.push(EifContribution {
                value: m1 + m2 + conditional,
                martingale1: m1,
                martingale2: m2,
                conditional,
            });
        }
        Ok(out)
    }
}

/// Influence values of every subject, indexed `[subject][time]`.
pub fn contributions(
    dataset: &Dataset,
    nuisance: &NuisanceSet,
    times: &[f64],
    estimand: Estimand,
    form: SurvivalForm,
    exec: Execution,
) -> Result<Vec<Vec<EifContribution>>> {
    let engine = EifEngine::new(nuisance, times, estimand, form)?;
    let records = dataset.records();
    exec.map(records.len(), |i| engine.contribution(&records[i]))
        .into_iter()
        .collect()
}

/// Contribution to the direct effect `delta1(t, 1)` for one subject.
pub fn eif_direct_contribution(
    t: f64,
    record: &Record,
    nuisance: &NuisanceSet,
) -> Result<EifContribution> {
    let engine = EifEngine::new(nuisance, &[t], Estimand::Direct { a_d: 1 }, SurvivalForm::Exponential)?;
    Ok(engine.contribution(record)?[0])
}

/// Contribution to the indirect effect `P1(t,0,1) - P1(t,0,0)` for one subject.
pub fn eif_indirect_contribution(
    t: f64,
    record: &Record,
    nuisance: &NuisanceSet,
) -> Result<EifContribution> {
    let engine = EifEngine::new(nuisance, &[t], Estimand::Indirect { a_y: 0 }, SurvivalForm::Exponential)?;
    Ok(engine.contribution(record)?[0])
}

/// Result of the one-step estimator.
#[derive(Debug, Clone)]
pub struct OneStep {
    /// Estimates with influence-function standard errors.
    pub curve: RiskCurve,
    /// The plug-in estimate the augmentation corrects.
    pub plug_in: Vec<f64>,
    pub contributions: Vec<Vec<EifContribution>>,
}

/// One-step estimator: the mean of the uncentered influence values.
pub fn one_step(
    dataset: &Dataset,
    nuisance: &NuisanceSet,
    times: &[f64],
    estimand: Estimand,
    form: SurvivalForm,
    exec: Execution,
) -> Result<OneStep> {
    let contributions = contributions(dataset, nuisance, times, estimand, form, exec)?;
    let n = dataset.len() as f64;
    let mut values = Vec::with_capacity(times.len());
    let mut se = Vec::with_capacity(times.len());
    let mut plug_in = Vec::with_capacity(times.len());
    for j in 0..times.len() {
        let col: Vec<f64> = contributions.iter().map(|c| c[j].value).collect();
        values.push(col.iter().sum::<f64>() / n);
        plug_in.push(contributions.iter().map(|c| c[j].conditional).sum::<f64>() / n);
        se.push(if col.len() >= 2 { eif_variance(&col)?.sqrt() } else { f64::NAN });
    }
    let mut curve = RiskCurve::new(estimand.to_string(), times.to_vec(), values);
    curve.se = Some(se);
    Ok(OneStep {
        curve,
        plug_in,
        contributions,
    })
}

pub fn one_step_direct(dataset: &Dataset, nuisance: &NuisanceSet, times: &[f64]) -> Result<OneStep> {
    one_step(
        dataset,
        nuisance,
        times,
        Estimand::Direct { a_d: 1 },
        SurvivalForm::Exponential,
        Execution::default(),
    )
}

pub fn one_step_indirect(dataset: &Dataset, nuisance: &NuisanceSet, times: &[f64]) -> Result<OneStep> {
    one_step(
        dataset,
        nuisance,
        times,
        Estimand::Indirect { a_y: 0 },
        SurvivalForm::Exponential,
        Execution::default(),
    )
}

/// Squared standard error of a mean of influence values: sample variance / n.
pub fn eif_variance(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "variance needs at least 2 values, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok(ss / (nf - 1.0) / nf)
}

/// Per-subject diagnostic dump: `subject,time,value,martingale1,martingale2,conditional`.
pub fn write_contributions_csv<W: Write>(
    times: &[f64],
    contributions: &[Vec<EifContribution>],
    writer: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["subject", "time", "value", "martingale1", "martingale2", "conditional"])?;
    for (i, row) in contributions.iter().enumerate() {
        for (t, c) in times.iter().zip(row) {
            wtr.write_record([
                i.to_string(),
                t.to_string(),
                c.value.to_string(),
                c.martingale1.to_string(),
                c.martingale2.to_string(),
                c.conditional.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_matches_definition() {
        let v = [1.0, 2.0, 4.0];
        let mean = 7.0 / 3.0;
        let s2 = v.iter().map(|x: &f64| (x - mean).powi(2)).sum::<f64>() / 2.0;
        assert!((eif_variance(&v).unwrap() - s2 / 3.0).abs() < 1e-15);
        assert_eq!(eif_variance(&[0.3; 5]).unwrap(), 0.0);
        assert!(eif_variance(&[1.0]).is_err());
    }
}
