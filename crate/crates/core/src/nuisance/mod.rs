//! Working models: cause-specific Cox hazards, the propensity score and the
//! censoring hazard, plus the shared time grid their hazards live on.

mod cox;
mod logistic;
mod step;

pub use cox::{
    fit_censoring, fit_cox, fit_cox_weighted, CoxEstimation, CoxFit, CoxInfluence, CoxProblem,
    Design, Evaluation, Jump, Target, LOGLIK_RTOL, MAX_ITER, SCORE_TOL,
};
pub use logistic::{expit, fit_propensity, LogisticFit};
pub use step::StepFunction;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Fitted propensities are clipped to this interval before weighting.
pub const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Propensity {
    Logistic(LogisticFit),
    /// `P(A = 1 | W)` fixed by design, as in a randomized trial.
    Known(f64),
}

impl Propensity {
    /// Clipped `P(A = 1 | w)`.
    pub fn treated(&self, w: &[f64]) -> f64 {
        let p = match self {
            Propensity::Logistic(fit) => fit.prob(w),
            Propensity::Known(p) => *p,
        };
        p.clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1)
    }

    /// Clipped `P(A = a | w)`.
    pub fn arm(&self, a: u8, w: &[f64]) -> f64 {
        let p = self.treated(w);
        if a == 1 {
            p
        } else {
            1.0 - p
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PropensitySpec {
    /// Logistic regression on the listed covariate columns.
    Fit(Vec<usize>),
    Known(f64),
}

/// Which regressors enter each working model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpec {
    pub cause1: Design,
    pub cause2: Design,
    pub propensity: PropensitySpec,
    /// Ignored when the data contain no censored subjects.
    pub censoring: Design,
}

impl NuisanceSpec {
    /// Main effects of treatment and all covariates in both cause models,
    /// logistic propensity on all covariates, censoring on treatment only.
    pub fn standard(k: usize) -> Self {
        NuisanceSpec {
            cause1: Design::full(k),
            cause2: Design::full(k),
            propensity: PropensitySpec::Fit((0..k).collect()),
            censoring: Design::treatment_only(),
        }
    }
}

/// The bundle of working models consumed by every estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisanceSet {
    pub cause1: CoxFit,
    pub cause2: CoxFit,
    pub propensity: Propensity,
    /// `None` means no censoring, i.e. `K_C = 1`.
    pub censoring: Option<CoxFit>,
}

impl NuisanceSet {
    pub fn new(
        cause1: CoxFit,
        cause2: CoxFit,
        propensity: Propensity,
        censoring: Option<CoxFit>,
    ) -> Result<Self> {
        if cause1.target != Target::Cause1 || cause2.target != Target::Cause2 {
            return Err(Error::InvalidArgument(
                "cause models must target cause 1 and cause 2".into(),
            ));
        }
        if censoring.as_ref().is_some_and(|c| c.target != Target::Censoring) {
            return Err(Error::InvalidArgument(
                "censoring model must target censoring".into(),
            ));
        }
        if let Propensity::Known(p) = propensity {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "known propensity must lie in (0,1), got {p}"
                )));
            }
        }
        Ok(NuisanceSet {
            cause1,
            cause2,
            propensity,
            censoring,
        })
    }

    pub fn fit(dataset: &Dataset, spec: &NuisanceSpec) -> Result<Self> {
        let cause1 = fit_cox(dataset, Target::Cause1, &spec.cause1)?;
        let cause2 = fit_cox(dataset, Target::Cause2, &spec.cause2)?;
        let propensity = match &spec.propensity {
            PropensitySpec::Fit(cols) => Propensity::Logistic(fit_propensity(dataset, cols)?),
            PropensitySpec::Known(p) => Propensity::Known(*p),
        };
        let censoring = if dataset.count_events(crate::data::Event::Censored) > 0 {
            Some(fit_censoring(dataset, &spec.censoring)?)
        } else {
            None
        };
        NuisanceSet::new(cause1, cause2, propensity, censoring)
    }

    /// `K_C(t- | a, w)`.
    pub fn censoring_survival_left(&self, t: f64, a: u8, w: &[f64]) -> f64 {
        self.censoring
            .as_ref()
            .map_or(1.0, |c| c.survival_left(t, a, w))
    }
}

/// Union of the cause-1 and cause-2 baseline jump times up to a horizon, with
/// both baseline increments on that grid.
#[derive(Debug, Clone)]
pub struct HazardGrid {
    pub times: Vec<f64>,
    pub base1: Vec<f64>,
    pub base2: Vec<f64>,
    /// Censoring baseline left limits `Lambda_C0(s-)` at the grid times.
    censor_left: Vec<f64>,
}

impl HazardGrid {
    pub fn new(nuisance: &NuisanceSet, t_max: f64) -> Self {
        let (times, base1, base2) =
            merge_baselines(&nuisance.cause1.baseline, &nuisance.cause2.baseline, t_max);
        let censor_left = match &nuisance.censoring {
            Some(c) => times.iter().map(|&s| c.baseline.left_value(s)).collect(),
            None => vec![0.0; times.len()],
        };
        HazardGrid {
            times,
            base1,
            base2,
            censor_left,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of grid times `<= t`.
    pub fn count_through(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t)
    }

    /// Cause-specific hazard increments on the grid for both treatment levels.
    pub fn arm_paths(&self, nuisance: &NuisanceSet, w: &[f64]) -> ArmPaths {
        let scale = |fit: &CoxFit, base: &[f64], a: u8| {
            let r = fit.relative_risk(a, w);
            base.iter().map(|d| d * r).collect::<Vec<f64>>()
        };
        ArmPaths {
            d1: [
                scale(&nuisance.cause1, &self.base1, 0),
                scale(&nuisance.cause1, &self.base1, 1),
            ],
            d2: [
                scale(&nuisance.cause2, &self.base2, 0),
                scale(&nuisance.cause2, &self.base2, 1),
            ],
        }
    }

    /// `K_C(s_m- | a, w)` for the first `len` grid times.
    pub fn censoring_left(&self, nuisance: &NuisanceSet, a: u8, w: &[f64], len: usize) -> Vec<f64> {
        let r = nuisance
            .censoring
            .as_ref()
            .map_or(0.0, |c| c.relative_risk(a, w));
        self.censor_left[..len]
            .iter()
            .map(|l| (-l * r).exp())
            .collect()
    }
}

/// Hazard increments `dLambda_j(s_m | a, w)` for `a = 0, 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmPaths {
    pub d1: [Vec<f64>; 2],
    pub d2: [Vec<f64>; 2],
}

pub(crate) fn merge_baselines(
    b1: &StepFunction,
    b2: &StepFunction,
    t_max: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (t1, d1) = (b1.times(), b1.increments());
    let (t2, d2) = (b2.times(), b2.increments());
    let mut times = Vec::with_capacity(t1.len() + t2.len());
    let mut inc1 = Vec::with_capacity(t1.len() + t2.len());
    let mut inc2 = Vec::with_capacity(t1.len() + t2.len());
    let (mut i, mut j) = (0, 0);
    loop {
        let next1 = t1.get(i).copied().unwrap_or(f64::INFINITY);
        let next2 = t2.get(j).copied().unwrap_or(f64::INFINITY);
        let s = next1.min(next2);
        if !(s <= t_max) {
            break;
        }
        times.push(s);
        if next1 == s {
            inc1.push(d1[i]);
            i += 1;
        } else {
            inc1.push(0.0);
        }
        if next2 == s {
            inc2.push(d2[j]);
            j += 1;
        } else {
            inc2.push(0.0);
        }
    }
    (times, inc1, inc2)
}
