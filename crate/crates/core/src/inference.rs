//! Nonparametric bootstrap and normal-theory confidence intervals.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::statistics::{Data, OrderStatistics};

use crate::data::Dataset;
use crate::eif::one_step;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::functionals::{plug_in_effect, Estimand, SurvivalForm};
use crate::nuisance::{NuisanceSet, NuisanceSpec};
use crate::tmle::{tmle_curve, TmleOptions};

/// Dropped resamples beyond this share abort the bootstrap.
pub const MAX_DROPPED_PCT: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    PlugIn,
    OneStep,
    Tmle,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::PlugIn => "plugin",
            Estimator::OneStep => "onestep",
            Estimator::Tmle => "tmle",
        })
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plugin" => Ok(Estimator::PlugIn),
            "onestep" => Ok(Estimator::OneStep),
            "tmle" => Ok(Estimator::Tmle),
            _ => Err(Error::InvalidArgument(format!(
                "unknown estimator `{s}` (expected plugin, onestep or tmle)"
            ))),
        }
    }
}

/// Everything needed to recompute an estimate from raw data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub estimator: Estimator,
    pub estimand: Estimand,
    pub nuisance: NuisanceSpec,
    pub form: SurvivalForm,
    pub tmle: TmleOptions,
}

impl EstimatorSpec {
    pub fn new(estimator: Estimator, estimand: Estimand, nuisance: NuisanceSpec) -> Self {
        EstimatorSpec {
            estimator,
            estimand,
            nuisance,
            form: SurvivalForm::Exponential,
            tmle: TmleOptions::default(),
        }
    }

    /// Point estimates at `times` using already fitted working models.
    pub fn estimate_with(
        &self,
        dataset: &Dataset,
        nuisance: &NuisanceSet,
        times: &[f64],
        exec: Execution,
    ) -> Result<Vec<f64>> {
        match self.estimator {
            Estimator::PlugIn => {
                Ok(plug_in_effect(dataset, nuisance, times, self.estimand, self.form, exec)?.values)
            }
            Estimator::OneStep => {
                Ok(one_step(dataset, nuisance, times, self.estimand, self.form, exec)?
                    .curve
                    .values)
            }
            Estimator::Tmle => Ok(tmle_curve(
                dataset,
                nuisance,
                times,
                self.estimand,
                &self.tmle,
                exec,
            )?
            .iter()
            .map(|r| r.estimate)
            .collect()),
        }
    }

    /// Fits the working models and returns point estimates at `times`.
    pub fn estimate(&self, dataset: &Dataset, times: &[f64], exec: Execution) -> Result<Vec<f64>> {
        let nuisance = NuisanceSet::fit(dataset, &self.nuisance)?;
        self.estimate_with(dataset, &nuisance, times, exec)
    }
}

/// Point estimate with whichever standard errors were computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub time: f64,
    pub estimate: f64,
    pub se_analytic: Option<f64>,
    pub se_eif: Option<f64>,
    pub se_bootstrap: Option<f64>,
    /// Normal interval from the first available of bootstrap, EIF, analytic se.
    pub ci: Option<(f64, f64)>,
    pub ci_percentile: Option<(f64, f64)>,
    pub level: f64,
}

impl EffectEstimate {
    pub fn new(time: f64, estimate: f64, level: f64) -> Self {
        EffectEstimate {
            time,
            estimate,
            se_analytic: None,
            se_eif: None,
            se_bootstrap: None,
            ci: None,
            ci_percentile: None,
            level,
        }
    }

    /// Bootstrap se if present, else EIF, else analytic.
    pub fn primary_se(&self) -> Option<f64> {
        self.se_bootstrap.or(self.se_eif).or(self.se_analytic)
    }

    pub fn finish(mut self) -> Result<Self> {
        self.ci = self
            .primary_se()
            .map(|se| confidence_interval(self.estimate, se, self.level))
            .transpose()?;
        Ok(self)
    }
}

/// Normal interval `estimate -/+ z_{(1+level)/2} * se`.
pub fn confidence_interval(estimate: f64, se: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must lie in (0,1), got {level}")));
    }
    if !(se >= 0.0) {
        return Err(Error::InvalidArgument(format!("standard error must be nonnegative, got {se}")));
    }
    let z = normal_quantile(0.5 + level / 2.0);
    Ok((estimate - z * se, estimate + z * se))
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub times: Vec<f64>,
    /// Estimate on the original data.
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub normal: Vec<(f64, f64)>,
    pub percentile: Vec<(f64, f64)>,
    /// Successful resample estimates, `[resample][time]`.
    pub replicates: Vec<Vec<f64>>,
    pub dropped: usize,
}

/// Seed of resample `b` for a bootstrap seeded with `seed`.
fn resample_indices(n: usize, seed: u64, b: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// `B` subject-level resamples with a full refit of every working model in each.
pub fn bootstrap(
    dataset: &Dataset,
    spec: &EstimatorSpec,
    times: &[f64],
    b: usize,
    seed: u64,
    level: f64,
    exec: Execution,
) -> Result<BootstrapResult> {
    bootstrap_statistic(dataset, times, b, seed, level, exec, |ds, inner| {
        spec.estimate(ds, times, inner)
    })
}

/// Bootstrap of an arbitrary per-time statistic. `statistic` is called once on
/// the original data with `exec` and once per resample with sequential
/// execution; it must return one value per entry of `times`.
pub fn bootstrap_statistic<F>(
    dataset: &Dataset,
    times: &[f64],
    b: usize,
    seed: u64,
    level: f64,
    exec: Execution,
    statistic: F,
) -> Result<BootstrapResult>
where
    F: Fn(&Dataset, Execution) -> Result<Vec<f64>> + Sync + Send,
{
    if b < 2 {
        return Err(Error::InvalidArgument(format!("bootstrap needs B >= 2, got {b}")));
    }
    let estimate = statistic(dataset, exec)?;
    if estimate.len() != times.len() {
        return Err(Error::InvalidArgument("statistic must return one value per time".into()));
    }
    let n = dataset.len();
    let outcomes = exec.map(b, |r| {
        let idx = resample_indices(n, seed, r as u64);
        dataset
            .resample(&idx)
            .and_then(|ds| statistic(&ds, Execution::Sequential))
    });
    let replicates: Vec<Vec<f64>> = outcomes.into_iter().filter_map(Result::ok).collect();
    let dropped = b - replicates.len();
    if dropped * 100 > b * MAX_DROPPED_PCT as usize || replicates.len() < 2 {
        return Err(Error::TooManyFailures {
            what: "bootstrap resamples",
            failed: dropped,
            total: b,
            limit_pct: MAX_DROPPED_PCT,
        });
    }
    let alpha = (1.0 - level) / 2.0;
    let mut se = Vec::with_capacity(times.len());
    let mut normal = Vec::with_capacity(times.len());
    let mut percentile = Vec::with_capacity(times.len());
    for j in 0..times.len() {
        let col: Vec<f64> = replicates.iter().map(|r| r[j]).collect();
        let s = sample_sd(&col);
        se.push(s);
        normal.push(confidence_interval(estimate[j], s, level)?);
        let mut data = Data::new(col);
        percentile.push((data.quantile(alpha), data.quantile(1.0 - alpha)));
    }
    Ok(BootstrapResult {
        times: times.to_vec(),
        estimate,
        se,
        normal,
        percentile,
        replicates,
        dropped,
    })
}

/// Sample standard deviation with the `n - 1` denominator.
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}
