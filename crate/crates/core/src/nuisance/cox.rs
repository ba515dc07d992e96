//! Cox proportional hazards models for cause-specific and censoring hazards.
//!
//! Ties use the Breslow convention in both the partial likelihood and the
//! baseline hazard. Other event types count as censoring for the target.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::step::StepFunction;
use crate::data::{Dataset, Event};
use crate::error::{Error, Result};

pub const SCORE_TOL: f64 = 1e-9;
pub const MAX_ITER: usize = 50;
/// Relative rounding slack allowed in the likelihood-ascent check.
pub const LOGLIK_RTOL: f64 = 1e-12;

/// Which counting process a Cox model describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Cause1,
    Cause2,
    Censoring,
}

impl Target {
    pub fn is_event(self, event: Event) -> bool {
        matches!(
            (self, event),
            (Target::Cause1, Event::Cause1)
                | (Target::Cause2, Event::Cause2)
                | (Target::Censoring, Event::Censored)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Cause1 => "cause-1 Cox model",
            Target::Cause2 => "cause-2 Cox model",
            Target::Censoring => "censoring Cox model",
        }
    }
}

/// Regressors of a working model: optionally the treatment, then a subset of
/// the dataset's covariate columns (by index).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Design {
    pub treatment: bool,
    pub covariates: Vec<usize>,
}

impl Design {
    pub fn empty() -> Self {
        Design::default()
    }

    pub fn treatment_only() -> Self {
        Design {
            treatment: true,
            covariates: Vec::new(),
        }
    }

    /// Treatment plus every covariate column.
    pub fn full(k: usize) -> Self {
        Design {
            treatment: true,
            covariates: (0..k).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        usize::from(self.treatment) + self.covariates.len()
    }

    pub fn row_into(&self, a: u8, w: &[f64], out: &mut Vec<f64>) {
        out.clear();
        if self.treatment {
            out.push(f64::from(a));
        }
        out.extend(self.covariates.iter().map(|&j| w[j]));
    }

    pub fn row(&self, a: u8, w: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        self.row_into(a, w, &mut out);
        out
    }

    /// Linear predictor `beta' x(a, w)`.
    pub fn linear(&self, beta: &[f64], a: u8, w: &[f64]) -> f64 {
        let mut k = 0;
        let mut eta = 0.0;
        if self.treatment {
            eta += beta[0] * f64::from(a);
            k = 1;
        }
        for (b, &j) in beta[k..].iter().zip(&self.covariates) {
            eta += b * w[j];
        }
        eta
    }

    pub fn labels(&self, covariate_names: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim());
        if self.treatment {
            out.push("treatment".to_owned());
        }
        out.extend(self.covariates.iter().map(|&j| covariate_names[j].clone()));
        out
    }

    pub(crate) fn check(&self, dataset: &Dataset) -> Result<()> {
        match self.covariates.iter().find(|&&j| j >= dataset.dim()) {
            Some(j) => Err(Error::InvalidArgument(format!(
                "covariate index {j} out of range for {} covariates",
                dataset.dim()
            ))),
            None => Ok(()),
        }
    }
}

/// Breslow baseline jump with the risk-set summaries at that time.
#[derive(Debug, Clone, PartialEq)]
pub struct Jump {
    pub time: f64,
    /// Weighted number of target events at `time`.
    pub events: f64,
    /// Weighted sum of relative risks over the risk set.
    pub s0: f64,
    /// Risk-weighted mean regressor over the risk set.
    pub xbar: Vec<f64>,
    pub dlambda: f64,
}

/// Per-subject data and fit diagnostics kept with an estimated model.
#[derive(Debug, Clone)]
pub struct CoxEstimation {
    pub times: Vec<f64>,
    pub delta: Vec<bool>,
    /// Regressors, row-major `n x p`.
    pub x: Vec<f64>,
    pub weights: Vec<f64>,
    /// Relative risks `exp(beta' x_i)` at the fitted coefficients.
    pub risk: Vec<f64>,
    pub jumps: Vec<Jump>,
    pub information: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub loglik_path: Vec<f64>,
    pub iterations: usize,
}

impl CoxEstimation {
    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn p(&self) -> usize {
        self.information.nrows()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        let p = self.p();
        &self.x[i * p..(i + 1) * p]
    }
}

/// A Cox model: coefficients and Breslow baseline. Models built by
/// [`fit_cox`] also carry the estimation state needed for influence functions;
/// models assembled from known parts do not.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoxFit {
    pub target: Target,
    pub design: Design,
    pub beta: Vec<f64>,
    pub baseline: StepFunction,
    #[serde(skip)]
    estimation: Option<Box<CoxEstimation>>,
}

impl CoxFit {
    /// A model with given coefficients and baseline, e.g. the data-generating truth.
    pub fn from_parts(
        target: Target,
        design: Design,
        beta: Vec<f64>,
        baseline: StepFunction,
    ) -> Result<Self> {
        if beta.len() != design.dim() {
            return Err(Error::InvalidArgument(format!(
                "design has {} regressors but {} coefficients were given",
                design.dim(),
                beta.len()
            )));
        }
        Ok(CoxFit {
            target,
            design,
            beta,
            baseline,
            estimation: None,
        })
    }

    pub fn estimation(&self) -> Result<&CoxEstimation> {
        self.estimation
            .as_deref()
            .ok_or_else(|| Error::State(format!("{} carries no estimation state", self.target.name())))
    }

    pub fn relative_risk(&self, a: u8, w: &[f64]) -> f64 {
        self.design.linear(&self.beta, a, w).exp()
    }

    /// `Lambda_0(t) exp(beta' x(a, w))`.
    pub fn cumhaz_at(&self, t: f64, a: u8, w: &[f64]) -> f64 {
        self.baseline.value(t) * self.relative_risk(a, w)
    }

    /// `exp(-Lambda(t- | a, w))`; for the censoring model this is `K_C(t- | a, w)`.
    pub fn survival_left(&self, t: f64, a: u8, w: &[f64]) -> f64 {
        (-self.baseline.left_value(t) * self.relative_risk(a, w)).exp()
    }

    pub fn survival(&self, t: f64, a: u8, w: &[f64]) -> f64 {
        (-self.cumhaz_at(t, a, w)).exp()
    }

    /// Model-based standard errors of the coefficients.
    pub fn std_errors(&self) -> Result<Vec<f64>> {
        let est = self.estimation()?;
        Ok((0..est.p()).map(|k| est.covariance[(k, k)].sqrt()).collect())
    }

    /// Per-subject influence pieces of the coefficients and baseline hazard.
    pub fn influence(&self) -> Result<CoxInfluence> {
        CoxInfluence::new(self.estimation()?)
    }
}

/// Log partial likelihood with derivatives at one coefficient vector.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loglik: f64,
    pub score: DVector<f64>,
    pub information: DMatrix<f64>,
}

/// Sorted, design-expanded data for one Cox model.
#[derive(Debug, Clone)]
pub struct CoxProblem {
    target: Target,
    times: Vec<f64>,
    delta: Vec<bool>,
    x: Vec<f64>,
    weights: Vec<f64>,
    p: usize,
    /// Groups of subject indices sharing a time, in decreasing time order.
    groups: Vec<Vec<usize>>,
}

impl CoxProblem {
    pub fn new(
        dataset: &Dataset,
        target: Target,
        design: &Design,
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        design.check(dataset)?;
        let n = dataset.len();
        let weights = match weights {
            Some(w) if w.len() != n => {
                return Err(Error::InvalidArgument(format!(
                    "{} weights for {n} subjects",
                    w.len()
                )))
            }
            Some(w) if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) => {
                return Err(Error::InvalidArgument(
                    "weights must be finite and nonnegative".into(),
                ))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; n],
        };
        let p = design.dim();
        let mut x = Vec::with_capacity(n * p);
        let mut row = Vec::with_capacity(p);
        for r in dataset.records() {
            design.row_into(r.treatment, &r.covariates, &mut row);
            x.extend_from_slice(&row);
        }
        let times: Vec<f64> = dataset.records().iter().map(|r| r.time).collect();
        let delta: Vec<bool> = dataset
            .records()
            .iter()
            .map(|r| target.is_event(r.event))
            .collect();
        let events: f64 = delta
            .iter()
            .zip(&weights)
            .filter(|(d, _)| **d)
            .map(|(_, w)| w)
            .sum();
        if events <= 0.0 {
            return Err(Error::DegenerateFit {
                model: target.name().into(),
                reason: "no events of the target type".into(),
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for i in order {
            match groups.last_mut() {
                Some(g) if times[g[0]] == times[i] => g.push(i),
                _ => groups.push(vec![i]),
            }
        }
        Ok(CoxProblem {
            target,
            times,
            delta,
            x,
            weights,
            p,
            groups,
        })
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    fn xi(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    fn eta(&self, beta: &[f64], i: usize) -> f64 {
        self.xi(i).iter().zip(beta).map(|(x, b)| x * b).sum()
    }

    /// Breslow log partial likelihood, score and observed information.
    pub fn evaluate(&self, beta: &[f64]) -> Evaluation {
        let p = self.p;
        let mut loglik = 0.0;
        let mut score = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        let mut s0 = 0.0;
        let mut s1 = DVector::<f64>::zeros(p);
        let mut s2 = DMatrix::<f64>::zeros(p, p);
        for group in &self.groups {
            let mut d = 0.0;
            for &i in group {
                let w = self.weights[i];
                let eta = self.eta(beta, i);
                let r = w * eta.exp();
                let xi = DVector::from_column_slice(self.xi(i));
                s0 += r;
                s1.axpy(r, &xi, 1.0);
                s2.ger(r, &xi, &xi, 1.0);
                if self.delta[i] {
                    d += w;
                    loglik += w * eta;
                    score.axpy(w, &xi, 1.0);
                }
            }
            if d > 0.0 {
                loglik -= d * s0.ln();
                let xbar = &s1 / s0;
                score.axpy(-d, &xbar, 1.0);
                info += (&s2 / s0 - &xbar * xbar.transpose()) * d;
            }
        }
        Evaluation {
            loglik,
            score,
            information: info,
        }
    }

    /// Breslow jumps at `beta`, in increasing time order.
    pub fn jumps(&self, beta: &[f64]) -> Vec<Jump> {
        let p = self.p;
        let mut jumps = Vec::new();
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; p];
        for group in &self.groups {
            let mut d = 0.0;
            for &i in group {
                let w = self.weights[i];
                let r = w * self.eta(beta, i).exp();
                s0 += r;
                for (acc, x) in s1.iter_mut().zip(self.xi(i)) {
                    *acc += r * x;
                }
                if self.delta[i] {
                    d += w;
                }
            }
            if d > 0.0 {
                jumps.push(Jump {
                    time: self.times[group[0]],
                    events: d,
                    s0,
                    xbar: s1.iter().map(|v| v / s0).collect(),
                    dlambda: d / s0,
                });
            }
        }
        jumps.reverse();
        jumps
    }

    /// Newton-Raphson with step halving from `beta = 0`.
    pub fn fit(self, design: Design) -> Result<CoxFit> {
        let p = self.p;
        let model = self.target.name();
        let mut beta = vec![0.0; p];
        let mut eval = self.evaluate(&beta);
        let mut loglik_path = vec![eval.loglik];
        let mut iterations = 0;
        while p > 0 {
            let norm = eval.score.amax();
            if norm < SCORE_TOL {
                break;
            }
            if iterations == MAX_ITER || !norm.is_finite() {
                return Err(Error::NonConvergence {
                    model: model.into(),
                    iterations,
                    score_norm: norm,
                });
            }
            iterations += 1;
            let chol = eval
                .information
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Singular {
                    model: model.into(),
                    iteration: iterations,
                })?;
            let step = chol.solve(&eval.score);
            // Near the optimum the exact gain is below the rounding error of the
            // log likelihood, so compare only up to that error.
            let floor = eval.loglik - LOGLIK_RTOL * eval.loglik.abs().max(1.0);
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let trial: Vec<f64> = beta
                    .iter()
                    .zip(step.iter())
                    .map(|(b, s)| b + scale * s)
                    .collect();
                let next = self.evaluate(&trial);
                if next.loglik.is_finite() && next.loglik >= floor {
                    accepted = Some((trial, next));
                    break;
                }
                scale *= 0.5;
            }
            match accepted {
                Some((b, e)) => {
                    beta = b;
                    eval = e;
                    loglik_path.push(eval.loglik);
                }
                // No representable ascent left: the score is at rounding level.
                None if norm < 1e-6 => break,
                None => {
                    return Err(Error::NonConvergence {
                        model: model.into(),
                        iterations,
                        score_norm: norm,
                    })
                }
            }
        }
        let information = eval.information.clone();
        let covariance = if p == 0 {
            DMatrix::zeros(0, 0)
        } else {
            information
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Singular {
                    model: model.into(),
                    iteration: iterations,
                })?
                .inverse()
        };
        let jumps = self.jumps(&beta);
        let baseline = StepFunction::new(
            jumps.iter().map(|j| j.time).collect(),
            jumps.iter().map(|j| j.dlambda).collect(),
        )?;
        let risk = (0..self.times.len())
            .map(|i| self.eta(&beta, i).exp())
            .collect();
        Ok(CoxFit {
            target: self.target,
            design,
            beta,
            baseline,
            estimation: Some(Box::new(CoxEstimation {
                times: self.times,
                delta: self.delta,
                x: self.x,
                weights: self.weights,
                risk,
                jumps,
                information,
                covariance,
                loglik_path,
                iterations,
            })),
        })
    }
}

pub fn fit_cox(dataset: &Dataset, target: Target, design: &Design) -> Result<CoxFit> {
    CoxProblem::new(dataset, target, design, None)?.fit(design.clone())
}

/// Case-weighted fit; weights multiply each subject's likelihood contribution.
pub fn fit_cox_weighted(
    dataset: &Dataset,
    target: Target,
    design: &Design,
    weights: &[f64],
) -> Result<CoxFit> {
    CoxProblem::new(dataset, target, design, Some(weights))?.fit(design.clone())
}

/// Cox model for the censoring hazard; `K_C(t|a,w)` is [`CoxFit::survival`].
pub fn fit_censoring(dataset: &Dataset, design: &Design) -> Result<CoxFit> {
    fit_cox(dataset, Target::Censoring, design)
}

/// Influence pieces of a fitted Cox model in sum form: `beta_hat - beta ~ sum_i beta[i]`
/// and `Lambda0_hat(t) - Lambda0(t) ~ sum_i baseline_at(i, t)`.
#[derive(Debug, Clone)]
pub struct CoxInfluence {
    /// Score residuals `U_i`.
    pub score_residuals: Vec<Vec<f64>>,
    /// `I^{-1} U_i`.
    pub beta: Vec<Vec<f64>>,
    times: Vec<f64>,
    inv_s0: Vec<f64>,
    /// Prefix sums of `dLambda0 / S0`.
    cum_rate: Vec<f64>,
    /// Prefix sums of `xbar dLambda0`.
    cum_xbar: Vec<Vec<f64>>,
    delta: Vec<bool>,
    subject_times: Vec<f64>,
    risk: Vec<f64>,
}

impl CoxInfluence {
    fn new(est: &CoxEstimation) -> Result<Self> {
        let p = est.p();
        let n = est.n();
        let times: Vec<f64> = est.jumps.iter().map(|j| j.time).collect();
        let mut cum_rate = Vec::with_capacity(times.len());
        let mut cum_xbar = Vec::with_capacity(times.len());
        let mut cum_lambda = Vec::with_capacity(times.len());
        let (mut r_acc, mut l_acc, mut h_acc) = (0.0, 0.0, vec![0.0; p]);
        for j in &est.jumps {
            r_acc += j.dlambda / j.s0;
            l_acc += j.dlambda;
            for (h, x) in h_acc.iter_mut().zip(&j.xbar) {
                *h += x * j.dlambda;
            }
            cum_rate.push(r_acc);
            cum_lambda.push(l_acc);
            cum_xbar.push(h_acc.clone());
        }
        let last_index = |t: f64| times.partition_point(|&s| s <= t).checked_sub(1);

        let mut score_residuals = Vec::with_capacity(n);
        for i in 0..n {
            let xi = est.x_row(i);
            let mut u = vec![0.0; p];
            if let Some(k) = last_index(est.times[i]) {
                for c in 0..p {
                    u[c] = -est.risk[i] * (xi[c] * cum_lambda[k] - cum_xbar[k][c]);
                }
                if est.delta[i] {
                    for c in 0..p {
                        u[c] += xi[c] - est.jumps[k].xbar[c];
                    }
                }
            }
            score_residuals.push(u);
        }
        let beta = if p == 0 {
            vec![Vec::new(); n]
        } else {
            score_residuals
                .iter()
                .map(|u| (&est.covariance * DVector::from_column_slice(u)).as_slice().to_vec())
                .collect()
        };
        Ok(CoxInfluence {
            score_residuals,
            beta,
            inv_s0: est.jumps.iter().map(|j| 1.0 / j.s0).collect(),
            times,
            cum_rate,
            cum_xbar,
            delta: est.delta.clone(),
            subject_times: est.times.clone(),
            risk: est.risk.clone(),
        })
    }

    /// Baseline-hazard influence of subject `i` at time `t`.
    pub fn baseline_at(&self, i: usize, t: f64) -> f64 {
        let Some(kt) = self.times.partition_point(|&s| s <= t).checked_sub(1) else {
            return 0.0;
        };
        let ti = self.subject_times[i];
        let mut v = 0.0;
        if self.delta[i] && ti <= t {
            let k = self.times.partition_point(|&s| s <= ti) - 1;
            v += self.inv_s0[k];
        }
        if let Some(k) = self.times.partition_point(|&s| s <= ti.min(t)).checked_sub(1) {
            v -= self.risk[i] * self.cum_rate[k];
        }
        v - self.cum_xbar[kt]
            .iter()
            .zip(&self.beta[i])
            .map(|(h, e)| h * e)
            .sum::<f64>()
    }
}
