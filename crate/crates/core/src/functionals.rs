//! Counterfactual cause-1 risk under separate interventions on the two
//! treatment components, its plug-in estimator and the plug-in influence function.
//!
//! `P1(t, a_y, a_d, w)` integrates the cause-1 hazard of arm `a_y` against the
//! event-free survival built from cause-1 hazard of arm `a_y` and cause-2 hazard
//! of arm `a_d`. With step-function hazards the integral is a finite sum over
//! the jump times, and the survival inside it is evaluated at left limits.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Event};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::inference::confidence_interval;
use crate::nuisance::{merge_baselines, ArmPaths, CoxFit, HazardGrid, NuisanceSet};

/// How event-free survival is built from cumulative hazard increments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurvivalForm {
    /// `exp(-Lambda1 - Lambda2)`.
    #[default]
    Exponential,
    /// `prod(1 - dLambda1 - dLambda2)`, the Aalen-Johansen form. Martingale
    /// identities hold exactly for step hazards under this form.
    ProductLimit,
}

impl SurvivalForm {
    #[inline]
    pub fn factor(self, d: f64) -> f64 {
        match self {
            SurvivalForm::Exponential => (-d).exp(),
            SurvivalForm::ProductLimit => (1.0 - d).max(0.0),
        }
    }
}

/// One `coef * P1(t, a_y, a_d)` term of a risk contrast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub coef: f64,
    pub a_y: u8,
    pub a_d: u8,
}

/// Target parameter: a counterfactual risk or one of the separable contrasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimand {
    Risk { a_y: u8, a_d: u8 },
    /// `P1(t,1,a_d) - P1(t,0,a_d)`.
    Direct { a_d: u8 },
    /// `P1(t,a_y,1) - P1(t,a_y,0)`.
    Indirect { a_y: u8 },
    /// `P1(t,1,1) - P1(t,0,0)`.
    Total,
}

impl Estimand {
    pub fn terms(self) -> Vec<Term> {
        let t = |coef, a_y, a_d| Term { coef, a_y, a_d };
        match self {
            Estimand::Risk { a_y, a_d } => vec![t(1.0, a_y, a_d)],
            Estimand::Direct { a_d } => vec![t(1.0, 1, a_d), t(-1.0, 0, a_d)],
            Estimand::Indirect { a_y } => vec![t(1.0, a_y, 1), t(-1.0, a_y, 0)],
            Estimand::Total => vec![t(1.0, 1, 1), t(-1.0, 0, 0)],
        }
    }

    pub fn is_risk(self) -> bool {
        matches!(self, Estimand::Risk { .. })
    }

    /// Same estimand after interchanging treatment levels 0 and 1, up to sign:
    /// returns `(estimand', sign)` with `value = sign * value'(relabeled data)`.
    pub fn relabeled(self) -> (Estimand, f64) {
        match self {
            Estimand::Risk { a_y, a_d } => (
                Estimand::Risk {
                    a_y: 1 - a_y,
                    a_d: 1 - a_d,
                },
                1.0,
            ),
            Estimand::Direct { a_d } => (Estimand::Direct { a_d: 1 - a_d }, -1.0),
            Estimand::Indirect { a_y } => (Estimand::Indirect { a_y: 1 - a_y }, -1.0),
            Estimand::Total => (Estimand::Total, -1.0),
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimand::Risk { a_y, a_d } => write!(f, "risk{a_y}{a_d}"),
            Estimand::Direct { a_d } => write!(f, "direct{a_d}"),
            Estimand::Indirect { a_y } => write!(f, "indirect{a_y}"),
            Estimand::Total => write!(f, "total"),
        }
    }
}

impl FromStr for Estimand {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bit = |c: &str| match c {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            _ => Err(Error::InvalidArgument(format!("unknown estimand `{s}`"))),
        };
        match s {
            "total" => Ok(Estimand::Total),
            _ if s.starts_with("direct") => Ok(Estimand::Direct { a_d: bit(&s[6..])? }),
            _ if s.starts_with("indirect") => Ok(Estimand::Indirect { a_y: bit(&s[8..])? }),
            _ if s.starts_with("risk") && s.len() == 6 => Ok(Estimand::Risk {
                a_y: bit(&s[4..5])?,
                a_d: bit(&s[5..6])?,
            }),
            _ => Err(Error::InvalidArgument(format!(
                "unknown estimand `{s}` (expected direct0|direct1|indirect0|indirect1|total|riskXY)"
            ))),
        }
    }
}

/// Event-free survival at left limits, survival at the jump, and the running
/// integral of `survival(s-) dLambda(s)` over the first `len` grid points.
#[derive(Debug, Clone)]
pub(crate) struct RiskPath {
    pub e_pre: Vec<f64>,
    pub e_post: Vec<f64>,
    pub p: Vec<f64>,
}

pub(crate) fn risk_path(
    integrator: &[f64],
    d1: &[f64],
    d2: &[f64],
    len: usize,
    form: SurvivalForm,
) -> RiskPath {
    let mut e_pre = Vec::with_capacity(len);
    let mut e_post = Vec::with_capacity(len);
    let mut p = Vec::with_capacity(len);
    let (mut e, mut acc) = (1.0, 0.0);
    for m in 0..len {
        e_pre.push(e);
        acc += e * integrator[m];
        p.push(acc);
        e *= form.factor(d1[m] + d2[m]);
        e_post.push(e);
    }
    RiskPath { e_pre, e_post, p }
}

/// Risk path of `P1(., a_y, a_d, w)`.
pub(crate) fn term_path(paths: &ArmPaths, a_y: u8, a_d: u8, len: usize, form: SurvivalForm) -> RiskPath {
    let (y, d) = (usize::from(a_y), usize::from(a_d));
    risk_path(&paths.d1[y], &paths.d1[y], &paths.d2[d], len, form)
}

/// Value of a running sum at `count` grid points (0 when `count == 0`).
#[inline]
pub(crate) fn at_count(v: &[f64], count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        v[count - 1]
    }
}

pub(crate) fn check_times(times: &[f64]) -> Result<f64> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("empty time grid".into()));
    }
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "evaluation times must be finite and nonnegative, got {t}"
        )));
    }
    Ok(times.iter().copied().fold(0.0, f64::max))
}

/// `P1(t, a_y, a_d, w)` from the two cause-specific Cox models.
pub fn p1_conditional(
    t: f64,
    a_y: u8,
    a_d: u8,
    w: &[f64],
    cause1: &CoxFit,
    cause2: &CoxFit,
    form: SurvivalForm,
) -> Result<f64> {
    check_times(&[t])?;
    let (_, b1, b2) = merge_baselines(&cause1.baseline, &cause2.baseline, t);
    let r1 = cause1.relative_risk(a_y, w);
    let r2 = cause2.relative_risk(a_d, w);
    let d1: Vec<f64> = b1.iter().map(|d| d * r1).collect();
    let d2: Vec<f64> = b2.iter().map(|d| d * r2).collect();
    Ok(at_count(&risk_path(&d1, &d1, &d2, d1.len(), form).p, d1.len()))
}

/// Per-subject conditional contrasts `sum_terms coef * P1(t, a_y, a_d, W_i)`, indexed `[subject][time]`.
pub fn conditional_effects(
    dataset: &Dataset,
    nuisance: &NuisanceSet,
    times: &[f64],
    estimand: Estimand,
    form: SurvivalForm,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    let t_max = check_times(times)?;
    let grid = HazardGrid::new(nuisance, t_max);
    let counts: Vec<usize> = times.iter().map(|&t| grid.count_through(t)).collect();
    let terms = estimand.terms();
    let records = dataset.records();
    Ok(exec.map(records.len(), |i| {
        let paths = grid.arm_paths(nuisance, &records[i].covariates);
        let mut out = vec![0.0; times.len()];
        for term in &terms {
            let path = term_path(&paths, term.a_y, term.a_d, grid.len(), form);
            for (o, &c) in out.iter_mut().zip(&counts) {
                *o += term.coef * at_count(&path.p, c);
            }
        }
        out
    }))
}

fn column_means(rows: &[Vec<f64>], weights: Option<&[f64]>) -> Vec<f64> {
    let k = rows.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; k];
    let mut total = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        total += w;
        for (a, v) in acc.iter_mut().zip(row) {
            *a += w * v;
        }
    }
    acc.iter().map(|a| a / total).collect()
}

/// Plug-in estimate: the covariate-averaged conditional contrast at each time.
pub fn plug_in_effect(
    dataset: &Dataset,
    nuisance: &NuisanceSet,
    times: &[f64],
    estimand: Estimand,
    form: SurvivalForm,
    exec: Execution,
) -> Result<RiskCurve> {
    let rows = conditional_effects(dataset, nuisance, times, estimand, form, exec)?;
    Ok(RiskCurve::new(
        estimand.to_string(),
        times.to_vec(),
        column_means(&rows, None),
    ))
}

/// Plug-in estimate averaging over covariates with case weights.
pub fn plug_in_weighted(
    dataset: &Dataset,
    nuisance: &NuisanceSet,
    times: &[f64],
    estimand: Estimand,
    form: SurvivalForm,
    weights: &[f64],
) -> Result<Vec<f64>> {
    if weights.len() != dataset.len() {
        return Err(Error::InvalidArgument("one weight per subject required".into()));
    }
    let rows = conditional_effects(dataset, nuisance, times, estimand, form, Execution::Sequential)?;
    Ok(column_means(&rows, Some(weights)))
}

/// Cumulative incidence of `cause` in arm `arm`, averaged over covariates.
pub fn cumulative_incidence(
    dataset: &Dataset,
    nuisance: &NuisanceSet,
    times: &[f64],
    arm: u8,
    cause: Event,
    form: SurvivalForm,
    exec: Execution,
) -> Result<RiskCurve> {
    let [c1, c2] = cumulative_incidences(dataset, nuisance, times, arm, form, exec)?;
    Ok(if cause == Event::Cause2 { c2 } else { c1 })
}

/// Cause-1 and cause-2 cumulative incidence in arm `arm`, averaged over
/// covariates, from one pass over the hazard grid per subject.
pub fn cumulative_incidences(
    dataset: &Dataset,
    nuisance: &NuisanceSet,
    times: &[f64],
    arm: u8,
    form: SurvivalForm,
    exec: Execution,
) -> Result<[RiskCurve; 2]> {
    let t_max = check_times(times)?;
    let grid = HazardGrid::new(nuisance, t_max);
    let counts: Vec<usize> = times.iter().map(|&t| grid.count_through(t)).collect();
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by_key(|&j| counts[j]);
    let records = dataset.records();
    let k = times.len();
    let rows = exec.map(records.len(), |i| {
        let w = &records[i].covariates;
        let r1 = nuisance.cause1.relative_risk(arm, w);
        let r2 = nuisance.cause2.relative_risk(arm, w);
        // Row layout: cause-1 values then cause-2 values.
        let mut row = vec![0.0; 2 * k];
        let (mut e, mut p1, mut p2) = (1.0, 0.0, 0.0);
        let mut next = order.iter().peekable();
        while next.peek().is_some_and(|&&j| counts[j] == 0) {
            next.next();
        }
        for m in 0..grid.len() {
            let Some(&&j) = next.peek() else { break };
            let (d1, d2) = (grid.base1[m] * r1, grid.base2[m] * r2);
            p1 += e * d1;
            p2 += e * d2;
            e *= form.factor(d1 + d2);
            if counts[j] == m + 1 {
                while let Some(&&j) = next.peek() {
                    if counts[j] != m + 1 {
                        break;
                    }
                    row[j] = p1;
                    row[k + j] = p2;
                    next.next();
                }
            }
        }
        row
    });
    let means = column_means(&rows, None);
    let curve = |cause: u8, values: &[f64]| {
        RiskCurve::new(format!("cif_cause{cause}_arm{arm}"), times.to_vec(), values.to_vec())
    };
    Ok([curve(1, &means[..k]), curve(2, &means[k..])])
}

/// Per-subject influence values of the plug-in estimator, `[subject][time]`,
/// scaled so that `estimate - truth ~ mean_i(psi_i)`.
///
/// Combines the covariate-averaging term with the linearizations of the two
/// Breslow baselines and the two coefficient vectors. Requires fitted Cox
/// models and the exponential survival form.
pub fn plug_in_influence(
    dataset: &Dataset,
    nuisance: &NuisanceSet,
    times: &[f64],
    estimand: Estimand,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    let t_max = check_times(times)?;
    let (fit1, fit2) = (&nuisance.cause1, &nuisance.cause2);
    let (est1, est2) = (fit1.estimation()?, fit2.estimation()?);
    if est1.n() != dataset.len() || est2.n() != dataset.len() {
        return Err(Error::State(
            "Cox models were fitted on a different sample".into(),
        ));
    }
    let (inf1, inf2) = (fit1.influence()?, fit2.influence()?);
    let grid = HazardGrid::new(nuisance, t_max);
    let g = grid.len();
    let n = dataset.len();
    let nf = n as f64;
    let records = dataset.records();
    let counts: Vec<usize> = times.iter().map(|&t| grid.count_through(t)).collect();

    // Baseline cumulative hazards at left limits on the grid.
    let left_cum = |b: &[f64]| {
        let mut acc = 0.0;
        b.iter()
            .map(|d| {
                let v = acc;
                acc += d;
                v
            })
            .collect::<Vec<f64>>()
    };
    let (c1, c2) = (left_cum(&grid.base1), left_cum(&grid.base2));
    let (p1, p2) = (fit1.design.dim(), fit2.design.dim());

    let mut psi = vec![vec![0.0; times.len()]; n];
    for term in estimand.terms() {
        // Per-subject risk paths and their covariate-averaged derivatives,
        // reduced over fixed-size chunks so the sum order never changes.
        const CHUNK: usize = 64;
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by_key(|&j| counts[j]);
        let n_chunks = n.div_ceil(CHUNK);
        let partial = exec.map(n_chunks, |c| {
            let mut acc = TermAccumulator::new(g, times.len(), p1, p2);
            for k in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let w = &records[k].covariates;
                let r1 = fit1.relative_risk(term.a_y, w);
                let r2 = fit2.relative_risk(term.a_d, w);
                let l1 = fit1.design.row(term.a_y, w);
                let l2 = fit2.design.row(term.a_d, w);
                let mut p_run = 0.0;
                let (mut a1_run, mut a2_run) = (0.0, 0.0);
                let mut ti = 0;
                let mut ps = vec![0.0; times.len()];
                for m in 0..=g {
                    while ti < order.len() && counts[order[ti]] == m {
                        let j = order[ti];
                        ps[j] = p_run;
                        for c in 0..p1 {
                            acc.v1[j][c] += a1_run * l1[c];
                        }
                        for c in 0..p2 {
                            acc.v2[j][c] += a2_run * l2[c];
                        }
                        ti += 1;
                    }
                    if m == g {
                        break;
                    }
                    let e = (-r1 * c1[m] - r2 * c2[m]).exp();
                    let b1 = grid.base1[m];
                    acc.q1[m] += e * r1;
                    acc.r1[m] += e * b1 * r1 * r1;
                    acc.r2[m] += e * b1 * r1 * r2;
                    p_run += e * b1 * r1;
                    a1_run += e * b1 * r1 * (1.0 - c1[m] * r1);
                    a2_run -= e * b1 * r1 * c2[m] * r2;
                }
                acc.p.push(ps);
            }
            acc
        });
        let mut total = TermAccumulator::new(g, times.len(), p1, p2);
        for part in partial {
            total.absorb(part);
        }
        let p_bar = column_means(&total.p, None);

        for (j, &count) in counts.iter().enumerate() {
            // Suffix sums of R over (m, count).
            let mut w1 = vec![0.0; count];
            let mut w2 = vec![0.0; count];
            let (mut s1, mut s2) = (0.0, 0.0);
            for m in (0..count).rev() {
                w1[m] = (total.q1[m] - s1) / nf;
                w2[m] = -s2 / nf;
                s1 += total.r1[m];
                s2 += total.r2[m];
            }
            let v1: Vec<f64> = total.v1[j].iter().map(|v| v / nf).collect();
            let v2: Vec<f64> = total.v2[j].iter().map(|v| v / nf).collect();
            let part1 = BaselinePart::new(est1, &grid.times[..count], &w1);
            let part2 = BaselinePart::new(est2, &grid.times[..count], &w2);
            let t = times[j];
            for i in 0..n {
                let mut eps = (total.p[i][j] - p_bar[j]) / nf;
                eps += part1.subject(est1, i, t) + dot(&inf1.beta[i], &v1)
                    - dot(&inf1.beta[i], &part1.xbar_weight);
                eps += part2.subject(est2, i, t) + dot(&inf2.beta[i], &v2)
                    - dot(&inf2.beta[i], &part2.xbar_weight);
                psi[i][j] += term.coef * nf * eps;
            }
        }
    }
    Ok(psi)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct TermAccumulator {
    q1: Vec<f64>,
    r1: Vec<f64>,
    r2: Vec<f64>,
    v1: Vec<Vec<f64>>,
    v2: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
}

impl TermAccumulator {
    fn new(g: usize, nt: usize, p1: usize, p2: usize) -> Self {
        TermAccumulator {
            q1: vec![0.0; g],
            r1: vec![0.0; g],
            r2: vec![0.0; g],
            v1: vec![vec![0.0; p1]; nt],
            v2: vec![vec![0.0; p2]; nt],
            p: Vec::new(),
        }
    }

    fn absorb(&mut self, other: TermAccumulator) {
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.q1, &other.q1);
        add(&mut self.r1, &other.r1);
        add(&mut self.r2, &other.r2);
        for (a, b) in self.v1.iter_mut().zip(&other.v1) {
            add(a, b);
        }
        for (a, b) in self.v2.iter_mut().zip(&other.v2) {
            add(a, b);
        }
        self.p.extend(other.p);
    }
}

/// Linearization of one Breslow baseline, weighted by the derivative of the
/// averaged functional with respect to each baseline increment.
struct BaselinePart {
    jump_times: Vec<f64>,
    /// Weight / S0 at each jump.
    unit: Vec<f64>,
    /// Prefix sums of weight * dLambda0 / S0.
    cum: Vec<f64>,
    /// Sum of weight * xbar * dLambda0.
    xbar_weight: Vec<f64>,
}

impl BaselinePart {
    fn new(est: &crate::nuisance::CoxEstimation, grid_times: &[f64], weight: &[f64]) -> Self {
        let horizon = grid_times.last().copied().unwrap_or(f64::NEG_INFINITY);
        let mut jump_times = Vec::new();
        let mut unit = Vec::new();
        let mut cum = Vec::new();
        let mut xbar_weight = vec![0.0; est.p()];
        let mut acc = 0.0;
        for jump in est.jumps.iter().take_while(|j| j.time <= horizon) {
            let g = grid_times.partition_point(|&s| s < jump.time);
            let wgt = weight[g];
            jump_times.push(jump.time);
            unit.push(wgt / jump.s0);
            acc += wgt * jump.dlambda / jump.s0;
            cum.push(acc);
            for (x, xb) in xbar_weight.iter_mut().zip(&jump.xbar) {
                *x += wgt * xb * jump.dlambda;
            }
        }
        BaselinePart {
            jump_times,
            unit,
            cum,
            xbar_weight,
        }
    }

    /// Martingale part `sum_m weight_m (dN_i - Y_i r_i dLambda0) / S0` up to `t`.
    fn subject(&self, est: &crate::nuisance::CoxEstimation, i: usize, t: f64) -> f64 {
        let ti = est.times[i];
        let mut v = 0.0;
        if est.delta[i] && ti <= t {
            if let Some(k) = self.jump_times.partition_point(|&s| s <= ti).checked_sub(1) {
                if self.jump_times[k] == ti {
                    v += self.unit[k];
                }
            }
        }
        if let Some(k) = self.jump_times.partition_point(|&s| s <= ti.min(t)).checked_sub(1) {
            v -= est.risk[i] * self.cum[k];
        }
        v
    }
}

/// Analytic standard error of the plug-in estimator at each time.
pub fn plug_in_see(
    dataset: &Dataset,
    nuisance: &NuisanceSet,
    times: &[f64],
    estimand: Estimand,
    exec: Execution,
) -> Result<Vec<f64>> {
    let psi = plug_in_influence(dataset, nuisance, times, estimand, exec)?;
    (0..times.len())
        .map(|j| {
            let col: Vec<f64> = psi.iter().map(|row| row[j]).collect();
            crate::eif::eif_variance(&col).map(f64::sqrt)
        })
        .collect()
}

/// An estimated curve over a time grid with optional pointwise uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCurve {
    pub label: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub se: Option<Vec<f64>>,
    pub ci: Option<Vec<(f64, f64)>>,
}

impl RiskCurve {
    pub fn new(label: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Self {
        RiskCurve {
            label: label.into(),
            times,
            values,
            se: None,
            ci: None,
        }
    }

    /// Attaches standard errors and normal confidence intervals at `level`.
    pub fn with_se(mut self, se: Vec<f64>, level: f64) -> Result<Self> {
        if se.len() != self.values.len() {
            return Err(Error::InvalidArgument("one standard error per time required".into()));
        }
        self.ci = Some(
            self.values
                .iter()
                .zip(&se)
                .map(|(&v, &s)| confidence_interval(v, s, level))
                .collect::<Result<_>>()?,
        );
        self.se = Some(se);
        Ok(self)
    }

    /// `time,value,se,lo,hi`; absent uncertainty columns are left empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["time", "value", "se", "lo", "hi"])?;
        for (k, (&t, &v)) in self.times.iter().zip(&self.values).enumerate() {
            let se = self.se.as_ref().map_or(String::new(), |s| s[k].to_string());
            let (lo, hi) = self
                .ci
                .as_ref()
                .map_or((String::new(), String::new()), |c| {
                    (c[k].0.to_string(), c[k].1.to_string())
                });
            wtr.write_record([t.to_string(), v.to_string(), se, lo, hi])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
