use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

const TOL: f64 = 1e-9;
const MAX_ITER: usize = 50;
/// Coefficients beyond this size mean the likelihood has no finite maximizer.
const SEPARATION_BOUND: f64 = 30.0;

/// Logistic regression of treatment on an intercept and selected covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Intercept first, then one coefficient per entry of `covariates`.
    pub alpha: Vec<f64>,
    pub covariates: Vec<usize>,
    pub iterations: usize,
}

impl LogisticFit {
    pub fn linear(&self, w: &[f64]) -> f64 {
        self.alpha[0]
            + self.alpha[1..]
                .iter()
                .zip(&self.covariates)
                .map(|(a, &j)| a * w[j])
                .sum::<f64>()
    }

    /// Unclipped fitted `P(A = 1 | w)`.
    pub fn prob(&self, w: &[f64]) -> f64 {
        expit(self.linear(w))
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maximum-likelihood fit by Newton-Raphson (iteratively reweighted least squares).
pub fn fit_propensity(dataset: &Dataset, covariates: &[usize]) -> Result<LogisticFit> {
    const MODEL: &str = "propensity model";
    if !dataset.has_both_arms() {
        return Err(Error::DegenerateFit {
            model: MODEL.into(),
            reason: "both treatment arms must be present".into(),
        });
    }
    if let Some(j) = covariates.iter().find(|&&j| j >= dataset.dim()) {
        return Err(Error::InvalidArgument(format!("covariate index {j} out of range")));
    }
    let p = covariates.len() + 1;
    let n = dataset.len();
    let x = DMatrix::from_fn(n, p, |i, c| {
        if c == 0 {
            1.0
        } else {
            dataset.records()[i].covariates[covariates[c - 1]]
        }
    });
    let y = DVector::from_iterator(n, dataset.records().iter().map(|r| f64::from(r.treatment)));
    let mut alpha = DVector::<f64>::zeros(p);
    for iteration in 0..=MAX_ITER {
        let eta = &x * &alpha;
        let mu = eta.map(expit);
        let score = x.transpose() * (&y - &mu);
        let norm = score.amax();
        if alpha.amax() > SEPARATION_BOUND || !norm.is_finite() {
            return Err(Error::NonConvergence {
                model: format!("{MODEL} (separation)"),
                iterations: iteration,
                score_norm: norm,
            });
        }
        if norm < TOL {
            return Ok(LogisticFit {
                alpha: alpha.as_slice().to_vec(),
                covariates: covariates.to_vec(),
                iterations: iteration,
            });
        }
        if iteration == MAX_ITER {
            break;
        }
        let v = mu.map(|m| m * (1.0 - m));
        let mut info = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let xi = x.row(i).transpose();
            info.ger(v[i], &xi, &xi, 1.0);
        }
        let step = info
            .cholesky()
            .ok_or_else(|| Error::Singular {
                model: MODEL.into(),
                iteration,
            })?
            .solve(&score);
        alpha += step;
    }
    let mu = (&x * &alpha).map(expit);
    Err(Error::NonConvergence {
        model: MODEL.into(),
        iterations: MAX_ITER,
        score_norm: (x.transpose() * (&y - &mu)).amax(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Event, Record};

    fn ds(rows: &[(u8, f64)]) -> Dataset {
        let recs = rows
            .iter()
            .map(|&(a, w)| Record::new(1.0, Event::Censored, a, vec![w]))
            .collect();
        Dataset::new(recs, vec!["w".into()]).unwrap()
    }

    #[test]
    fn intercept_only_is_sample_proportion() {
        let d = ds(&[(1, 0.0), (0, 0.0), (1, 0.0), (1, 0.0), (0, 0.0)]);
        let fit = fit_propensity(&d, &[]).unwrap();
        assert!((fit.prob(&[0.0]) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn separation_is_an_error() {
        let d = ds(&[(0, 0.1), (0, 0.2), (1, 0.8), (1, 0.9)]);
        assert!(matches!(
            fit_propensity(&d, &[0]),
            Err(Error::NonConvergence { .. })
        ));
    }

    #[test]
    fn single_arm_is_an_error() {
        let d = ds(&[(1, 0.1), (1, 0.2)]);
        assert!(matches!(
            fit_propensity(&d, &[]),
            Err(Error::DegenerateFit { .. })
        ));
    }
}
