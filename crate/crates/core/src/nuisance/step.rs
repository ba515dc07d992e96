use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Right-continuous nondecreasing step function starting at 0, stored as jump
/// times and jump sizes. Used for every cumulative hazard in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StepParts", into = "StepParts")]
pub struct StepFunction {
    times: Vec<f64>,
    increments: Vec<f64>,
    cumulative: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StepParts {
    jump_times: Vec<f64>,
    increments: Vec<f64>,
}

impl TryFrom<StepParts> for StepFunction {
    type Error = Error;
    fn try_from(p: StepParts) -> Result<Self> {
        StepFunction::new(p.jump_times, p.increments)
    }
}

impl From<StepFunction> for StepParts {
    fn from(s: StepFunction) -> Self {
        StepParts {
            jump_times: s.times,
            increments: s.increments,
        }
    }
}

impl StepFunction {
    pub fn new(times: Vec<f64>, increments: Vec<f64>) -> Result<Self> {
        if times.len() != increments.len() {
            return Err(Error::InvalidArgument(format!(
                "{} jump times but {} increments",
                times.len(),
                increments.len()
            )));
        }
        if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::InvalidArgument("jump times must be positive".into()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "jump times must be strictly increasing".into(),
            ));
        }
        if increments.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidArgument(
                "increments must be finite and nonnegative".into(),
            ));
        }
        let mut acc = 0.0;
        let cumulative = increments
            .iter()
            .map(|d| {
                acc += d;
                acc
            })
            .collect();
        Ok(StepFunction {
            times,
            increments,
            cumulative,
        })
    }

    pub fn zero() -> Self {
        StepFunction {
            times: Vec::new(),
            increments: Vec::new(),
            cumulative: Vec::new(),
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Value at `t`: sum of increments with jump time `<= t`.
    pub fn value(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// Left limit at `t`: sum of increments with jump time `< t`.
    pub fn left_value(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// Keeps only the jumps at or before `t_max`.
    pub fn truncated(&self, t_max: f64) -> StepFunction {
        let k = self.times.partition_point(|&s| s <= t_max);
        StepFunction {
            times: self.times[..k].to_vec(),
            increments: self.increments[..k].to_vec(),
            cumulative: self.cumulative[..k].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn right_continuous_with_left_limits() {
        let s = StepFunction::new(vec![1.0, 2.0], vec![0.5, 0.25]).unwrap();
        assert_eq!(s.value(0.0), 0.0);
        assert_eq!(s.value(1.0), 0.5);
        assert_eq!(s.left_value(1.0), 0.0);
        assert_eq!(s.value(1.5), 0.5);
        assert_eq!(s.value(2.0), 0.75);
        assert_eq!(s.left_value(2.0), 0.5);
        assert_eq!(s.truncated(1.5).value(10.0), 0.5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(StepFunction::new(vec![2.0, 1.0], vec![0.1, 0.1]).is_err());
        assert!(StepFunction::new(vec![1.0, 1.0], vec![0.1, 0.1]).is_err());
        assert!(StepFunction::new(vec![1.0], vec![-0.1]).is_err());
        assert!(StepFunction::new(vec![0.0], vec![0.1]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = StepFunction::new(vec![0.5, 3.0], vec![0.1, 0.2]).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("jump_times"));
        let back: StepFunction = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
