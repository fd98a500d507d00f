//! Monte Carlo summaries. Every figure leaving the probabilistic engines is an
//! [`Estimate`] so the standard error travels with the value.

use serde::{Deserialize, Serialize};

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub const ZERO: Estimate = Estimate { value: 0.0, se: 0.0 };

    pub fn exact(value: f64) -> Self {
        Estimate { value, se: 0.0 }
    }

    /// Sample mean and standard error of the mean. Summation is sequential in
    /// input order, so the result does not depend on any thread count.
    pub fn from_samples<T: Real>(samples: &[T]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Estimate { value: f64::NAN, se: f64::NAN };
        }
        let mean = samples.iter().map(|s| s.as_f64()).sum::<f64>() / n as f64;
        if n == 1 {
            return Estimate { value: mean, se: 0.0 };
        }
        let var = samples
            .iter()
            .map(|s| {
                let d = s.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / (n as f64 - 1.0);
        Estimate { value: mean, se: (var / n as f64).sqrt() }
    }

    /// `|value - target| <= k * se`
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.se
    }

    /// Difference of two independent estimates.
    pub fn minus(&self, other: &Estimate) -> Estimate {
        Estimate { value: self.value - other.value, se: (self.se * self.se + other.se * other.se).sqrt() }
    }
}
