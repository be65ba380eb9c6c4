use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::RealArray;
use crate::seeding::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Product prior with independent coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Prior {
    Normal { mean: Vec<f64>, sd: Vec<f64> },
    /// Shape and rate per coordinate.
    Gamma { shape: Vec<f64>, rate: Vec<f64> },
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::Normal { mean, .. } => mean.len(),
            Prior::Gamma { shape, .. } => shape.len(),
            Prior::Uniform { lower, .. } => lower.len(),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            Prior::Normal { mean, sd } => mean
                .iter()
                .zip(sd)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + s * z
                })
                .collect(),
            Prior::Gamma { shape, rate } => shape
                .iter()
                .zip(rate)
                .map(|(&k, &r)| Gamma::new(k, 1.0 / r).expect("valid gamma prior").sample(rng))
                .collect(),
            Prior::Uniform { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| l + (u - l) * rng.random::<f64>())
                .collect(),
        }
    }

    pub fn sample_n(&self, n: usize, rng: &mut Rng) -> RealArray {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend(self.sample(rng));
        }
        RealArray::matrix(n, d, data)
    }

    /// Log density; `-inf` outside the support.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        debug_assert_eq!(theta.len(), self.dim());
        match self {
            Prior::Normal { mean, sd } => theta
                .iter()
                .zip(mean.iter().zip(sd))
                .map(|(x, (m, s))| {
                    let z = (x - m) / s;
                    -0.5 * z * z - s.ln() - 0.5 * LN_2PI
                })
                .sum(),
            Prior::Gamma { shape, rate } => theta
                .iter()
                .zip(shape.iter().zip(rate))
                .map(|(&x, (&k, &r))| {
                    if x > 0.0 {
                        k * r.ln() - libm::lgamma(k) + (k - 1.0) * x.ln() - r * x
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .sum(),
            Prior::Uniform { lower, upper } => {
                let inside = theta
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .all(|(x, (l, u))| l <= x && x <= u);
                if inside {
                    -lower.iter().zip(upper).map(|(l, u)| (u - l).ln()).sum::<f64>()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn log_density_rows(&self, theta: &RealArray) -> Vec<f64> {
        (0..theta.rows()).map(|r| self.log_density(theta.row(r))).collect()
    }

    /// Support bounds per coordinate (infinite where unbounded).
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        match self {
            Prior::Normal { .. } => (vec![f64::NEG_INFINITY; d], vec![f64::INFINITY; d]),
            Prior::Gamma { .. } => (vec![0.0; d], vec![f64::INFINITY; d]),
            Prior::Uniform { lower, upper } => (lower.clone(), upper.clone()),
        }
    }
}
