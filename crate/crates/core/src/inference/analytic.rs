use rand_distr::{Distribution, StandardNormal};

use super::{PosteriorApproximation, PosteriorKind, PosteriorSamples};
use crate::diffcore::RealArray;
use crate::error::{Error, Result};
use crate::seeding::rng;
use crate::tasks::{models::tg, Prior};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Exact Gaussian-model posterior given the full 100-point series, with the
/// variance optionally multiplied by `variance_scale` (below 1 gives an
/// overconfident approximation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConjugatePosterior {
    pub variance_scale: f64,
}

impl ConjugatePosterior {
    pub fn exact() -> Self {
        Self { variance_scale: 1.0 }
    }

    fn moments(&self, y: &[f64]) -> Result<(f64, f64)> {
        if y.len() != tg::N {
            return Err(Error::Dimension {
                what: "conjugate posterior data",
                expected: tg::N,
                got: y.len(),
            });
        }
        let (m, v) = tg::posterior(y);
        Ok((m, v * self.variance_scale))
    }
}

impl PosteriorApproximation for ConjugatePosterior {
    fn kind(&self) -> PosteriorKind {
        PosteriorKind::Analytic
    }

    fn theta_dim(&self) -> usize {
        1
    }

    fn is_normalized(&self) -> bool {
        true
    }

    fn unnorm_logpdf(&self, theta: &RealArray, y: &[f64]) -> Result<Vec<f64>> {
        let (m, v) = self.moments(y)?;
        Ok(theta
            .data()
            .iter()
            .map(|t| -0.5 * (t - m).powi(2) / v - 0.5 * (LN_2PI + v.ln()))
            .collect())
    }

    fn sample(&self, y: &[f64], n: usize, seed: u64) -> Result<PosteriorSamples> {
        let (m, v) = self.moments(y)?;
        let sd = v.sqrt();
        let mut r = rng(seed);
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                m + sd * z
            })
            .collect();
        Ok(PosteriorSamples::exact(RealArray::matrix(n, 1, data)))
    }
}

/// Ignores the data and returns the prior.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorPosterior(pub Prior);

impl PosteriorApproximation for PriorPosterior {
    fn kind(&self) -> PosteriorKind {
        PosteriorKind::Analytic
    }

    fn theta_dim(&self) -> usize {
        self.0.dim()
    }

    fn is_normalized(&self) -> bool {
        true
    }

    fn unnorm_logpdf(&self, theta: &RealArray, _y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.log_density_rows(theta))
    }

    fn sample(&self, _y: &[f64], n: usize, seed: u64) -> Result<PosteriorSamples> {
        Ok(PosteriorSamples::exact(self.0.sample_n(n, &mut rng(seed))))
    }
}
