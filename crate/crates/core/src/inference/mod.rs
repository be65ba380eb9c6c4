//! Posterior approximations behind one density-plus-sampler interface:
//! neural estimators (with MCMC where they only give a likelihood or ratio),
//! rejection ABC with a kernel density surrogate, and seed ensembles.

mod abc;
mod analytic;
mod ensemble;
mod neural;

use serde::{Deserialize, Serialize};

use crate::diffcore::RealArray;
use crate::error::Result;
use crate::sampling::McmcDiagnostics;

pub use analytic::{ConjugatePosterior, PriorPosterior};
pub use abc::{abc_posterior, abc_rejection, AbcPosterior, AbcResult, AbcTable, AbcTablePosterior, DistanceKind};
pub use ensemble::{ensemble, EnsemblePosterior, DEFAULT_NORMALIZATION_DRAWS};
pub use neural::{nle_posterior, npe_posterior, nre_posterior, NeuralPosterior};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosteriorKind {
    #[serde(rename = "NPE")]
    Npe,
    #[serde(rename = "NLE_MCMC")]
    NleMcmc,
    #[serde(rename = "NRE_MCMC")]
    NreMcmc,
    #[serde(rename = "ABC_KDE")]
    AbcKde,
    #[serde(rename = "ENSEMBLE")]
    Ensemble,
    /// Closed-form densities: reference posteriors, priors, test fixtures.
    #[serde(rename = "ANALYTIC")]
    Analytic,
}

/// Draws from a posterior approximation. MCMC-backed samplers attach their
/// convergence diagnostics.
#[derive(Clone, Debug)]
pub struct PosteriorSamples {
    pub samples: RealArray,
    pub diagnostics: Option<McmcDiagnostics>,
}

impl PosteriorSamples {
    pub fn exact(samples: RealArray) -> Self {
        Self {
            samples,
            diagnostics: None,
        }
    }

    /// True when an MCMC sampler ran and failed its convergence checks.
    pub fn flagged(&self) -> bool {
        self.diagnostics.as_ref().is_some_and(|d| !d.passed())
    }
}

/// `q(θ | y)` known up to a constant per `y`, with a matching sampler.
pub trait PosteriorApproximation: Send + Sync {
    fn kind(&self) -> PosteriorKind;

    fn theta_dim(&self) -> usize;

    /// Whether `unnorm_logpdf` integrates to one over θ.
    fn is_normalized(&self) -> bool;

    /// `log q(θ | y) + c(y)` for every row of `theta`.
    fn unnorm_logpdf(&self, theta: &RealArray, y: &[f64]) -> Result<Vec<f64>>;

    fn sample(&self, y: &[f64], n: usize, seed: u64) -> Result<PosteriorSamples>;
}

/// `log(mean(exp(v)))`, stable for large magnitudes; `−∞` for an empty or
/// all-`−∞` input.
pub fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return if m == f64::INFINITY { m } else { f64::NEG_INFINITY };
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + (s / v.len() as f64).ln()
}
