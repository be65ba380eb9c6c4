use std::sync::Arc;

use super::{PosteriorApproximation, PosteriorKind, PosteriorSamples};
use crate::diffcore::RealArray;
use crate::error::{Error, Result};
use crate::estimators::{EstimatorBundle, EstimatorKind};
use crate::sampling::{mcmc_sample, Kernel, McmcConfig};
use crate::seeding::rng;
use crate::tasks::Prior;

/// Warm-up floor per chain. Small sample requests (ensemble components,
/// small K) would otherwise adapt over too few iterations.
const MIN_WARMUP: usize = 250;

/// Posterior built from a trained estimator bundle.
#[derive(Clone, Debug)]
pub struct NeuralPosterior {
    kind: PosteriorKind,
    bundle: Arc<EstimatorBundle>,
    prior: Prior,
    mcmc: McmcConfig,
}

/// The flow's own posterior density and sampler. No prior correction.
pub fn npe_posterior(bundle: Arc<EstimatorBundle>, prior: &Prior) -> Result<NeuralPosterior> {
    NeuralPosterior::new(PosteriorKind::Npe, EstimatorKind::Npe, bundle, prior, McmcConfig::default())
}

/// `log q(y | θ) + log p(θ)`, sampled by MCMC.
pub fn nle_posterior(bundle: Arc<EstimatorBundle>, prior: &Prior, mcmc: McmcConfig) -> Result<NeuralPosterior> {
    NeuralPosterior::new(PosteriorKind::NleMcmc, EstimatorKind::Nle, bundle, prior, mcmc)
}

/// `logit(θ, y) + log p(θ)`, sampled by MCMC.
pub fn nre_posterior(bundle: Arc<EstimatorBundle>, prior: &Prior, mcmc: McmcConfig) -> Result<NeuralPosterior> {
    NeuralPosterior::new(PosteriorKind::NreMcmc, EstimatorKind::Nre, bundle, prior, mcmc)
}

impl NeuralPosterior {
    fn new(
        kind: PosteriorKind,
        expected: EstimatorKind,
        bundle: Arc<EstimatorBundle>,
        prior: &Prior,
        mcmc: McmcConfig,
    ) -> Result<Self> {
        if bundle.kind() != expected {
            return Err(Error::invalid(format!("expected a {expected} estimator, got {}", bundle.kind())));
        }
        if bundle.theta_dim() != prior.dim() {
            return Err(Error::Dimension {
                what: "prior",
                expected: bundle.theta_dim(),
                got: prior.dim(),
            });
        }
        Ok(Self {
            kind,
            bundle,
            prior: prior.clone(),
            mcmc,
        })
    }

    pub fn bundle(&self) -> &EstimatorBundle {
        &self.bundle
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn mcmc_config(&self) -> &McmcConfig {
        &self.mcmc
    }

    /// Prior plus network term; the network only sees points inside the
    /// prior support.
    fn mcmc_target(&self, theta: &RealArray, y: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.prior.log_density_rows(theta);
        let inside: Vec<usize> = (0..out.len()).filter(|&i| out[i].is_finite()).collect();
        if inside.is_empty() {
            return Ok(out);
        }
        let sub = theta.select_rows(&inside);
        let net = match self.kind {
            PosteriorKind::NleMcmc => self.bundle.likelihood_log_prob(&sub, y)?,
            _ => self.bundle.log_ratio(&sub, y)?,
        };
        for (&i, v) in inside.iter().zip(net) {
            out[i] += v;
        }
        Ok(out)
    }
}

impl PosteriorApproximation for NeuralPosterior {
    fn kind(&self) -> PosteriorKind {
        self.kind
    }

    fn theta_dim(&self) -> usize {
        self.bundle.theta_dim()
    }

    fn is_normalized(&self) -> bool {
        self.kind == PosteriorKind::Npe
    }

    fn unnorm_logpdf(&self, theta: &RealArray, y: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            PosteriorKind::Npe => self.bundle.posterior_log_prob(theta, y),
            _ => self.mcmc_target(theta, y),
        }
    }

    fn sample(&self, y: &[f64], n: usize, seed: u64) -> Result<PosteriorSamples> {
        if self.kind == PosteriorKind::Npe {
            return Ok(PosteriorSamples::exact(self.bundle.sample_posterior(y, n, &mut rng(seed))?));
        }
        if n == 0 {
            return Ok(PosteriorSamples::exact(RealArray::zeros(0, self.theta_dim())));
        }
        let per_chain = n.div_ceil(self.mcmc.chains.max(1)) * self.mcmc.thin.max(1);
        let cfg = McmcConfig {
            warmup: Some(self.mcmc.warmup.unwrap_or(per_chain).max(MIN_WARMUP)),
            ..self.mcmc.clone()
        };
        let (lower, upper) = self.prior.bounds();
        let kernel = Kernel::for_bounds(&lower, &upper);
        let target = |t: &RealArray| self.mcmc_target(t, y);
        let prior = &self.prior;
        let out = mcmc_sample(&target, &|r: &mut _| prior.sample(r), self.theta_dim(), n, &kernel, &cfg, seed)?;
        Ok(PosteriorSamples {
            samples: out.samples,
            diagnostics: Some(out.diagnostics),
        })
    }
}
