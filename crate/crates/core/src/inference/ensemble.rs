use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng as _;

use super::{log_mean_exp, PosteriorApproximation, PosteriorKind, PosteriorSamples};
use crate::diffcore::RealArray;
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, derived_rng};
use crate::tasks::Prior;

/// Prior draws used to estimate each component's normalizing constant.
pub const DEFAULT_NORMALIZATION_DRAWS: usize = 5000;

/// Equal-weight mixture of posterior approximations.
///
/// Components that are only known up to a constant (likelihood or ratio
/// estimators) are normalized per observation by self-normalized importance
/// sampling with the prior as proposal, so the mixture averages posteriors
/// rather than raw scores. [`EnsemblePosterior::unnormalized`] turns this off.
pub struct EnsemblePosterior {
    components: Vec<Arc<dyn PosteriorApproximation>>,
    component_kind: PosteriorKind,
    prior: Prior,
    normalize: bool,
    normalization_draws: usize,
    seed: u64,
    log_z: Mutex<HashMap<Vec<u64>, Vec<f64>>>,
}

/// Builds the mixture; components must be non-empty and of one kind.
pub fn ensemble(components: Vec<Arc<dyn PosteriorApproximation>>, prior: &Prior, seed: u64) -> Result<EnsemblePosterior> {
    let first = components
        .first()
        .ok_or_else(|| Error::invalid("an ensemble needs at least one component"))?;
    let kind = first.kind();
    let dim = first.theta_dim();
    if components.iter().any(|c| c.kind() != kind) {
        return Err(Error::invalid("ensemble components must share one kind"));
    }
    if components.iter().any(|c| c.theta_dim() != dim) || prior.dim() != dim {
        return Err(Error::invalid("ensemble components and prior must share θ dimension"));
    }
    let normalize = components.iter().any(|c| !c.is_normalized());
    Ok(EnsemblePosterior {
        components,
        component_kind: kind,
        prior: prior.clone(),
        normalize,
        normalization_draws: DEFAULT_NORMALIZATION_DRAWS,
        seed,
        log_z: Mutex::new(HashMap::new()),
    })
}

impl EnsemblePosterior {
    /// Mixes raw unnormalized scores instead of normalized densities.
    pub fn unnormalized(mut self) -> Self {
        self.normalize = false;
        self
    }

    pub fn with_normalization_draws(mut self, n: usize) -> Self {
        self.normalization_draws = n.max(1);
        self.log_z.lock().unwrap_or_else(|e| e.into_inner()).clear();
        self
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn component_kind(&self) -> PosteriorKind {
        self.component_kind
    }

    pub fn normalizes(&self) -> bool {
        self.normalize
    }

    /// Per-component log normalizing constants for `y`; zeros when the
    /// components are used as they are.
    pub fn log_normalizers(&self, y: &[f64]) -> Result<Vec<f64>> {
        if !self.normalize {
            return Ok(vec![0.0; self.components.len()]);
        }
        let key: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
        if let Some(hit) = self.log_z.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(hit.clone());
        }
        let draws = self
            .prior
            .sample_n(self.normalization_draws, &mut derived_rng(self.seed, &["normalizer".into()]));
        let log_prior = self.prior.log_density_rows(&draws);
        let mut out = Vec::with_capacity(self.components.len());
        for (i, c) in self.components.iter().enumerate() {
            if c.is_normalized() {
                out.push(0.0);
                continue;
            }
            let u = c.unnorm_logpdf(&draws, y)?;
            let w: Vec<f64> = u.iter().zip(&log_prior).map(|(a, b)| a - b).collect();
            let lz = log_mean_exp(&w);
            if !lz.is_finite() {
                return Err(Error::NonFinite(format!("normalizing constant of ensemble component {i}")));
            }
            out.push(lz);
        }
        self.log_z
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key, out.clone());
        Ok(out)
    }

    /// Component index behind each of `n` draws.
    pub fn assignments(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut r = derived_rng(seed, &["ensemble-pick".into()]);
        (0..n).map(|_| r.random_range(0..self.components.len())).collect()
    }
}

impl PosteriorApproximation for EnsemblePosterior {
    fn kind(&self) -> PosteriorKind {
        PosteriorKind::Ensemble
    }

    fn theta_dim(&self) -> usize {
        self.components[0].theta_dim()
    }

    fn is_normalized(&self) -> bool {
        self.normalize || self.components.iter().all(|c| c.is_normalized())
    }

    fn unnorm_logpdf(&self, theta: &RealArray, y: &[f64]) -> Result<Vec<f64>> {
        let log_z = self.log_normalizers(y)?;
        let per: Vec<Vec<f64>> = self
            .components
            .iter()
            .zip(&log_z)
            .map(|(c, z)| Ok(c.unnorm_logpdf(theta, y)?.into_iter().map(|v| v - z).collect()))
            .collect::<Result<_>>()?;
        Ok((0..theta.rows())
            .map(|r| log_mean_exp(&per.iter().map(|p| p[r]).collect::<Vec<_>>()))
            .collect())
    }

    /// Picks a component uniformly per draw, then samples it.
    fn sample(&self, y: &[f64], n: usize, seed: u64) -> Result<PosteriorSamples> {
        let picks = self.assignments(n, seed);
        let mut out = RealArray::zeros(n, self.theta_dim());
        let mut diagnostics = None;
        for (i, c) in self.components.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&r| picks[r] == i).collect();
            if rows.is_empty() {
                continue;
            }
            let s = c.sample(y, rows.len(), derive_seed(seed, &["component".into(), i.into()]))?;
            for (k, &r) in rows.iter().enumerate() {
                out.row_mut(r).copy_from_slice(s.samples.row(k));
            }
            // Keep the worst diagnostics so a flagged component flags the mixture.
            if let Some(d) = s.diagnostics {
                let worse = diagnostics
                    .as_ref()
                    .is_none_or(|cur: &crate::sampling::McmcDiagnostics| d.max_rhat() > cur.max_rhat());
                if worse {
                    diagnostics = Some(d);
                }
            }
        }
        Ok(PosteriorSamples {
            samples: out,
            diagnostics,
        })
    }
}
