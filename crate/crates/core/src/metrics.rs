//! Expected coverage of highest-posterior-density regions, measured against
//! reference posteriors of the true model given each (possibly transformed)
//! observation.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::RealArray;
use crate::error::{Error, Result};
use crate::inference::PosteriorApproximation;
use crate::seeding::{derive_seed, derived_rng};
use crate::tasks::{CachedReference, Observation, OracleSettings, ReferenceCache, Task};

/// `0.05, 0.10, …, 0.95`.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageConfig {
    pub alphas: Vec<f64>,
    /// Reference draws per observation.
    pub m: usize,
    /// Approximate-posterior draws per observation.
    pub k: usize,
    pub bootstrap: usize,
    /// Central mass of the bootstrap band.
    pub band: f64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            alphas: default_alpha_grid(),
            m: 100,
            k: 1000,
            bootstrap: 1000,
            band: 0.9,
        }
    }
}

impl CoverageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::invalid("empty α grid"));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::invalid("α levels must lie strictly inside (0, 1)"));
        }
        if self.alphas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("α grid must be strictly increasing"));
        }
        if self.m == 0 || self.k < 100 {
            return Err(Error::invalid("need M ≥ 1 reference draws and K ≥ 100 density samples"));
        }
        if !(self.band > 0.0 && self.band < 1.0) {
            return Err(Error::invalid("band mass must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Where `θ*` sits in the ranking of `q(·|y)` by density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HpdDecision {
    /// Fraction of draws from `q` with strictly higher density than `θ*`.
    pub credibility: f64,
    pub k: usize,
}

impl HpdDecision {
    /// `θ*` lies in the `1 − α` HPD region. Ties count as inside.
    pub fn member(&self, alpha: f64) -> bool {
        within(self.credibility, alpha)
    }
}

fn within(credibility: f64, alpha: f64) -> bool {
    credibility <= 1.0 - alpha + 1e-12
}

fn finite_or_neg_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Credibility level of each row of `points` under `q(·|y)`, from one shared
/// set of `k` draws. The second value is set when an MCMC sampler flagged
/// its draws.
pub fn credibilities(
    q: &dyn PosteriorApproximation,
    y: &[f64],
    points: &RealArray,
    k: usize,
    seed: u64,
) -> Result<(Vec<f64>, bool)> {
    let draws = q.sample(y, k, seed)?;
    let flagged = draws.flagged();
    let mut at_draws: Vec<f64> = q
        .unnorm_logpdf(&draws.samples, y)?
        .into_iter()
        .map(finite_or_neg_inf)
        .collect();
    at_draws.sort_by(f64::total_cmp);
    let at_points = q.unnorm_logpdf(points, y)?;
    let kf = at_draws.len() as f64;
    let cred = at_points
        .into_iter()
        .map(|v| {
            let v = finite_or_neg_inf(v);
            // Draws with strictly higher density.
            let not_above = at_draws.partition_point(|&d| d <= v);
            (at_draws.len() - not_above) as f64 / kf
        })
        .collect();
    Ok((cred, flagged))
}

pub fn hpd_membership(
    q: &dyn PosteriorApproximation,
    y: &[f64],
    theta_star: &[f64],
    k: usize,
    seed: u64,
) -> Result<HpdDecision> {
    if k < 100 {
        return Err(Error::invalid("HPD membership needs K ≥ 100"));
    }
    let (c, _) = credibilities(q, y, &RealArray::row_vector(theta_star.to_vec()), k, seed)?;
    Ok(HpdDecision { credibility: c[0], k })
}

/// Draws from the true-model posterior given an observation.
pub trait ReferenceSource: Sync {
    /// `m` draws, or `None` when the oracle failed its diagnostics for this
    /// observation.
    fn draws(&self, obs: &Observation, m: usize) -> Result<Option<RealArray>>;
}

/// A task's own oracle, optionally backed by an on-disk cache.
#[derive(Clone, Debug)]
pub struct TaskReference {
    pub task: Task,
    pub seed: u64,
    pub settings: OracleSettings,
    pub cache: Option<ReferenceCache>,
}

impl TaskReference {
    pub fn new(task: Task, seed: u64) -> Self {
        Self {
            task,
            seed,
            settings: OracleSettings::default(),
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: ReferenceCache) -> Self {
        self.cache = Some(cache);
        self
    }
}

impl ReferenceSource for TaskReference {
    fn draws(&self, obs: &Observation, m: usize) -> Result<Option<RealArray>> {
        let name = self.task.name();
        let seed = derive_seed(
            self.seed,
            &["reference".into(), name.as_str().into(), obs.index.into(), u64::from(obs.sigma).into()],
        );
        let data = obs.reference_data();
        let compute = || self.task.reference_sample(data, m, seed, &self.settings);
        let Some(cache) = &self.cache else {
            return match compute() {
                Ok(d) => Ok(Some(d.samples)),
                Err(Error::Diagnostics(_)) => Ok(None),
                Err(e) => Err(e),
            };
        };
        let key = ReferenceCache::key(name, obs.index, obs.sigma, data, m, seed, &self.settings);
        Ok(match cache.get_or_compute(&key, compute)? {
            CachedReference::Draws(d) => Some(d),
            CachedReference::Failed(_) => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub alphas: Vec<f64>,
    pub nominal: Vec<f64>,
    pub empirical: Vec<f64>,
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
    /// Observations that contributed.
    pub n_obs: usize,
    pub n_ref_per_obs: usize,
    pub k: usize,
    /// Observations dropped because the reference oracle failed.
    pub excluded_reference: usize,
    /// Observations dropped because `q` could not be sampled or evaluated
    /// there.
    pub excluded_approximation: usize,
    /// Observations whose MCMC draws failed convergence checks (kept).
    pub flagged: usize,
}

enum ObsOutcome {
    Ranks { cred: Vec<f64>, flagged: bool },
    NoReference,
    ApproximationFailed,
}

/// Coverage at every α from one credibility rank per (observation,
/// reference draw), with a cluster bootstrap band over observations.
pub fn coverage_curve(
    q: &dyn PosteriorApproximation,
    observations: &[&Observation],
    reference: &dyn ReferenceSource,
    cfg: &CoverageConfig,
    seed: u64,
) -> Result<CoverageCurve> {
    cfg.validate()?;
    if observations.is_empty() {
        return Err(Error::invalid("no observations"));
    }
    // Reduce in (index, σ) order so the result does not depend on the order
    // observations are passed in.
    let mut ordered: Vec<&Observation> = observations.to_vec();
    ordered.sort_by_key(|o| (o.index, o.sigma));
    let outcomes: Vec<Result<ObsOutcome>> = ordered
        .par_iter()
        .map(|obs| {
            let Some(refs) = reference.draws(obs, cfg.m)? else {
                return Ok(ObsOutcome::NoReference);
            };
            let qseed = derive_seed(seed, &["q".into(), obs.index.into(), u64::from(obs.sigma).into()]);
            Ok(match credibilities(q, &obs.y, &refs, cfg.k, qseed) {
                Ok((cred, flagged)) => ObsOutcome::Ranks { cred, flagged },
                Err(Error::Diagnostics(_) | Error::NonFinite(_) | Error::McmcInit(_) | Error::Degenerate(_)) => {
                    ObsOutcome::ApproximationFailed
                }
                Err(e) => return Err(e),
            })
        })
        .collect();

    let na = cfg.alphas.len();
    let mut per_obs: Vec<Vec<f64>> = Vec::new();
    let (mut no_ref, mut failed, mut flagged) = (0, 0, 0);
    for o in outcomes {
        match o? {
            ObsOutcome::Ranks { cred, flagged: f } => {
                flagged += usize::from(f);
                let m = cred.len() as f64;
                per_obs.push(
                    cfg.alphas
                        .iter()
                        .map(|&a| cred.iter().filter(|&&c| within(c, a)).count() as f64 / m)
                        .collect(),
                );
            }
            ObsOutcome::NoReference => no_ref += 1,
            ObsOutcome::ApproximationFailed => failed += 1,
        }
    }
    if per_obs.is_empty() {
        return Err(Error::Degenerate("every observation was excluded".into()));
    }
    let n = per_obs.len();
    let empirical: Vec<f64> = (0..na)
        .map(|a| per_obs.iter().map(|p| p[a]).sum::<f64>() / n as f64)
        .collect();

    let mut boot: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.bootstrap); na];
    let mut r = derived_rng(seed, &["bootstrap".into()]);
    for _ in 0..cfg.bootstrap {
        let mut acc = vec![0.0; na];
        for _ in 0..n {
            let p = &per_obs[r.random_range(0..n)];
            for (s, v) in acc.iter_mut().zip(p) {
                *s += v;
            }
        }
        for (b, s) in boot.iter_mut().zip(acc) {
            b.push(s / n as f64);
        }
    }
    let tail = 0.5 * (1.0 - cfg.band);
    let (band_lo, band_hi) = boot
        .iter_mut()
        .zip(&empirical)
        .map(|(b, &e)| {
            if b.is_empty() {
                return (e, e);
            }
            b.sort_by(f64::total_cmp);
            (quantile(b, tail), quantile(b, 1.0 - tail))
        })
        .unzip();

    Ok(CoverageCurve {
        alphas: cfg.alphas.clone(),
        nominal: cfg.alphas.iter().map(|a| 1.0 - a).collect(),
        empirical,
        band_lo,
        band_hi,
        n_obs: n,
        n_ref_per_obs: cfg.m,
        k: cfg.k,
        excluded_reference: no_ref,
        excluded_approximation: failed,
        flagged,
    })
}

/// Coverage at a single level.
pub fn expected_coverage(
    q: &dyn PosteriorApproximation,
    observations: &[&Observation],
    reference: &dyn ReferenceSource,
    alpha: f64,
    m: usize,
    k: usize,
    seed: u64,
) -> Result<f64> {
    let cfg = CoverageConfig {
        alphas: vec![alpha],
        m,
        k,
        bootstrap: 0,
        band: 0.9,
    };
    Ok(coverage_curve(q, observations, reference, &cfg, seed)?.empirical[0])
}

/// Linear interpolation between order statistics of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Scalar summaries of a curve's distance from the diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalDeviation {
    /// Largest `nominal − empirical`, or 0.
    pub max_below: f64,
    /// Largest `empirical − nominal`, or 0.
    pub max_above: f64,
    /// Trapezoid integral of `empirical − nominal` over nominal coverage.
    /// Positive means conservative.
    pub signed_area: f64,
}

pub fn diagonal_deviation(curve: &CoverageCurve) -> Result<DiagonalDeviation> {
    if curve.nominal.is_empty() || curve.nominal.len() != curve.empirical.len() {
        return Err(Error::invalid("empty or ragged coverage curve"));
    }
    let mut pts: Vec<(f64, f64)> = curve
        .nominal
        .iter()
        .zip(&curve.empirical)
        .map(|(&n, &e)| (n, e - n))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let max_below = pts.iter().map(|p| -p.1).fold(0.0, f64::max);
    let max_above = pts.iter().map(|p| p.1).fold(0.0, f64::max);
    let signed_area = pts.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
    Ok(DiagonalDeviation {
        max_below,
        max_above,
        signed_area,
    })
}

/// Looks up the empirical coverage at level `alpha`.
pub fn coverage_at(curve: &CoverageCurve, alpha: f64) -> Option<f64> {
    curve
        .alphas
        .iter()
        .position(|a| (a - alpha).abs() < 1e-9)
        .map(|i| curve.empirical[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve_from(empirical: Vec<f64>) -> CoverageCurve {
        let alphas = default_alpha_grid();
        CoverageCurve {
            nominal: alphas.iter().map(|a| 1.0 - a).collect(),
            alphas,
            band_lo: empirical.clone(),
            band_hi: empirical.clone(),
            empirical,
            n_obs: 1,
            n_ref_per_obs: 1,
            k: 100,
            excluded_reference: 0,
            excluded_approximation: 0,
            flagged: 0,
        }
    }

    #[test]
    fn deviation_of_reference_curves() {
        let alphas = default_alpha_grid();
        let diag = diagonal_deviation(&curve_from(alphas.iter().map(|a| 1.0 - a).collect())).unwrap();
        assert_eq!((diag.max_below, diag.max_above), (0.0, 0.0));
        assert!(diag.signed_area.abs() < 1e-15);

        let ones = diagonal_deviation(&curve_from(vec![1.0; 19])).unwrap();
        assert!((ones.max_above - 0.95).abs() < 1e-12);
        assert_eq!(ones.max_below, 0.0);
        assert!(ones.signed_area > 0.0);

        let zeros = diagonal_deviation(&curve_from(vec![0.0; 19])).unwrap();
        assert!((zeros.max_below - 0.95).abs() < 1e-12);
        assert!(zeros.signed_area < 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(CoverageConfig::default().validate().is_ok());
        let bad = |f: fn(&mut CoverageConfig)| {
            let mut c = CoverageConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.alphas = vec![0.5, 0.4]));
        assert!(bad(|c| c.alphas = vec![0.0, 0.5]));
        assert!(bad(|c| c.alphas.clear()));
        assert!(bad(|c| c.k = 99));
        assert!(bad(|c| c.m = 0));
    }

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 5.0];
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0), 5.0);
        assert!((quantile(&s, 0.5) - 2.5).abs() < 1e-15);
    }
}
