use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{log_mean_exp, PosteriorApproximation, PosteriorKind, PosteriorSamples};
use crate::diffcore::RealArray;
use crate::error::{Error, Result};
use crate::estimators::Standardizer;
use crate::optim::PairDataset;
use crate::seeding::rng;
use crate::tasks::Task;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceKind {
    /// Euclidean after dividing each coordinate by its prior-predictive
    /// standard deviation.
    StandardizedEuclidean,
}

/// Prior-predictive simulations shared by every observation it is matched
/// against.
#[derive(Clone, Debug)]
pub struct AbcTable {
    pairs: PairDataset,
    scale: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AbcResult {
    /// Accepted parameters, closest first.
    pub samples: RealArray,
    /// Their distances to the observation, ascending.
    pub distances: Vec<f64>,
    /// Largest accepted distance.
    pub threshold: f64,
    pub distance: DistanceKind,
    pub n_total: usize,
}

impl AbcTable {
    pub fn simulate(task: &Task, n_total: usize, seed: u64) -> Result<Self> {
        if n_total < 100 {
            return Err(Error::invalid("rejection ABC needs at least 100 simulations"));
        }
        Self::from_pairs(task.simulate_dataset(n_total, seed)?)
    }

    /// Uses existing simulations. Scales come from the finite rows.
    pub fn from_pairs(pairs: PairDataset) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let finite: Vec<usize> = (0..pairs.len())
            .filter(|&i| pairs.x.row(i).iter().all(|v| v.is_finite()))
            .collect();
        let scale = Standardizer::fit(&pairs.x.select_rows(&finite)).scale;
        Ok(Self { pairs, scale })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// Distance of every simulation to `y`; non-finite simulations are
    /// infinitely far.
    pub fn distances(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.scale.len() {
            return Err(Error::Dimension {
                what: "ABC observation",
                expected: self.scale.len(),
                got: y.len(),
            });
        }
        Ok((0..self.pairs.len())
            .map(|i| {
                let d2: f64 = self
                    .pairs
                    .x
                    .row(i)
                    .iter()
                    .zip(y)
                    .zip(&self.scale)
                    .map(|((x, o), s)| ((x - o) / s).powi(2))
                    .sum();
                if d2.is_finite() {
                    d2.sqrt()
                } else {
                    f64::INFINITY
                }
            })
            .collect())
    }

    /// Keeps the `⌈rate · n⌉` closest simulations; ties go to the earlier
    /// row.
    pub fn reject(&self, y: &[f64], rate: f64) -> Result<AbcResult> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::invalid(format!("acceptance rate {rate} outside (0, 1]")));
        }
        let n = self.pairs.len();
        // Guard against products like 0.07 · 100 = 7.000000000000001.
        let keep = ((rate * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
        let dist = self.distances(y)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
        order.truncate(keep);
        let distances: Vec<f64> = order.iter().map(|&i| dist[i]).collect();
        Ok(AbcResult {
            samples: self.pairs.theta.select_rows(&order),
            threshold: *distances.last().unwrap_or(&0.0),
            distances,
            distance: DistanceKind::StandardizedEuclidean,
            n_total: n,
        })
    }
}

/// Simulates a fresh table and rejects against `y`.
pub fn abc_rejection(task: &Task, y: &[f64], n_total: usize, acceptance_rate: f64, seed: u64) -> Result<AbcResult> {
    AbcTable::simulate(task, n_total, seed)?.reject(y, acceptance_rate)
}

/// Accepted samples with a Gaussian kernel density surrogate.
#[derive(Clone, Debug)]
pub struct AbcPosterior {
    samples: RealArray,
    bandwidth: Vec<f64>,
}

pub fn abc_posterior(result: &AbcResult) -> Result<AbcPosterior> {
    AbcPosterior::new(result.samples.clone())
}

impl AbcPosterior {
    /// Silverman's rule per dimension: `h = sd · (4 / ((d + 2) n))^{1/(d+4)}`.
    pub fn new(samples: RealArray) -> Result<Self> {
        let (n, d) = (samples.rows(), samples.cols());
        if n < 2 {
            return Err(Error::Degenerate(format!("{n} accepted samples")));
        }
        let factor = (4.0 / ((d + 2) as f64 * n as f64)).powf(1.0 / (d + 4) as f64);
        let mut bandwidth = Vec::with_capacity(d);
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|r| samples.get(r, j)).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            if !(sd.is_finite() && sd > 0.0) {
                return Err(Error::Degenerate(format!("zero spread in coordinate {j}")));
            }
            bandwidth.push(sd * factor);
        }
        Ok(Self { samples, bandwidth })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn samples(&self) -> &RealArray {
        &self.samples
    }

    fn log_kde(&self, point: &[f64]) -> f64 {
        let norm: f64 = self.bandwidth.iter().map(|h| h.ln()).sum::<f64>() + 0.5 * point.len() as f64 * LN_2PI;
        let terms: Vec<f64> = (0..self.samples.rows())
            .map(|r| {
                -0.5 * self
                    .samples
                    .row(r)
                    .iter()
                    .zip(point)
                    .zip(&self.bandwidth)
                    .map(|((a, x), h)| ((x - a) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        log_mean_exp(&terms) - norm
    }
}

impl PosteriorApproximation for AbcPosterior {
    fn kind(&self) -> PosteriorKind {
        PosteriorKind::AbcKde
    }

    fn theta_dim(&self) -> usize {
        self.samples.cols()
    }

    fn is_normalized(&self) -> bool {
        true
    }

    /// Ignores `y`: the accepted set already conditions on it.
    fn unnorm_logpdf(&self, theta: &RealArray, _y: &[f64]) -> Result<Vec<f64>> {
        if theta.cols() != self.theta_dim() {
            return Err(Error::Dimension {
                what: "ABC density point",
                expected: self.theta_dim(),
                got: theta.cols(),
            });
        }
        Ok((0..theta.rows()).map(|r| self.log_kde(theta.row(r))).collect())
    }

    /// Resamples the accepted set with replacement.
    fn sample(&self, _y: &[f64], n: usize, seed: u64) -> Result<PosteriorSamples> {
        let mut r = rng(seed);
        let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..self.samples.rows())).collect();
        Ok(PosteriorSamples::exact(self.samples.select_rows(&idx)))
    }
}

/// Rejection ABC against a fixed simulation table: the accepted set and its
/// kernel density are built on first use for each observation.
pub struct AbcTablePosterior {
    table: Arc<AbcTable>,
    rate: f64,
    fitted: Mutex<HashMap<Vec<u64>, Arc<AbcPosterior>>>,
}

impl AbcTablePosterior {
    pub fn new(table: Arc<AbcTable>, acceptance_rate: f64) -> Result<Self> {
        if !(acceptance_rate > 0.0 && acceptance_rate <= 1.0) {
            return Err(Error::invalid(format!("acceptance rate {acceptance_rate} outside (0, 1]")));
        }
        Ok(Self {
            table,
            rate: acceptance_rate,
            fitted: Mutex::new(HashMap::new()),
        })
    }

    pub fn table(&self) -> &AbcTable {
        &self.table
    }

    /// The density surrogate for `y`.
    pub fn posterior_for(&self, y: &[f64]) -> Result<Arc<AbcPosterior>> {
        let key: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
        if let Some(hit) = self.fitted.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(hit.clone());
        }
        let post = Arc::new(abc_posterior(&self.table.reject(y, self.rate)?)?);
        self.fitted
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key, post.clone());
        Ok(post)
    }
}

impl PosteriorApproximation for AbcTablePosterior {
    fn kind(&self) -> PosteriorKind {
        PosteriorKind::AbcKde
    }

    fn theta_dim(&self) -> usize {
        self.table.pairs.theta.cols()
    }

    fn is_normalized(&self) -> bool {
        true
    }

    fn unnorm_logpdf(&self, theta: &RealArray, y: &[f64]) -> Result<Vec<f64>> {
        self.posterior_for(y)?.unnorm_logpdf(theta, y)
    }

    fn sample(&self, y: &[f64], n: usize, seed: u64) -> Result<PosteriorSamples> {
        self.posterior_for(y)?.sample(y, n, seed)
    }
}
