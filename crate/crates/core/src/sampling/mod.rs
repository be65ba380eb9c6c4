//! Multi-chain MCMC shared by the reference oracles and by the likelihood and
//! ratio based posteriors.
//!
//! Two kernels are provided: adaptive random-walk Metropolis, with chains
//! advanced in lockstep so the target is evaluated on one batch per step, and
//! axis-aligned slice sampling (stepping out and shrinkage) for box-bounded
//! targets. Proposal scales and slice widths adapt during warm-up only.

mod diagnostics;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use diagnostics::{effective_sample_size, split_rhat, McmcDiagnostics};

use crate::diffcore::RealArray;
use crate::error::{Error, Result};
use crate::seeding::{derived_rng, Rng};

/// Sampler settings. `warmup: None` discards as many iterations as are kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub chains: usize,
    pub warmup: Option<usize>,
    pub thin: usize,
    pub rhat_limit: f64,
    pub max_init_draws: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: None,
            thin: 1,
            rhat_limit: 1.05,
            max_init_draws: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    RandomWalk,
    /// Slice sampling inside `[lower, upper]` per coordinate.
    Slice { lower: Vec<f64>, upper: Vec<f64> },
}

impl Kernel {
    /// Slice sampling when every coordinate is bounded, random walk otherwise.
    pub fn for_bounds(lower: &[f64], upper: &[f64]) -> Self {
        if lower.iter().chain(upper).all(|b| b.is_finite()) {
            Kernel::Slice {
                lower: lower.to_vec(),
                upper: upper.to_vec(),
            }
        } else {
            Kernel::RandomWalk
        }
    }
}

#[derive(Clone, Debug)]
pub struct McmcOutput {
    /// `[n, dim]`, chains interleaved row by row.
    pub samples: RealArray,
    /// Kept draws of each chain, `[per_chain, dim]`.
    pub chains: Vec<RealArray>,
    pub diagnostics: McmcDiagnostics,
}

/// Batched log target: one value per row of the input.
pub trait LogTarget: Sync {
    fn log_density(&self, points: &RealArray) -> Result<Vec<f64>>;
}

impl<F> LogTarget for F
where
    F: Fn(&RealArray) -> Result<Vec<f64>> + Sync,
{
    fn log_density(&self, points: &RealArray) -> Result<Vec<f64>> {
        self(points)
    }
}

fn eval(target: &dyn LogTarget, points: &RealArray) -> Result<Vec<f64>> {
    let lp = target.log_density(points)?;
    if lp.len() != points.rows() {
        return Err(Error::Dimension {
            what: "log target output",
            expected: points.rows(),
            got: lp.len(),
        });
    }
    Ok(lp
        .into_iter()
        .map(|v| if v.is_nan() { f64::NEG_INFINITY } else { v })
        .collect())
}

fn eval_one(target: &dyn LogTarget, x: &[f64]) -> Result<f64> {
    Ok(eval(target, &RealArray::row_vector(x.to_vec()))?[0])
}

/// Draws `n` samples from `target` with `cfg.chains` chains started from
/// `init` (normally the prior).
pub fn mcmc_sample<I>(
    target: &dyn LogTarget,
    init: &I,
    dim: usize,
    n: usize,
    kernel: &Kernel,
    cfg: &McmcConfig,
    seed: u64,
) -> Result<McmcOutput>
where
    I: Fn(&mut Rng) -> Vec<f64> + Sync,
{
    if cfg.chains == 0 || cfg.thin == 0 || dim == 0 {
        return Err(Error::invalid("chains, thin and dim must be positive"));
    }
    if let Kernel::Slice { lower, upper } = kernel {
        if lower.len() != dim || upper.len() != dim || lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
            return Err(Error::invalid("slice bounds must match dim with lower < upper"));
        }
    }
    if n == 0 {
        return Ok(McmcOutput {
            samples: RealArray::zeros(0, dim),
            chains: vec![RealArray::zeros(0, dim); cfg.chains],
            diagnostics: McmcDiagnostics {
                rhat: Vec::new(),
                ess: Vec::new(),
                acceptance: Vec::new(),
                rhat_limit: cfg.rhat_limit,
            },
        });
    }
    let per_chain = n.div_ceil(cfg.chains);
    let iters = per_chain * cfg.thin;
    let warmup = cfg.warmup.unwrap_or(iters);
    let (starts, lps) = initial_states(target, init, dim, cfg, seed)?;

    let (chains, acceptance) = match kernel {
        Kernel::RandomWalk => {
            let scale = initial_scales(init, dim, seed);
            random_walk(target, starts, lps, scale, warmup, iters, cfg.thin, seed)?
        }
        Kernel::Slice { lower, upper } => {
            let runs: Vec<Result<Vec<Vec<f64>>>> = starts
                .into_par_iter()
                .zip(lps)
                .enumerate()
                .map(|(c, (x, lp))| {
                    let mut rng = derived_rng(seed, &["mcmc-chain".into(), c.into()]);
                    slice_chain(target, x, lp, lower, upper, warmup, iters, cfg.thin, &mut rng)
                })
                .collect();
            let chains = runs.into_iter().collect::<Result<Vec<_>>>()?;
            let acc = vec![1.0; chains.len()];
            (chains, acc)
        }
    };

    let chains: Vec<RealArray> = chains
        .iter()
        .map(|rows| RealArray::from_rows(rows, dim))
        .collect();
    let mut diagnostics = diagnose(&chains, cfg.rhat_limit);
    diagnostics.acceptance = acceptance;
    let samples = interleave(&chains, n);
    Ok(McmcOutput {
        samples,
        chains,
        diagnostics,
    })
}

/// Row `k` of the result is draw `k / C` of chain `k % C`.
pub fn interleave(chains: &[RealArray], n: usize) -> RealArray {
    let c = chains.len();
    let dim = chains.first().map_or(0, RealArray::cols);
    let mut data = Vec::with_capacity(n * dim);
    for k in 0..n {
        data.extend_from_slice(chains[k % c].row(k / c));
    }
    RealArray::matrix(n, dim, data)
}

/// Split R-hat and ESS per coordinate over equal-length chains.
pub fn diagnose(chains: &[RealArray], rhat_limit: f64) -> McmcDiagnostics {
    let dim = chains.first().map_or(0, RealArray::cols);
    let mut rhat = Vec::with_capacity(dim);
    let mut ess = Vec::with_capacity(dim);
    for j in 0..dim {
        let coord: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| (0..c.rows()).map(|r| c.get(r, j)).collect())
            .collect();
        rhat.push(split_rhat(&coord));
        ess.push(effective_sample_size(&coord));
    }
    McmcDiagnostics {
        rhat,
        ess,
        acceptance: Vec::new(),
        rhat_limit,
    }
}

const INIT_BATCH: usize = 50;

fn initial_states<I>(
    target: &dyn LogTarget,
    init: &I,
    dim: usize,
    cfg: &McmcConfig,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)>
where
    I: Fn(&mut Rng) -> Vec<f64> + Sync,
{
    let mut found: Vec<Option<(Vec<f64>, f64)>> = Vec::with_capacity(cfg.chains);
    for c in 0..cfg.chains {
        let mut rng = derived_rng(seed, &["mcmc-init".into(), c.into()]);
        let mut drawn = 0;
        let mut hit = None;
        while hit.is_none() && drawn < cfg.max_init_draws {
            let b = INIT_BATCH.min(cfg.max_init_draws - drawn);
            let mut rows = Vec::with_capacity(b);
            for _ in 0..b {
                let x = init(&mut rng);
                if x.len() != dim {
                    return Err(Error::Dimension {
                        what: "initial draw",
                        expected: dim,
                        got: x.len(),
                    });
                }
                rows.push(x);
            }
            drawn += b;
            let lp = eval(target, &RealArray::from_rows(&rows, dim))?;
            hit = lp
                .iter()
                .position(|v| v.is_finite())
                .map(|i| (rows.swap_remove(i), lp[i]));
        }
        found.push(hit);
    }
    let Some(fallback) = found.iter().flatten().next().cloned() else {
        return Err(Error::McmcInit(cfg.max_init_draws));
    };
    Ok(found
        .into_iter()
        .map(|h| h.unwrap_or_else(|| fallback.clone()))
        .unzip())
}

/// Per-coordinate starting proposal scale: a tenth of the spread of the
/// initial distribution.
fn initial_scales<I>(init: &I, dim: usize, seed: u64) -> Vec<f64>
where
    I: Fn(&mut Rng) -> Vec<f64>,
{
    let mut rng = derived_rng(seed, &["mcmc-scale".into()]);
    let mut w = vec![Welford::default(); dim];
    for _ in 0..200 {
        let x = init(&mut rng);
        for (acc, v) in w.iter_mut().zip(&x) {
            acc.push(*v);
        }
    }
    w.iter()
        .map(|a| {
            let s = 0.1 * a.variance().sqrt();
            if s.is_finite() && s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n < 2.0 {
            f64::NAN
        } else {
            self.m2 / (self.n - 1.0)
        }
    }
}

/// Iterations at which warm-up statistics are folded into the proposal.
fn window_ends(warmup: usize) -> Vec<usize> {
    if warmup < 8 {
        return Vec::new();
    }
    vec![warmup / 4, warmup / 2, 3 * warmup / 4]
}

type ChainDraws = Vec<Vec<Vec<f64>>>;

#[allow(clippy::too_many_arguments)]
fn random_walk(
    target: &dyn LogTarget,
    mut xs: Vec<Vec<f64>>,
    mut lps: Vec<f64>,
    mut scale: Vec<f64>,
    warmup: usize,
    iters: usize,
    thin: usize,
    seed: u64,
) -> Result<(ChainDraws, Vec<f64>)> {
    let c = xs.len();
    let dim = scale.len();
    let mut rngs: Vec<Rng> = (0..c)
        .map(|k| derived_rng(seed, &["mcmc-chain".into(), k.into()]))
        .collect();
    let base = (2.38 / (dim as f64).sqrt()).ln();
    let target_acc = if dim == 1 { 0.44 } else { 0.234 };
    let mut log_lambda = base;
    let mut step_in_window = 0usize;
    let ends = window_ends(warmup);
    let mut stats: Vec<Vec<Welford>> = vec![vec![Welford::default(); dim]; c];
    let mut kept: ChainDraws = vec![Vec::with_capacity(iters / thin); c];
    let mut accepted = vec![0usize; c];

    for t in 0..warmup + iters {
        let lambda = log_lambda.exp();
        let mut prop = Vec::with_capacity(c * dim);
        for k in 0..c {
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rngs[k]);
                prop.push(xs[k][j] + lambda * scale[j] * z);
            }
        }
        let prop = RealArray::matrix(c, dim, prop);
        let lp_new = eval(target, &prop)?;
        let mut n_acc = 0usize;
        for k in 0..c {
            let u: f64 = rngs[k].random();
            if lp_new[k].is_finite() && u.ln() < lp_new[k] - lps[k] {
                xs[k].copy_from_slice(prop.row(k));
                lps[k] = lp_new[k];
                n_acc += 1;
                if t >= warmup {
                    accepted[k] += 1;
                }
            }
        }
        if t < warmup {
            let rate = n_acc as f64 / c as f64;
            let gain = 0.5 / ((step_in_window + 1) as f64).powf(0.6);
            log_lambda += gain * (rate - target_acc);
            step_in_window += 1;
            for k in 0..c {
                for j in 0..dim {
                    stats[k][j].push(xs[k][j]);
                }
            }
            if ends.contains(&(t + 1)) {
                let mut updated = false;
                for j in 0..dim {
                    let v = stats.iter().map(|s| s[j].variance()).sum::<f64>() / c as f64;
                    if v.is_finite() && v > 0.0 {
                        scale[j] = v.sqrt();
                        updated = true;
                    }
                }
                if updated {
                    log_lambda = base;
                }
                step_in_window = 0;
                stats = vec![vec![Welford::default(); dim]; c];
            }
        } else if (t - warmup + 1) % thin == 0 {
            for k in 0..c {
                kept[k].push(xs[k].clone());
            }
        }
    }
    let acceptance = accepted
        .iter()
        .map(|&a| if iters == 0 { 0.0 } else { a as f64 / iters as f64 })
        .collect();
    Ok((kept, acceptance))
}

const MAX_STEP_OUT: usize = 32;
const MAX_SHRINK: usize = 200;

#[allow(clippy::too_many_arguments)]
fn slice_chain(
    target: &dyn LogTarget,
    mut x: Vec<f64>,
    mut lp: f64,
    lower: &[f64],
    upper: &[f64],
    warmup: usize,
    iters: usize,
    thin: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    let dim = x.len();
    let mut width: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| (u - l) / 4.0).collect();
    let ends = window_ends(warmup);
    let mut stats = vec![Welford::default(); dim];
    let mut kept = Vec::with_capacity(iters / thin);
    let mut probe = x.clone();

    for t in 0..warmup + iters {
        for j in 0..dim {
            let u: f64 = rng.random();
            let log_y = lp + (1.0 - u).ln();
            let w = width[j];
            let offset: f64 = rng.random::<f64>() * w;
            let mut left = (x[j] - offset).max(lower[j]);
            let mut right = (x[j] - offset + w).min(upper[j]);
            probe.copy_from_slice(&x);
            for _ in 0..MAX_STEP_OUT {
                if left <= lower[j] {
                    break;
                }
                probe[j] = left;
                if eval_one(target, &probe)? <= log_y {
                    break;
                }
                left = (left - w).max(lower[j]);
            }
            for _ in 0..MAX_STEP_OUT {
                if right >= upper[j] {
                    break;
                }
                probe[j] = right;
                if eval_one(target, &probe)? <= log_y {
                    break;
                }
                right = (right + w).min(upper[j]);
            }
            for _ in 0..MAX_SHRINK {
                let cand = left + rng.random::<f64>() * (right - left);
                probe[j] = cand;
                let lp_c = eval_one(target, &probe)?;
                if lp_c > log_y {
                    x[j] = cand;
                    lp = lp_c;
                    break;
                }
                if cand < x[j] {
                    left = cand;
                } else {
                    right = cand;
                }
            }
        }
        if t < warmup {
            for (s, v) in stats.iter_mut().zip(&x) {
                s.push(*v);
            }
            if ends.contains(&(t + 1)) {
                for j in 0..dim {
                    let sd = stats[j].variance().sqrt();
                    if sd.is_finite() && sd > 0.0 {
                        width[j] = (2.0 * sd).min(upper[j] - lower[j]);
                    }
                }
                stats = vec![Welford::default(); dim];
            }
        } else if (t - warmup + 1) % thin == 0 {
            kept.push(x.clone());
        }
    }
    Ok(kept)
}
