use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::models::{slcp, sv, tg};
use super::{Task, TaskName};
use crate::diffcore::RealArray;
use crate::error::{Error, Result};
use crate::sampling::{diagnose, interleave, mcmc_sample, Kernel, McmcConfig, McmcDiagnostics};
use crate::seeding::{derive_seed, derived_rng, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    ConjugateClosedForm,
    Mcmc,
}

/// Knobs of the MCMC reference oracle. `thin: None` uses a per-task default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSettings {
    pub chains: usize,
    pub thin: Option<usize>,
    /// Minimum kept draws per chain; shorter requests are run at this
    /// length and truncated.
    pub min_per_chain: usize,
    pub rhat_limit: f64,
    /// Reruns with doubled chain length and a fresh seed after a failed
    /// convergence check.
    pub retries: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            chains: 4,
            thin: None,
            min_per_chain: 500,
            rhat_limit: 1.05,
            retries: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReferenceDraws {
    pub samples: RealArray,
    /// Present for MCMC oracles.
    pub diagnostics: Option<McmcDiagnostics>,
}

impl Task {
    pub fn oracle_kind(&self) -> OracleKind {
        match self.name {
            TaskName::Tg | TaskName::TgSs => OracleKind::ConjugateClosedForm,
            _ => OracleKind::Mcmc,
        }
    }

    fn default_thin(&self) -> usize {
        match self.name {
            TaskName::Sv | TaskName::SvSs => 50,
            TaskName::Slcp => 10,
            _ => 1,
        }
    }

    /// Exact posterior log density, available for the conjugate tasks.
    /// `y_full` is the transformed, unsummarized observation.
    pub fn reference_logpdf(&self, theta: &[f64], y_full: &[f64]) -> Option<f64> {
        match self.oracle_kind() {
            OracleKind::ConjugateClosedForm => {
                let (m, v) = tg::posterior(y_full);
                let d = theta[0] - m;
                Some(-0.5 * d * d / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln())
            }
            OracleKind::Mcmc => None,
        }
    }

    /// `n` draws from `p(θ | y_full)` under the model likelihood. MCMC
    /// oracles fail with [`Error::Diagnostics`] when any split R-hat exceeds
    /// the limit.
    pub fn reference_sample(
        &self,
        y_full: &[f64],
        n: usize,
        seed: u64,
        settings: &OracleSettings,
    ) -> Result<ReferenceDraws> {
        if y_full.len() != self.raw_dim() {
            return Err(Error::Dimension {
                what: "reference observation",
                expected: self.raw_dim(),
                got: y_full.len(),
            });
        }
        if self.oracle_kind() == OracleKind::ConjugateClosedForm {
            let (m, v) = tg::posterior(y_full);
            let sd = v.sqrt();
            let mut rng = derived_rng(seed, &["reference".into()]);
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + sd * z
                })
                .collect();
            return Ok(ReferenceDraws {
                samples: RealArray::matrix(n, 1, data),
                diagnostics: None,
            });
        }
        if n == 0 {
            return Ok(ReferenceDraws {
                samples: RealArray::zeros(0, self.theta_dim()),
                diagnostics: None,
            });
        }
        let cfg = McmcConfig {
            chains: settings.chains,
            warmup: None,
            thin: settings.thin.unwrap_or_else(|| self.default_thin()),
            rhat_limit: settings.rhat_limit,
            max_init_draws: 1000,
        };
        let mut n_run = n.max(settings.chains * settings.min_per_chain);
        let mut last = None;
        for attempt in 0..=settings.retries {
            let run_seed = if attempt == 0 {
                seed
            } else {
                derive_seed(seed, &["retry".into(), attempt.into()])
            };
            let result = match self.name {
                TaskName::Sv | TaskName::SvSs => self.sv_oracle(y_full, n_run, run_seed, &cfg),
                _ => self.slcp_oracle(y_full, n_run, run_seed, &cfg),
            };
            let (samples, diagnostics) = match result {
                Ok(r) => r,
                Err(Error::Diagnostics(d)) => {
                    last = Some(d);
                    n_run *= 2;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !diagnostics.passed() {
                last = Some(Box::new(diagnostics));
                n_run *= 2;
                continue;
            }
            let keep: Vec<usize> = (0..n).collect();
            return Ok(ReferenceDraws {
                samples: samples.select_rows(&keep),
                diagnostics: Some(diagnostics),
            });
        }
        Err(Error::Diagnostics(last.expect("at least one attempt ran")))
    }

    /// Joint sampler over `(log τ, log ν, s₁..s₁₀₀)`; the latent path is
    /// discarded afterwards.
    fn sv_oracle(&self, y: &[f64], n: usize, seed: u64, cfg: &McmcConfig) -> Result<(RealArray, McmcDiagnostics)> {
        let prior = self.prior.clone();
        let dim = 2 + sv::N;
        let target = |p: &RealArray| -> Result<Vec<f64>> {
            Ok((0..p.rows())
                .map(|r| {
                    let row = p.row(r);
                    let (lt, ln) = (row[0], row[1]);
                    let (tau, nu) = (lt.exp(), ln.exp());
                    if !(tau.is_finite() && nu.is_finite() && tau > 0.0 && nu > 0.0) {
                        return f64::NEG_INFINITY;
                    }
                    prior.log_density(&[tau, nu]) + lt + ln + sv::log_joint_given_theta(tau, nu, &row[2..], y)
                })
                .collect())
        };
        // θ from the prior; the path starts near the log-magnitude of the
        // data with unit jitter.
        let init = |rng: &mut Rng| -> Vec<f64> {
            let theta = prior.sample(rng);
            let mut x = vec![theta[0].ln(), theta[1].ln()];
            x.extend(y.iter().map(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v.abs().max(1e-300).ln() + z
            }));
            x
        };
        let out = mcmc_sample(&target, &init, dim, n, &Kernel::RandomWalk, cfg, seed)?;
        let chains: Vec<RealArray> = out
            .chains
            .iter()
            .map(|c| c.select_cols(&[0, 1]).map(f64::exp))
            .collect();
        let mut diag = diagnose(&chains, cfg.rhat_limit);
        diag.acceptance = out.diagnostics.acceptance;
        Ok((interleave(&chains, n), diag))
    }

    /// Random-walk sampler on the box-bounded posterior. The posterior is
    /// exactly invariant under `θ₃ → −θ₃` and `θ₄ → −θ₄`, so each kept draw
    /// gets independent uniform sign flips on those coordinates; chains then
    /// only need to mix within one of the four mirror-image modes.
    fn slcp_oracle(&self, y: &[f64], n: usize, seed: u64, cfg: &McmcConfig) -> Result<(RealArray, McmcDiagnostics)> {
        let prior = self.prior.clone();
        let target = |p: &RealArray| -> Result<Vec<f64>> {
            Ok((0..p.rows())
                .map(|r| {
                    let th = p.row(r);
                    let lp = prior.log_density(th);
                    if lp.is_finite() {
                        lp + slcp::log_likelihood(th, y)
                    } else {
                        lp
                    }
                })
                .collect())
        };
        let init = |rng: &mut Rng| prior.sample(rng);
        let out = mcmc_sample(&target, &init, 5, n, &Kernel::RandomWalk, cfg, seed)?;
        let mut rng = derived_rng(seed, &["slcp-mirror".into()]);
        let chains: Vec<RealArray> = out
            .chains
            .into_iter()
            .map(|mut c| {
                for r in 0..c.rows() {
                    let row = c.row_mut(r);
                    for j in [2, 3] {
                        if rng.random::<bool>() {
                            row[j] = -row[j];
                        }
                    }
                }
                c
            })
            .collect();
        let mut diag = diagnose(&chains, cfg.rhat_limit);
        diag.acceptance = out.diagnostics.acceptance;
        Ok((interleave(&chains, n), diag))
    }
}

/// On-disk cache of reference draws, one file per content hash.
#[derive(Clone, Debug)]
pub struct ReferenceCache {
    dir: PathBuf,
}

const MAGIC: &[u8; 8] = b"CBREF01\0";

/// What a cache entry holds: the draws, or the diagnostics of a failed run.
#[derive(Clone, Debug)]
pub enum CachedReference {
    Draws(RealArray),
    Failed(McmcDiagnostics),
}

impl ReferenceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Content hash of everything that determines a reference sample set.
    pub fn key(
        task: TaskName,
        index: usize,
        sigma: u8,
        y_full: &[f64],
        n: usize,
        seed: u64,
        settings: &OracleSettings,
    ) -> String {
        let mut h = Sha256::new();
        h.update(b"covbench/reference/v1");
        h.update(task.as_str().as_bytes());
        h.update((index as u64).to_le_bytes());
        h.update([sigma]);
        for v in y_full {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update((n as u64).to_le_bytes());
        h.update(seed.to_le_bytes());
        h.update(serde_json::to_vec(settings).unwrap_or_default());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.bin"))
    }

    pub fn load(&self, key: &str) -> Result<Option<CachedReference>> {
        let path = self.path(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        decode(&bytes).map(Some)
    }

    /// Writes atomically via a temporary file and rename.
    pub fn store(&self, key: &str, entry: &CachedReference) -> Result<()> {
        let tmp = self.dir.join(format!("{key}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&encode(entry))?;
            f.sync_all()?;
        }
        fs::rename(tmp, self.path(key))?;
        Ok(())
    }

    /// Loads a cached entry or computes and stores it. Diagnostic failures
    /// are cached too, so a failing observation is not re-run.
    pub fn get_or_compute(
        &self,
        key: &str,
        compute: impl FnOnce() -> Result<ReferenceDraws>,
    ) -> Result<CachedReference> {
        if let Some(hit) = self.load(key)? {
            return Ok(hit);
        }
        let entry = match compute() {
            Ok(d) => CachedReference::Draws(d.samples),
            Err(Error::Diagnostics(diag)) => CachedReference::Failed(*diag),
            Err(e) => return Err(e),
        };
        self.store(key, &entry)?;
        Ok(entry)
    }
}

fn encode(entry: &CachedReference) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    match entry {
        CachedReference::Draws(a) => {
            out.push(0);
            out.extend((a.rows() as u64).to_le_bytes());
            out.extend((a.cols() as u64).to_le_bytes());
            for v in a.data() {
                out.extend(v.to_le_bytes());
            }
        }
        CachedReference::Failed(d) => {
            out.push(1);
            out.extend(serde_json::to_vec(d).unwrap_or_default());
        }
    }
    out
}

fn decode(bytes: &[u8]) -> Result<CachedReference> {
    let bad = || Error::Format("corrupt reference cache entry".into());
    if bytes.len() < 9 || &bytes[..8] != MAGIC {
        return Err(bad());
    }
    let body = &bytes[9..];
    match bytes[8] {
        0 => {
            if body.len() < 16 {
                return Err(bad());
            }
            let rows = u64::from_le_bytes(body[..8].try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
            let data: Vec<f64> = body[16..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.len() != rows * cols || body[16..].len() % 8 != 0 {
                return Err(bad());
            }
            Ok(CachedReference::Draws(RealArray::matrix(rows, cols, data)))
        }
        1 => serde_json::from_slice(body)
            .map(CachedReference::Failed)
            .map_err(|e| Error::Format(e.to_string())),
        _ => Err(bad()),
    }
}
