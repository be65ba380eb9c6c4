//! Benchmark tasks: priors, simulators, misspecification transforms, summary
//! statistics and reference posterior oracles, plus the observation grid
//! shared by every algorithm.

mod grid;
pub mod models;
mod prior;
mod reference;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use grid::{build_observation_grid, Observation, ObservationGrid};
pub use models::{mean_sd, median};
pub use prior::Prior;
pub use reference::{CachedReference, OracleKind, OracleSettings, ReferenceCache, ReferenceDraws};

use crate::diffcore::RealArray;
use crate::error::{Error, Result};
use crate::optim::PairDataset;
use crate::seeding::{derived_rng, Rng};

/// Misspecification levels used throughout.
pub const SIGMAS: [u8; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskName {
    #[serde(rename = "TG")]
    Tg,
    #[serde(rename = "TG_SS")]
    TgSs,
    #[serde(rename = "SV")]
    Sv,
    #[serde(rename = "SV_SS")]
    SvSs,
    #[serde(rename = "SLCP")]
    Slcp,
}

impl TaskName {
    pub const ALL: [TaskName; 5] = [
        TaskName::Tg,
        TaskName::TgSs,
        TaskName::Sv,
        TaskName::SvSs,
        TaskName::Slcp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Tg => "TG",
            TaskName::TgSs => "TG_SS",
            TaskName::Sv => "SV",
            TaskName::SvSs => "SV_SS",
            TaskName::Slcp => "SLCP",
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown task `{s}`")))
    }
}

/// How the two numbers of the SV Gamma priors are read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaConvention {
    #[default]
    ShapeRate,
    ShapeScale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    name: TaskName,
    prior: Prior,
}

impl Task {
    pub fn new(name: TaskName) -> Self {
        Self::with_gamma_convention(name, GammaConvention::default())
    }

    pub fn with_gamma_convention(name: TaskName, convention: GammaConvention) -> Self {
        let prior = match name {
            TaskName::Tg | TaskName::TgSs => Prior::Normal {
                mean: vec![0.0],
                sd: vec![models::tg::PRIOR_VAR.sqrt()],
            },
            TaskName::Sv | TaskName::SvSs => {
                let rate = match convention {
                    GammaConvention::ShapeRate => vec![25.0, 1.0],
                    GammaConvention::ShapeScale => vec![1.0 / 25.0, 1.0],
                };
                Prior::Gamma {
                    shape: vec![5.0, 5.0],
                    rate,
                }
            }
            TaskName::Slcp => Prior::Uniform {
                lower: vec![-3.0; 5],
                upper: vec![3.0; 5],
            },
        };
        Self { name, prior }
    }

    pub fn name(&self) -> TaskName {
        self.name
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn theta_dim(&self) -> usize {
        self.prior.dim()
    }

    /// Length of raw simulator output.
    pub fn raw_dim(&self) -> usize {
        match self.name {
            TaskName::Tg | TaskName::TgSs => models::tg::N,
            TaskName::Sv | TaskName::SvSs => models::sv::N,
            TaskName::Slcp => 2 * models::slcp::DRAWS,
        }
    }

    /// Length of the data seen by the estimators (after summaries).
    pub fn x_dim(&self) -> usize {
        match self.name {
            TaskName::TgSs => 2,
            TaskName::SvSs => 4,
            _ => self.raw_dim(),
        }
    }

    pub fn has_summary(&self) -> bool {
        matches!(self.name, TaskName::TgSs | TaskName::SvSs)
    }

    pub fn simulate_raw(&self, theta: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        if theta.len() != self.theta_dim() {
            return Err(Error::Dimension {
                what: "θ",
                expected: self.theta_dim(),
                got: theta.len(),
            });
        }
        Ok(match self.name {
            TaskName::Tg | TaskName::TgSs => models::tg::simulate(theta[0], rng),
            TaskName::Sv | TaskName::SvSs => models::sv::simulate(theta[0], theta[1], rng)?,
            TaskName::Slcp => models::slcp::simulate(theta, rng),
        })
    }

    /// Auxiliary transform noise `z`, drawn once per observation index.
    pub fn draw_noise(&self, rng: &mut Rng) -> Vec<f64> {
        match self.name {
            TaskName::Tg | TaskName::TgSs => models::tg::draw_noise(rng),
            TaskName::Sv | TaskName::SvSs => Vec::new(),
            TaskName::Slcp => models::slcp::draw_noise(rng),
        }
    }

    /// `T_σ(raw; z)`, the identity at `σ = 0`.
    pub fn transform(&self, raw: &[f64], sigma: u8, z: &[f64]) -> Vec<f64> {
        match self.name {
            TaskName::Tg | TaskName::TgSs => models::tg::transform(raw, sigma, z),
            TaskName::Sv | TaskName::SvSs => models::sv::transform(raw, sigma),
            TaskName::Slcp => models::slcp::transform(raw, sigma, z),
        }
    }

    /// Summary statistics, or the input itself for tasks without them.
    pub fn summarize(&self, raw: &[f64]) -> Vec<f64> {
        match self.name {
            TaskName::TgSs => models::tg::summary(raw),
            TaskName::SvSs => models::sv::summary(raw),
            _ => raw.to_vec(),
        }
    }

    /// Simulates `x = s(simulator(θ))` with no misspecification.
    pub fn simulate(&self, theta: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.summarize(&self.simulate_raw(theta, rng)?))
    }

    /// `n` prior-predictive pairs; row `i` uses its own derived stream, so
    /// the result does not depend on the worker count.
    pub fn simulate_dataset(&self, n: usize, seed: u64) -> Result<PairDataset> {
        let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = derived_rng(seed, &["pair".into(), i.into()]);
                let theta = self.prior.sample(&mut rng);
                let x = self.simulate(&theta, &mut rng)?;
                Ok((theta, x))
            })
            .collect();
        let mut theta = Vec::with_capacity(n * self.theta_dim());
        let mut x = Vec::with_capacity(n * self.x_dim());
        for r in rows {
            let (t, xi) = r?;
            theta.extend(t);
            x.extend(xi);
        }
        PairDataset::new(
            RealArray::matrix(n, self.theta_dim(), theta),
            RealArray::matrix(n, self.x_dim(), x),
        )
    }
}
