//! Checks behind `covbench oracle` and `covbench selftest`.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use covbench_core::diffcore::RealArray;
use covbench_core::estimators::{EstimatorBundle, EstimatorConfig, EstimatorKind, FlowConfig};
use covbench_core::inference::{ensemble, log_mean_exp, ConjugatePosterior, PosteriorApproximation};
use covbench_core::metrics::{coverage_curve, credibilities, CoverageConfig, TaskReference};
use covbench_core::optim::TrainConfig;
use covbench_core::seeding::{derive_seed, rng};
use covbench_core::tasks::models::tg;
use covbench_core::tasks::{build_observation_grid, OracleKind, OracleSettings, Task, TaskName};
use covbench_core::Result;
use rand::Rng as _;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

/// Posterior mean and variance of the Gaussian model by trapezoid
/// integration of prior × likelihood on a grid around the data mean.
pub fn tg_grid_moments(y: &[f64]) -> (f64, f64) {
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let (lo, hi, k) = (ybar - 3.0, ybar + 3.0, 60_001);
    let h = (hi - lo) / (k - 1) as f64;
    let logs: Vec<f64> = (0..k)
        .map(|i| {
            let t = lo + h * i as f64;
            -t * t / (2.0 * tg::PRIOR_VAR) + tg::log_likelihood(t, y)
        })
        .collect();
    let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
    let edge = |i: usize| if i == 0 || i == k - 1 { 0.5 } else { 1.0 };
    let z: f64 = (0..k).map(|i| w[i] * edge(i)).sum();
    let mean = (0..k).map(|i| w[i] * edge(i) * (lo + h * i as f64)).sum::<f64>() / z;
    let var = (0..k)
        .map(|i| w[i] * edge(i) * (lo + h * i as f64 - mean).powi(2))
        .sum::<f64>()
        / z;
    (mean, var)
}

fn skewness(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    x.iter().map(|a| (a - m).powi(3)).sum::<f64>() / n / v.powf(1.5)
}

/// Self-tests of one task's reference oracle.
pub fn oracle_checks(name: TaskName) -> Vec<Check> {
    let task = Task::new(name);
    let mut out = Vec::new();
    if task.oracle_kind() == OracleKind::ConjugateClosedForm {
        out.push(Check::from_result("conjugate posterior matches grid integration", (|| {
            let grid = build_observation_grid(&task, 20, 11)?;
            let mut worst: f64 = 0.0;
            for sigma in [0, 4] {
                for obs in grid.column(sigma) {
                    let y = obs.reference_data();
                    let (m, v) = tg::posterior(y);
                    let (gm, gv) = tg_grid_moments(y);
                    worst = worst.max(((gm - m) / m.abs().max(v.sqrt())).abs());
                    worst = worst.max(((gv - v) / v).abs());
                }
            }
            Ok((worst <= 1e-6, format!("worst relative error {worst:.2e} over 40 observations")))
        })()));
    }
    out.push(Check::from_result("reference draws are reproducible and finite", (|| {
        let grid = build_observation_grid(&task, 2, 5)?;
        let obs = &grid.column(0)[0];
        let settings = OracleSettings::default();
        let a = task.reference_sample(obs.reference_data(), 200, 3, &settings)?;
        let b = task.reference_sample(obs.reference_data(), 200, 3, &settings)?;
        let same = a.samples == b.samples;
        let finite = a.samples.data().iter().all(|v| v.is_finite());
        Ok((same && finite, format!("identical: {same}, finite: {finite}")))
    })()));
    if task.oracle_kind() == OracleKind::Mcmc {
        out.push(Check::from_result("MCMC oracle passes R-hat on 3 observations", (|| {
            let grid = build_observation_grid(&task, 3, 17)?;
            let settings = OracleSettings::default();
            let mut worst: f64 = 0.0;
            for obs in grid.column(0) {
                let d = task.reference_sample(obs.reference_data(), 1000, obs.index as u64, &settings)?;
                if let Some(diag) = d.diagnostics {
                    worst = worst.max(diag.max_rhat());
                }
            }
            Ok((worst <= settings.rhat_limit, format!("max split R-hat {worst:.4}")))
        })()));
    }
    if name == TaskName::Slcp {
        out.push(Check::from_result("θ₃ and θ₄ marginals are sign-symmetric", (|| {
            let grid = build_observation_grid(&task, 2, 23)?;
            let settings = OracleSettings::default();
            let mut worst: f64 = 0.0;
            for obs in grid.column(0) {
                let d = task.reference_sample(obs.reference_data(), 4000, 29 + obs.index as u64, &settings)?;
                for j in [2, 3] {
                    let col: Vec<f64> = (0..d.samples.rows()).map(|r| d.samples.get(r, j)).collect();
                    worst = worst.max(skewness(&col).abs());
                }
            }
            Ok((worst <= 0.2, format!("max |skewness| {worst:.3}")))
        })()));
    }
    out
}

/// Fast invariant suite.
pub fn invariant_checks() -> Vec<Check> {
    let mut out = Vec::new();

    out.push(Check::from_result("seed derivation has no collisions over 10⁵ paths", (|| {
        let mut seen = HashSet::new();
        for i in 0..100_000u64 {
            seen.insert(derive_seed(1, &["cell".into(), (i % 317).into(), (i / 317).into()]));
        }
        let order = derive_seed(1, &["a".into(), "b".into()]) != derive_seed(1, &["b".into(), "a".into()]);
        Ok((seen.len() == 100_000 && order, format!("{} distinct, order-sensitive: {order}", seen.len())))
    })()));

    out.push(Check::from_result("exact posterior is calibrated at σ=0 and σ=4", (|| {
        let task = Task::new(TaskName::Tg);
        let grid = build_observation_grid(&task, 50, 31)?;
        let reference = TaskReference::new(task, 31);
        let cfg = CoverageConfig {
            bootstrap: 0,
            ..CoverageConfig::default()
        };
        let q = ConjugatePosterior::exact();
        let mut worst: f64 = 0.0;
        for sigma in [0, 4] {
            let curve = coverage_curve(&q, &grid.column(sigma), &reference, &cfg, 37)?;
            let trials = (curve.n_obs * curve.n_ref_per_obs) as f64;
            for (e, n) in curve.empirical.iter().zip(&curve.nominal) {
                let se = (n * (1.0 - n) / trials).sqrt();
                worst = worst.max((e - n).abs() / se);
            }
        }
        Ok((worst <= 4.0, format!("largest deviation {worst:.2} binomial s.e.")))
    })()));

    out.push(Check::from_result("ensemble density is the mean of its components", (|| {
        let parts: Vec<Arc<dyn PosteriorApproximation>> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&s| Arc::new(ConjugatePosterior { variance_scale: s }) as Arc<dyn PosteriorApproximation>)
            .collect();
        let task = Task::new(TaskName::Tg);
        let mut r = rng(41);
        let y = task.simulate_raw(&[0.7], &mut r)?;
        let mix = ensemble(parts.clone(), task.prior(), 43)?;
        let points = RealArray::column_vector((0..100).map(|_| r.random_range(-1.0..2.5)).collect());
        let got = mix.unnorm_logpdf(&points, &y)?;
        let comps: Vec<Vec<f64>> = parts
            .iter()
            .map(|p| p.unnorm_logpdf(&points, &y))
            .collect::<Result<_>>()?;
        let mut worst: f64 = 0.0;
        for i in 0..100 {
            let want = log_mean_exp(&comps.iter().map(|c| c[i]).collect::<Vec<_>>());
            worst = worst.max((got[i] - want).abs());
        }
        let single = ensemble(vec![parts[1].clone(); 4], task.prior(), 47)?.unnorm_logpdf(&points, &y)?;
        let identical = single.iter().zip(&comps[1]).all(|(a, b)| (a - b).abs() <= 1e-12);
        Ok((worst <= 1e-10 && identical, format!("max error {worst:.1e}, identical components reproduce: {identical}")))
    })()));

    out.push(Check::from_result("SAM with zero radius matches AdamW bitwise", (|| {
        let task = Task::new(TaskName::TgSs);
        let data = task.simulate_dataset(512, 53)?;
        let cfg = EstimatorConfig {
            flow: FlowConfig {
                layers: 1,
                hidden: 8,
                ..FlowConfig::default()
            },
            ..EstimatorConfig::default()
        };
        let base = TrainConfig {
            max_epochs: Some(3),
            seed: 59,
            ..TrainConfig::default()
        };
        let zero = TrainConfig {
            sam_enabled: true,
            sam_radius: 0.0,
            ..base.clone()
        };
        let (a, _) = EstimatorBundle::fit(EstimatorKind::Npe, &data, &cfg, &base)?;
        let (b, _) = EstimatorBundle::fit(EstimatorKind::Npe, &data, &cfg, &zero)?;
        let same = a.to_bytes() == b.to_bytes();
        Ok((same, format!("serialized parameters identical: {same}")))
    })()));

    out.push(Check::from_result("a point at the mode has credibility 0", (|| {
        let q = ConjugatePosterior::exact();
        let y = vec![0.0; tg::N];
        let (m, _) = tg::posterior(&y);
        let (cred, _) = credibilities(&q, &y, &RealArray::column_vector(vec![m]), 1000, 61)?;
        Ok((cred[0] == 0.0, format!("credibility {}", cred[0])))
    })()));

    out
}
