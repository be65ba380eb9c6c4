//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails.
//!
//! `ACCEPTANCE_ONLY=3,4` restricts the run to the listed criteria.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use covbench::config::BenchConfig;
use covbench::{emit_report, run_matrix, RunOptions};
use covbench_core::diffcore::{gradcheck, DiffError, Graph, RealArray, Reduce, Var};
use covbench_core::estimators::spline::{self, SplineConfig};
use covbench_core::estimators::{
    ConditionalFlow, EstimatorBundle, EstimatorConfig, EstimatorKind, FlowConfig, Standardizer,
};
use covbench_core::inference::{
    ensemble, nle_posterior, npe_posterior, nre_posterior, AbcTable, AbcTablePosterior, ConjugatePosterior,
    PosteriorApproximation,
};
use covbench_core::metrics::{coverage_at, coverage_curve, CoverageConfig, CoverageCurve, TaskReference};
use covbench_core::optim::{adamw_step, sam_step, AdamWConfig, OptimizerState, PairDataset, Param, TrainConfig, Trainable};
use covbench_core::sampling::{mcmc_sample, Kernel, McmcConfig};
use covbench_core::seeding::{derive_seed, rng, Rng};
use covbench_core::tasks::{build_observation_grid, Observation, ObservationGrid, OracleSettings, Prior, Task, TaskName};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

const MASTER: u64 = 20_240_601;
const N_SEEDS: usize = 10;
const N_OBS: usize = 20;

fn seed(labels: &[&str], k: usize) -> u64 {
    let mut path: Vec<covbench_core::seeding::Label> = labels.iter().map(|l| (*l).into()).collect();
    path.push(k.into());
    derive_seed(MASTER, &path)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn column(a: &RealArray, j: usize) -> Vec<f64> {
    (0..a.rows()).map(|r| a.get(r, j)).collect()
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + (v.iter().map(|x| (x - mx).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Conjugate posterior of the Gaussian location model (prior N(0, 25),
/// unit-variance observations).
fn conjugate(y: &[f64]) -> (f64, f64) {
    let precision = 1.0 / 25.0 + y.len() as f64;
    (y.iter().sum::<f64>() / precision, 1.0 / precision)
}

/// Signed trapezoid area between a coverage curve and the diagonal.
fn signed_area(c: &CoverageCurve) -> f64 {
    let mut pts: Vec<(f64, f64)> = c.nominal.iter().zip(&c.empirical).map(|(&n, &e)| (n, e - n)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum()
}

fn coverage_cfg() -> CoverageConfig {
    CoverageConfig {
        bootstrap: 0,
        ..CoverageConfig::default()
    }
}

/// Shared state: the summary-statistic Gaussian task, its grid and the ten
/// NPE fits used by criteria 3 and 4.
struct Shared {
    bench: BenchConfig,
    task: Task,
    grid: ObservationGrid,
    fits: Vec<(EstimatorKind, Vec<Arc<EstimatorBundle>>)>,
}

impl Shared {
    fn new() -> Self {
        let task = Task::new(TaskName::TgSs);
        let grid = build_observation_grid(&task, N_OBS, seed(&["grid"], 0)).expect("observation grid");
        Self {
            bench: BenchConfig::default(),
            task,
            grid,
            fits: Vec::new(),
        }
    }

    fn reference(&self) -> TaskReference {
        TaskReference::new(self.task.clone(), seed(&["reference"], 0))
    }

    fn fits(&mut self, kind: EstimatorKind) -> Result<Vec<Arc<EstimatorBundle>>, covbench_core::Error> {
        if let Some((_, f)) = self.fits.iter().find(|(k, _)| *k == kind) {
            return Ok(f.clone());
        }
        let label = format!("{kind:?}");
        let mut out = Vec::with_capacity(N_SEEDS);
        for k in 0..N_SEEDS {
            let data = self.task.simulate_dataset(10_000, seed(&["train"], k))?;
            let tc = self.bench.training.train_config(false, seed(&["fit", &label], k));
            let (bundle, _) = EstimatorBundle::fit(kind, &data, &self.bench.estimator, &tc)?;
            out.push(Arc::new(bundle));
        }
        self.fits.push((kind, out.clone()));
        Ok(out)
    }

    fn posterior(&self, kind: EstimatorKind, b: Arc<EstimatorBundle>) -> covbench_core::Result<Box<dyn PosteriorApproximation>> {
        let prior = self.task.prior();
        let mcmc = self.bench.mcmc.clone();
        Ok(match kind {
            EstimatorKind::Npe => Box::new(npe_posterior(b, prior)?),
            EstimatorKind::Nle => Box::new(nle_posterior(b, prior, mcmc)?),
            EstimatorKind::Nre => Box::new(nre_posterior(b, prior, mcmc)?),
        })
    }
}

fn c1_conjugate_oracle(_: &mut Shared) -> Outcome {
    let task = Task::new(TaskName::Tg);
    let grid = build_observation_grid(&task, N_OBS, seed(&["c1"], 0))?;
    let mut worst: f64 = 0.0;
    for obs in grid.column(0) {
        let y = obs.reference_data();
        let ybar = y.iter().sum::<f64>() / y.len() as f64;
        // Simpson's rule on prior × likelihood over ybar ± 2 (20 posterior sd).
        let (lo, hi, n) = (ybar - 2.0, ybar + 2.0, 40_000usize);
        let h = (hi - lo) / n as f64;
        let log_f = |t: f64| -t * t / 50.0 - 0.5 * y.iter().map(|v| (v - t) * (v - t)).sum::<f64>();
        let peak = log_f(ybar * 100.0 / (100.0 + 1.0 / 25.0));
        let (mut z, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            let t = lo + h * i as f64;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let f = w * (log_f(t) - peak).exp();
            z += f;
            s1 += f * t;
            s2 += f * t * t;
        }
        let gm = s1 / z;
        let gv = s2 / z - gm * gm;
        let draws = task.reference_sample(y, 10, 1, &OracleSettings::default())?;
        assert_eq!(draws.samples.rows(), 10);
        let (m, v) = covbench_core::tasks::models::tg::posterior(y);
        worst = worst.max(((gm - m) / m.abs().max(v.sqrt())).abs());
        worst = worst.max(((gv - v) / v).abs());
    }
    Ok((worst <= 1e-6, format!("max relative error {worst:.2e} over {N_OBS} observations")))
}

fn c2_coverage_self_test(_: &mut Shared) -> Outcome {
    let task = Task::new(TaskName::Tg);
    let grid = build_observation_grid(&task, 50, seed(&["c2"], 0))?;
    let reference = TaskReference::new(task, seed(&["c2", "reference"], 0));
    let q = ConjugatePosterior::exact();
    let mut worst: f64 = 0.0;
    for sigma in [0u8, 4] {
        let curve = coverage_curve(&q, &grid.column(sigma), &reference, &coverage_cfg(), seed(&["c2", "cov"], sigma as usize))?;
        let trials = (curve.n_obs * curve.n_ref_per_obs) as f64;
        for (a, e) in curve.alphas.iter().zip(&curve.empirical) {
            let p = 1.0 - a;
            worst = worst.max((e - p).abs() / (p * (1.0 - p) / trials).sqrt());
        }
    }
    Ok((worst <= 4.0, format!("largest deviation {worst:.2} binomial s.e. over 19 levels at σ=0 and σ=4")))
}

/// Total-variation distance between `q` and the conjugate posterior on a
/// θ-grid of ±2 around the posterior mean. Unnormalized `q` is renormalized
/// on the grid; normalized `q` keeps any mass lost outside the grid.
fn tv_distance(q: &dyn PosteriorApproximation, obs: &Observation) -> covbench_core::Result<f64> {
    let (m, v) = conjugate(obs.reference_data());
    let (lo, hi, n) = (m - 2.0, m + 2.0, 8001usize);
    let h = (hi - lo) / (n - 1) as f64;
    let thetas: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
    let lq = q.unnorm_logpdf(&RealArray::column_vector(thetas.clone()), &obs.y)?;
    let edge = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
    let mut dq: Vec<f64> = lq.iter().map(|l| if l.is_finite() { l.exp() } else { 0.0 }).collect();
    let mass: f64 = (0..n).map(|i| edge(i) * dq[i] * h).sum();
    if !q.is_normalized() {
        dq.iter_mut().for_each(|d| *d /= mass);
    }
    let missing = if q.is_normalized() { (1.0 - mass).max(0.0) } else { 0.0 };
    let dp = |t: f64| (-(t - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    let l1: f64 = (0..n).map(|i| edge(i) * (dp(thetas[i]) - dq[i]).abs() * h).sum();
    Ok(0.5 * (l1 + missing))
}

fn c3_well_specified(s: &mut Shared) -> Outcome {
    let kinds = [EstimatorKind::Npe, EstimatorKind::Nle, EstimatorKind::Nre];
    let all_fits = kinds.iter().map(|&k| s.fits(k)).collect::<Result<Vec<_>, _>>()?;
    let obs = s.grid.column(0);
    let reference = s.reference();
    let mut parts = Vec::new();
    let mut ok = true;
    for (kind, fits) in kinds.into_iter().zip(all_fits) {
        let (mut tvs, mut covs) = (Vec::new(), Vec::new());
        for (k, b) in fits.into_iter().enumerate() {
            let q = s.posterior(kind, b)?;
            let tv: f64 = obs.iter().map(|o| tv_distance(q.as_ref(), o)).sum::<covbench_core::Result<f64>>()? / obs.len() as f64;
            tvs.push(tv);
            let curve = coverage_curve(q.as_ref(), &obs, &reference, &coverage_cfg(), seed(&["c3", &format!("{kind:?}")], k))?;
            covs.push(coverage_at(&curve, 0.5).expect("α=0.5 on the grid"));
        }
        let (tv, cov) = (median(tvs), median(covs));
        ok &= tv <= 0.15 && (cov - 0.5).abs() <= 0.15;
        parts.push(format!("{kind:?} median TV {tv:.3}, coverage at α=0.5 {cov:.3}"));
    }
    Ok((ok, parts.join("; ")))
}

fn c4_degradation(s: &mut Shared) -> Outcome {
    let fits = s.fits(EstimatorKind::Npe)?;
    let reference = s.reference();
    let mut areas = Vec::new();
    let mut last_cov = Vec::new();
    for sigma in 0..5u8 {
        let obs = s.grid.column(sigma);
        let mut per_seed = Vec::new();
        for (k, b) in fits.iter().enumerate() {
            let q = npe_posterior(b.clone(), s.task.prior())?;
            let curve = coverage_curve(&q, &obs, &reference, &coverage_cfg(), seed(&["c4", &sigma.to_string()], k))?;
            per_seed.push(signed_area(&curve));
            if sigma == 4 {
                last_cov.push(coverage_at(&curve, 0.5).expect("α=0.5 on the grid"));
            }
        }
        areas.push(median(per_seed));
    }
    let inversions = areas.windows(2).filter(|w| w[1] > w[0]).count();
    let below = 0.5 - median(last_cov);
    let shown: Vec<String> = areas.iter().map(|a| format!("{a:.3}")).collect();
    Ok((
        inversions <= 1 && below >= 0.1,
        format!(
            "median signed area by σ [{}], {inversions} inversion(s); σ=4 median coverage at α=0.5 is {below:.3} below nominal",
            shown.join(", ")
        ),
    ))
}

fn c5_abc(s: &mut Shared) -> Outcome {
    let table = AbcTable::simulate(&s.task, 100_000, seed(&["c5"], 0))?;
    let q = AbcTablePosterior::new(Arc::new(table), 0.01)?;
    let reference = s.reference();
    let mut worst = f64::INFINITY;
    let mut at = (0u8, 0.0);
    for sigma in 0..5u8 {
        let curve = coverage_curve(&q, &s.grid.column(sigma), &reference, &coverage_cfg(), seed(&["c5", "cov"], sigma as usize))?;
        for (a, (e, n)) in curve.alphas.iter().zip(curve.empirical.iter().zip(&curve.nominal)) {
            if e - n < worst {
                worst = e - n;
                at = (sigma, *a);
            }
        }
    }
    Ok((
        worst >= -0.05,
        format!("lowest empirical − nominal {worst:.3} (σ={}, α={:.2})", at.0, at.1),
    ))
}

/// A fixed Gaussian in θ, for mixtures with known components.
struct Gaussian(f64, f64);

impl PosteriorApproximation for Gaussian {
    fn kind(&self) -> covbench_core::inference::PosteriorKind {
        covbench_core::inference::PosteriorKind::Analytic
    }
    fn theta_dim(&self) -> usize {
        1
    }
    fn is_normalized(&self) -> bool {
        true
    }
    fn unnorm_logpdf(&self, theta: &RealArray, _y: &[f64]) -> covbench_core::Result<Vec<f64>> {
        let (m, sd) = (self.0, self.1);
        Ok(theta
            .data()
            .iter()
            .map(|t| -0.5 * ((t - m) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .collect())
    }
    fn sample(&self, _y: &[f64], n: usize, seed: u64) -> covbench_core::Result<covbench_core::inference::PosteriorSamples> {
        let mut r = rng(seed);
        let v = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                self.0 + self.1 * z
            })
            .collect();
        Ok(covbench_core::inference::PosteriorSamples::exact(RealArray::column_vector(v)))
    }
}

fn c6_ensemble(_: &mut Shared) -> Outcome {
    let prior = Prior::Normal {
        mean: vec![0.0],
        sd: vec![5.0],
    };
    let parts: Vec<Arc<dyn PosteriorApproximation>> = vec![
        Arc::new(Gaussian(-1.0, 0.5)),
        Arc::new(Gaussian(0.3, 1.0)),
        Arc::new(Gaussian(2.0, 2.0)),
    ];
    let mut r = rng(seed(&["c6"], 0));
    let points = RealArray::column_vector((0..100).map(|_| r.random_range(-5.0..6.0)).collect());
    let mix = ensemble(parts.clone(), &prior, seed(&["c6", "mix"], 0))?;
    let got = mix.unnorm_logpdf(&points, &[])?;
    let comps: Vec<Vec<f64>> = parts.iter().map(|p| p.unnorm_logpdf(&points, &[])).collect::<covbench_core::Result<_>>()?;
    let worst = (0..100)
        .map(|i| (got[i] - log_mean_exp(&[comps[0][i], comps[1][i], comps[2][i]])).abs())
        .fold(0.0, f64::max);
    let single = ensemble(vec![parts[1].clone(); 5], &prior, seed(&["c6", "same"], 0))?.unnorm_logpdf(&points, &[])?;
    let identical = single == comps[1];
    Ok((
        worst <= 1e-10 && identical,
        format!("max |error| {worst:.1e} at 100 points; 5 identical components reproduce the single density exactly: {identical}"),
    ))
}

/// Two-minimum toy: a narrow channel along x (curvature 10⁴ across it) whose
/// floor `0.05 (x − 2)²` has a broad minimum at (2, 0), with a narrow Gaussian
/// well of depth 0.5 and width 0.01 at the origin.
fn toy_loss(p: &[f64]) -> (f64, Vec<f64>) {
    let (x, y) = (p[0], p[1]);
    let (ky, s2, depth) = (1e4, 1e-4, 0.5);
    let e = (-(x * x + y * y) / (2.0 * s2)).exp();
    let l = 0.05 * (x - 2.0).powi(2) + 0.5 * ky * y * y - depth * e;
    (l, vec![0.1 * (x - 2.0) + depth * e * x / s2, ky * y + depth * e * y / s2])
}

/// Final point after 12000 steps from `start`; `rho = None` is plain AdamW.
fn toy_run(start: [f64; 2], rho: Option<f64>) -> covbench_core::Result<Vec<f64>> {
    let mut params = vec![Param::new("w", RealArray::row_vector(start.to_vec()))];
    let mut st = OptimizerState::new(
        AdamWConfig {
            lr: 2e-3,
            ..AdamWConfig::default()
        },
        &params,
    );
    for _ in 0..12_000 {
        match rho {
            None => {
                let (_, g) = toy_loss(params[0].value.data());
                adamw_step(&mut params, &[RealArray::row_vector(g)], &mut st)?;
            }
            Some(rho) => {
                sam_step(
                    &mut params,
                    |v| {
                        let (l, g) = toy_loss(v[0].data());
                        Ok((l, vec![RealArray::row_vector(g)]))
                    },
                    &mut st,
                    rho,
                )?;
            }
        }
    }
    Ok(params[0].value.data().to_vec())
}

fn c7_sam(_: &mut Shared) -> Outcome {
    // ρ = 0 against plain AdamW on a real estimator fit.
    let task = Task::new(TaskName::TgSs);
    let data = task.simulate_dataset(512, seed(&["c7", "data"], 0))?;
    let cfg = EstimatorConfig {
        flow: FlowConfig {
            layers: 2,
            hidden: 16,
            ..FlowConfig::default()
        },
        ..EstimatorConfig::default()
    };
    let base = TrainConfig {
        max_epochs: Some(5),
        seed: seed(&["c7", "fit"], 0),
        ..TrainConfig::default()
    };
    let zero = TrainConfig {
        sam_enabled: true,
        sam_radius: 0.0,
        ..base.clone()
    };
    let (a, _) = EstimatorBundle::fit(EstimatorKind::Npe, &data, &cfg, &base)?;
    let (b, _) = EstimatorBundle::fit(EstimatorKind::Npe, &data, &cfg, &zero)?;
    let bitwise = a.to_bytes() == b.to_bytes();

    let mut r = rng(seed(&["c7", "init"], 0));
    let (mut sharp, mut flat) = (0, 0);
    let near = |p: &[f64], cx: f64| (p[0] - cx).hypot(p[1]) <= 0.05;
    for _ in 0..50 {
        let start = [r.random_range(-3.0..-1.0), r.random_range(-0.5..0.5)];
        sharp += usize::from(near(&toy_run(start, None)?, 0.0));
        flat += usize::from(near(&toy_run(start, Some(0.05))?, 2.0));
    }
    Ok((
        bitwise && flat >= 40 && sharp >= 25,
        format!("ρ=0 bitwise identical: {bitwise}; SAM ρ=0.05 reaches the flat minimum from {flat}/50, AdamW the sharp minimum from {sharp}/50"),
    ))
}

fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var, DiffError> {
    let (r, c) = (g.value(out).rows(), g.value(out).cols());
    let mut rr = rng(seed);
    let w = g.constant(RealArray::matrix(r, c, (0..r * c).map(|_| rr.random_range(-1.0..1.0)).collect()));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod, Reduce::All))
}

fn random_matrix(r: usize, c: usize, lo: f64, hi: f64, seed: u64) -> RealArray {
    let mut rr = rng(seed);
    RealArray::matrix(r, c, (0..r * c).map(|_| rr.random_range(lo..hi)).collect())
}

fn perturb(params: &mut [Param], scale: f64, seed: u64) {
    let mut r = rng(seed);
    for p in params {
        for v in p.value.data_mut() {
            *v += scale * (2.0 * r.random::<f64>() - 1.0);
        }
    }
}

fn c8_numerical_core(_: &mut Shared) -> Outcome {
    type Op = fn(&mut Graph, Var, Var) -> Result<Var, DiffError>;
    let ops: Vec<(&str, Op, (f64, f64))> = vec![
        ("add", |g, p, c| g.add(p, c), (-2.0, 2.0)),
        ("sub", |g, p, c| g.sub(c, p), (-2.0, 2.0)),
        ("mul", |g, p, c| g.mul(p, c), (-2.0, 2.0)),
        ("matmul left", |g, p, c| g.matmul(p, c), (-2.0, 2.0)),
        ("matmul right", |g, p, c| g.matmul(c, p), (-2.0, 2.0)),
        ("tanh", |g, p, _| Ok(g.tanh(p)), (-2.0, 2.0)),
        ("relu", |g, p, _| Ok(g.relu(p)), (0.1, 2.0)),
        ("softplus", |g, p, _| Ok(g.softplus(p)), (-2.0, 2.0)),
        ("exp", |g, p, _| Ok(g.exp(p)), (-2.0, 2.0)),
        ("log", |g, p, _| g.log(p), (0.2, 3.0)),
        ("scale", |g, p, _| Ok(g.scale(p, -1.7)), (-2.0, 2.0)),
        ("sum", |g, p, _| Ok(g.sum(p, Reduce::PerRow)), (-2.0, 2.0)),
        ("mean", |g, p, _| Ok(g.mean(p, Reduce::PerRow)), (-2.0, 2.0)),
        ("logsumexp", |g, p, _| Ok(g.logsumexp(p, Reduce::PerRow)), (-2.0, 2.0)),
        ("slice", |g, p, _| g.slice(p, &[3, 0]), (-2.0, 2.0)),
        ("concat", |g, p, c| g.concat(&[c, p]), (-2.0, 2.0)),
    ];
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for (i, (name, op, (lo, hi))) in ops.iter().enumerate() {
        let p = random_matrix(4, 4, *lo, *hi, seed(&["c8", name], 0));
        let c = random_matrix(4, 4, -2.0, 2.0, seed(&["c8", name], 1));
        let rep = gradcheck(
            |g: &mut Graph, v: Var| {
                let cv = g.constant(c.clone());
                let out = op(g, v, cv)?;
                weighted_sum(g, out, 100 + i as u64)
            },
            &p,
            1e-5,
            1e-4,
        )?;
        worst = worst.max(rep.max_rel_error);
        if rep.max_rel_error > 1e-4 {
            failed.push(*name);
        }
    }
    // Affine layer gradient with respect to weights.
    let x = random_matrix(5, 3, -1.0, 1.0, seed(&["c8", "affine"], 0));
    let bias = random_matrix(1, 2, -1.0, 1.0, seed(&["c8", "affine"], 1));
    let rep = gradcheck(
        |g: &mut Graph, w: Var| {
            let xv = g.constant(x.clone());
            let bv = g.constant(bias.clone());
            let out = g.affine(xv, w, bv)?;
            let t = g.tanh(out);
            weighted_sum(g, t, 7)
        },
        &random_matrix(3, 2, -1.0, 1.0, seed(&["c8", "affine"], 2)),
        1e-5,
        1e-4,
    )?;
    worst = worst.max(rep.max_rel_error);
    if rep.max_rel_error > 1e-4 {
        failed.push("affine");
    }

    // The three training losses, every parameter array.
    let cfg = EstimatorConfig {
        flow: FlowConfig {
            layers: 2,
            hidden: 4,
            depth: 1,
            ..FlowConfig::default()
        },
        classifier: covbench_core::estimators::ClassifierConfig { hidden: vec![5, 5, 5] },
    };
    for (kind, name) in [(EstimatorKind::Npe, "NPE loss"), (EstimatorKind::Nle, "NLE loss"), (EstimatorKind::Nre, "NRE loss")] {
        let s = seed(&["c8", name], 0);
        let mut b = EstimatorBundle::new(kind, Standardizer::identity(2), Standardizer::identity(3), &cfg, s)?;
        perturb(b.parameters_mut(), 0.5, s + 1);
        let batch = PairDataset::new(random_matrix(12, 2, -2.0, 2.0, s + 2), random_matrix(12, 3, -2.0, 2.0, s + 3))?;
        let params = b.parameters();
        for k in 0..params.len() {
            let rep = gradcheck(
                |g: &mut Graph, p: Var| {
                    let vars: Vec<Var> = params
                        .iter()
                        .enumerate()
                        .map(|(i, q)| if i == k { p } else { g.constant(q.value.clone()) })
                        .collect();
                    b.build_loss(g, &vars, &batch).map_err(|e| DiffError::NonFinite(e.to_string()))
                },
                &params[k].value,
                1e-5,
                1e-4,
            )?;
            worst = worst.max(rep.max_rel_error);
            if rep.max_rel_error > 1e-4 {
                failed.push(name);
            }
        }
    }

    // Spline transform: hand-derived gradients against central differences.
    let sc = SplineConfig::default();
    let mut r = rng(seed(&["c8", "spline"], 0));
    let mut spline_worst: f64 = 0.0;
    for _ in 0..20 {
        let raw: Vec<f64> = (0..sc.params_per_dim()).map(|_| r.random_range(-1.5..1.5)).collect();
        let u = r.random_range(-4.5..4.5);
        let (gv, gl) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let f = |u: f64, raw: &[f64]| {
            let (v, ld) = spline::forward(u, raw, &sc);
            gv * v + gl * ld
        };
        let mut graw = vec![0.0; raw.len()];
        let grad = spline::forward_with_grad(u, &raw, &sc, gv, gl, &mut graw);
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        spline_worst = spline_worst.max(rel(grad.du, (f(u + h, &raw) - f(u - h, &raw)) / (2.0 * h)));
        for j in 0..raw.len() {
            let (mut up, mut dn) = (raw.clone(), raw.clone());
            up[j] += h;
            dn[j] -= h;
            spline_worst = spline_worst.max(rel(graw[j], (f(u, &up) - f(u, &dn)) / (2.0 * h)));
        }
    }
    worst = worst.max(spline_worst);
    if spline_worst > 1e-4 {
        failed.push("spline");
    }

    // Flow invertibility in both directions, on base draws and on the flow's
    // own samples, with parameters away from the identity.
    let mut flow = ConditionalFlow::new(3, 2, FlowConfig::default(), seed(&["c8", "flow"], 0))?;
    perturb(flow.parameters_mut(), 0.3, seed(&["c8", "flow"], 1));
    let mut r = rng(seed(&["c8", "flow"], 2));
    let base = RealArray::matrix(500, 3, (0..1500).map(|_| StandardNormal.sample(&mut r)).collect());
    let ctx = random_matrix(500, 2, -2.0, 2.0, seed(&["c8", "flow"], 3));
    let max_diff = |a: &RealArray, b: &RealArray| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let target = flow.inverse(&base, &ctx)?;
    let round_trip = max_diff(&base, &flow.forward(&target, &ctx)?).max(max_diff(&target, &flow.inverse(&flow.forward(&target, &ctx)?, &ctx)?));

    // A trained 1-D flow integrates to one.
    let mut r = rng(seed(&["c8", "density"], 0));
    let theta: Vec<f64> = (0..3000)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            (0.5 * z).exp()
        })
        .collect();
    let data = PairDataset::new(RealArray::column_vector(theta), RealArray::zeros(3000, 0))?;
    let ecfg = EstimatorConfig {
        flow: FlowConfig {
            layers: 2,
            hidden: 16,
            ..FlowConfig::default()
        },
        ..EstimatorConfig::default()
    };
    let tc = TrainConfig {
        max_epochs: Some(30),
        seed: seed(&["c8", "density"], 1),
        ..TrainConfig::default()
    };
    let (b, _) = EstimatorBundle::fit(EstimatorKind::Npe, &data, &ecfg, &tc)?;
    let (lo, hi, n) = (-20.0, 40.0, 60_001);
    let h = (hi - lo) / (n - 1) as f64;
    let grid = RealArray::column_vector((0..n).map(|i| lo + h * i as f64).collect());
    let mass: f64 = b.posterior_log_prob(&grid, &[])?.iter().map(|v| v.exp()).sum::<f64>() * h;

    let passed = failed.is_empty() && round_trip <= 1e-6 && (mass - 1.0).abs() <= 0.01;
    Ok((
        passed,
        format!(
            "max gradcheck error {worst:.1e}{}; flow round trip {round_trip:.1e}; 1-D density mass {mass:.4}",
            if failed.is_empty() { String::new() } else { format!(" (failed: {})", failed.join(", ")) }
        ),
    ))
}

fn skewness(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    x.iter().map(|a| (a - m).powi(3)).sum::<f64>() / n / v.powf(1.5)
}

fn c9_mcmc(_: &mut Shared) -> Outcome {
    let cfg = McmcConfig::default();
    let init1 = |r: &mut Rng| vec![r.random_range(-3.0..3.0)];
    let init2 = |r: &mut Rng| vec![r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];

    let normal = |t: &RealArray| -> covbench_core::Result<Vec<f64>> { Ok(t.data().iter().map(|x| -0.5 * x * x).collect()) };
    let out = mcmc_sample(&normal, &init1, 1, 8000, &Kernel::RandomWalk, &cfg, seed(&["c9"], 0))?;
    let (m, v) = mean_var(out.samples.data());
    let ok1 = m.abs() <= 0.1 && (v - 1.0).abs() <= 0.15;

    let rho = 0.9;
    let corr = move |t: &RealArray| -> covbench_core::Result<Vec<f64>> {
        Ok((0..t.rows())
            .map(|r| {
                let (a, b) = (t.get(r, 0), t.get(r, 1));
                -0.5 * (a * a - 2.0 * rho * a * b + b * b) / (1.0 - rho * rho)
            })
            .collect())
    };
    let out = mcmc_sample(&corr, &init2, 2, 8000, &Kernel::RandomWalk, &cfg, seed(&["c9"], 1))?;
    let (a, b) = (column(&out.samples, 0), column(&out.samples, 1));
    let ((ma, va), (mb, vb)) = (mean_var(&a), mean_var(&b));
    let cab = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64;
    let cov_err = [(va - 1.0).abs(), (vb - 1.0).abs(), (cab - rho).abs()].into_iter().fold(0.0, f64::max);
    let ok2 = cov_err <= 0.1;

    // Flat ratio on a uniform prior: samples follow the prior.
    let flat = |t: &RealArray| -> covbench_core::Result<Vec<f64>> {
        Ok((0..t.rows())
            .map(|r| if (0..2).all(|j| (-1.0..=3.0).contains(&t.get(r, j))) { 0.0 } else { f64::NEG_INFINITY })
            .collect())
    };
    let init_u = |r: &mut Rng| vec![r.random_range(-1.0..3.0), r.random_range(-1.0..3.0)];
    let kernel = Kernel::for_bounds(&[-1.0, -1.0], &[3.0, 3.0]);
    let out = mcmc_sample(&flat, &init_u, 2, 8000, &kernel, &cfg, seed(&["c9"], 2))?;
    let prior_err = (0..2)
        .map(|j| {
            let (m, v) = mean_var(&column(&out.samples, j));
            (m - 1.0).abs().max((v - 16.0 / 12.0).abs())
        })
        .fold(0.0, f64::max);
    let ok3 = prior_err <= 0.1;

    let task = Task::new(TaskName::Slcp);
    let grid = build_observation_grid(&task, 2, seed(&["c9", "slcp"], 0))?;
    let mut skew: f64 = 0.0;
    for obs in grid.column(0) {
        let d = task.reference_sample(obs.reference_data(), 4000, seed(&["c9", "slcp"], 1 + obs.index), &OracleSettings::default())?;
        for j in [2, 3] {
            skew = skew.max(skewness(&column(&d.samples, j)).abs());
        }
    }
    let ok4 = skew <= 0.2;
    Ok((
        ok1 && ok2 && ok3 && ok4,
        format!(
            "N(0,1) mean {m:.3} var {v:.3}; ρ=0.9 covariance error {cov_err:.3}; flat-ratio prior moment error {prior_err:.3}; SLCP max |skewness| of θ₃, θ₄ {skew:.3}"
        ),
    ))
}

const MINI: &str = r#"
master_seed = 5
tasks = ["TG_SS"]
algorithms = ["NPE", "NLE"]
n_train = [1000]
sigmas = [0, 1, 2, 3, 4]
n_obs = 5
n_seeds = 3
workers = 1

[metrics]
m = 20
k = 200
bootstrap = 50

[training]
max_epochs = 20
"#;

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(csv_files(&p));
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn c10_determinism(_: &mut Shared) -> Outcome {
    let cfg = BenchConfig::from_toml_str(MINI)?;
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir()).collect::<Result<_, _>>()?;
    for d in &dirs[..2] {
        let s = run_matrix(&cfg, d.path(), &RunOptions::default())?;
        emit_report(&s.records, d.path())?;
    }
    let first = run_matrix(
        &cfg,
        dirs[2].path(),
        &RunOptions {
            stop_after: Some(1),
            ..RunOptions::default()
        },
    )?;
    let rest = run_matrix(
        &cfg,
        dirs[2].path(),
        &RunOptions {
            resume: true,
            ..RunOptions::default()
        },
    )?;
    emit_report(&covbench::read_records(dirs[2].path())?, dirs[2].path())?;
    let files: Vec<Vec<PathBuf>> = dirs.iter().map(|d| csv_files(d.path())).collect();
    let rel = |d: &tempfile::TempDir, f: &[PathBuf]| -> Vec<PathBuf> {
        f.iter().map(|p| p.strip_prefix(d.path()).unwrap().to_path_buf()).collect()
    };
    let same_layout = (1..3).all(|i| rel(&dirs[i], &files[i]) == rel(&dirs[0], &files[0]));
    let mut differing = 0;
    if same_layout {
        for i in 1..3 {
            for (a, b) in files[0].iter().zip(&files[i]) {
                if fs::read(a)? != fs::read(b)? {
                    differing += 1;
                }
            }
        }
    }
    let interrupted = first.cells_run == 1 && first.cells_pending == 1 && rest.cells_skipped == 1 && rest.cells_run == 1;
    Ok((
        same_layout && differing == 0 && interrupted && !files[0].is_empty(),
        format!(
            "{} CSV files per run; {differing} differ across two full runs and an interrupted-then-resumed run; interruption left {} of 2 cells pending",
            files[0].len(),
            first.cells_pending
        ),
    ))
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget_s: f64,
    /// Budget stated for eight cores; scaled to the cores available.
    per_eight_cores: bool,
    run: fn(&mut Shared) -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "conjugate oracle", budget_s: 60.0, per_eight_cores: false, run: c1_conjugate_oracle },
        Criterion { id: 2, name: "coverage self-test", budget_s: 300.0, per_eight_cores: false, run: c2_coverage_self_test },
        Criterion { id: 3, name: "well-specified accuracy", budget_s: 3600.0, per_eight_cores: true, run: c3_well_specified },
        Criterion { id: 4, name: "misspecification degradation", budget_s: 7200.0, per_eight_cores: false, run: c4_degradation },
        Criterion { id: 5, name: "ABC robustness", budget_s: 1800.0, per_eight_cores: false, run: c5_abc },
        Criterion { id: 6, name: "ensemble identity", budget_s: 60.0, per_eight_cores: false, run: c6_ensemble },
        Criterion { id: 7, name: "SAM contract", budget_s: 300.0, per_eight_cores: false, run: c7_sam },
        Criterion { id: 8, name: "numerical core", budget_s: 300.0, per_eight_cores: false, run: c8_numerical_core },
        Criterion { id: 9, name: "MCMC oracle", budget_s: 900.0, per_eight_cores: false, run: c9_mcmc },
        Criterion { id: 10, name: "determinism and resume", budget_s: 1800.0, per_eight_cores: false, run: c10_determinism },
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()) as f64;
    let mut shared = Shared::new();
    let mut failures = 0;
    for c in criteria.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let t0 = Instant::now();
        let outcome = (c.run)(&mut shared);
        let secs = t0.elapsed().as_secs_f64();
        let budget = if c.per_eight_cores { c.budget_s * (8.0 / cores).max(1.0) } else { c.budget_s };
        let (passed, detail) = match outcome {
            Ok((p, d)) => (p && secs <= budget, d),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!passed);
        println!(
            "{} {:>2} {}: {detail} [{secs:.1} s of {budget:.0} s]",
            if passed { "PASS" } else { "FAIL" },
            c.id,
            c.name
        );
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
