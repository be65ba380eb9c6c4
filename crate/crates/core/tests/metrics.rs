use covbench_core::diffcore::RealArray;
use covbench_core::inference::{ConjugatePosterior, PosteriorApproximation, PosteriorKind, PosteriorSamples, PriorPosterior};
use covbench_core::metrics::{
    coverage_curve, credibilities, default_alpha_grid, expected_coverage, hpd_membership, CoverageConfig,
    ReferenceSource, TaskReference,
};
use covbench_core::seeding::rng;
use covbench_core::tasks::{build_observation_grid, Observation, Task, TaskName};
use covbench_core::Result;
use rand_distr::{Distribution, StandardNormal};

/// Standard normal with an additive constant on the log density, and a
/// support cut-off beyond `|θ| > cut`.
struct StdNormal {
    shift: f64,
    cut: f64,
}

impl PosteriorApproximation for StdNormal {
    fn kind(&self) -> PosteriorKind {
        PosteriorKind::Analytic
    }
    fn theta_dim(&self) -> usize {
        1
    }
    fn is_normalized(&self) -> bool {
        self.shift == 0.0
    }
    fn unnorm_logpdf(&self, theta: &RealArray, _y: &[f64]) -> Result<Vec<f64>> {
        Ok(theta
            .data()
            .iter()
            .map(|t| {
                if t.abs() > self.cut {
                    f64::NEG_INFINITY
                } else {
                    -0.5 * t * t + self.shift
                }
            })
            .collect())
    }
    fn sample(&self, _y: &[f64], n: usize, seed: u64) -> Result<PosteriorSamples> {
        let mut r = rng(seed);
        let mut d = Vec::with_capacity(n);
        while d.len() < n {
            let z: f64 = StandardNormal.sample(&mut r);
            if z.abs() <= self.cut {
                d.push(z);
            }
        }
        Ok(PosteriorSamples::exact(RealArray::column_vector(d)))
    }
}

fn std_normal() -> StdNormal {
    StdNormal {
        shift: 0.0,
        cut: f64::INFINITY,
    }
}

#[test]
fn hpd_membership_of_a_standard_normal() {
    let q = std_normal();
    let at_mode = hpd_membership(&q, &[], &[0.0], 1000, 1).unwrap();
    assert_eq!(at_mode.credibility, 0.0);
    assert!(default_alpha_grid().iter().all(|&a| at_mode.member(a)));

    let k = 10_000;
    let d = hpd_membership(&q, &[], &[1.645], k, 2).unwrap();
    let se = (0.9 * 0.1 / k as f64).sqrt();
    assert!((d.credibility - 0.9).abs() <= 4.0 * se, "{}", d.credibility);

    let cut = StdNormal {
        shift: 0.0,
        cut: 2.0,
    };
    let outside = hpd_membership(&cut, &[], &[3.0], 1000, 3).unwrap();
    assert_eq!(outside.credibility, 1.0);
    assert!(default_alpha_grid().iter().all(|&a| !outside.member(a)));
    assert!(hpd_membership(&q, &[], &[0.0], 99, 1).is_err());
}

#[test]
fn decisions_ignore_density_constants() {
    let points = RealArray::column_vector((0..200).map(|i| -4.0 + 0.04 * i as f64).collect());
    let (base, _) = credibilities(&std_normal(), &[], &points, 1000, 4).unwrap();
    for c in [1e-6f64, 1e-3, 1.0, 1e3, 1e6] {
        let q = StdNormal {
            shift: c.ln(),
            cut: f64::INFINITY,
        };
        let (got, _) = credibilities(&q, &[], &points, 1000, 4).unwrap();
        assert_eq!(got, base);
    }
}

fn tg_setup(n_obs: usize) -> (Task, Vec<Observation>) {
    let task = Task::new(TaskName::Tg);
    let grid = build_observation_grid(&task, n_obs, 42).unwrap();
    (task, grid.entries)
}

fn column(entries: &[Observation], sigma: u8) -> Vec<&Observation> {
    entries.iter().filter(|o| o.sigma == sigma).collect()
}

#[test]
fn reference_as_approximation_is_calibrated() {
    let (task, entries) = tg_setup(50);
    let reference = TaskReference::new(task, 9);
    let cfg = CoverageConfig::default();
    for sigma in [0, 4] {
        let obs = column(&entries, sigma);
        let curve = coverage_curve(&ConjugatePosterior::exact(), &obs, &reference, &cfg, 5).unwrap();
        let total = (curve.n_obs * curve.n_ref_per_obs) as f64;
        for (e, n) in curve.empirical.iter().zip(&curve.nominal) {
            let se = (n * (1.0 - n) / total).sqrt();
            assert!((e - n).abs() <= 4.0 * se, "σ={sigma}: {e} vs {n}");
        }
        assert!(curve.empirical.windows(2).all(|w| w[0] >= w[1]));
        assert!(curve.band_lo.iter().zip(&curve.band_hi).all(|(l, h)| l <= h));
    }
}

#[test]
fn conservative_and_overconfident_approximations() {
    let (task, entries) = tg_setup(30);
    let reference = TaskReference::new(task.clone(), 9);
    let obs = column(&entries, 0);
    let cfg = CoverageConfig {
        m: 50,
        k: 500,
        ..CoverageConfig::default()
    };
    let prior = coverage_curve(&PriorPosterior(task.prior().clone()), &obs, &reference, &cfg, 6).unwrap();
    let shrunk = coverage_curve(&ConjugatePosterior { variance_scale: 0.25 }, &obs, &reference, &cfg, 6).unwrap();
    for (i, a) in cfg.alphas.iter().enumerate() {
        if (0.2..=0.8).contains(a) {
            assert!(prior.empirical[i] > prior.nominal[i], "prior at α={a}");
            assert!(shrunk.empirical[i] < shrunk.nominal[i], "shrunk at α={a}");
        }
    }
    // Analytic HPD: a region of mass 1−α under N(m, v/4) covers
    // 2Φ(z_{1−α/2}/2) − 1 of N(m, v).
    let phi = |x: f64| 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let i = cfg.alphas.iter().position(|a| (a - 0.5).abs() < 1e-9).unwrap();
    let expect = 2.0 * phi(0.674_489_75 / 2.0) - 1.0;
    assert!((shrunk.empirical[i] - expect).abs() < 0.05, "{} vs {expect}", shrunk.empirical[i]);
}

/// Point mass far from everything the reference produces.
struct FarAway;

impl PosteriorApproximation for FarAway {
    fn kind(&self) -> PosteriorKind {
        PosteriorKind::Analytic
    }
    fn theta_dim(&self) -> usize {
        1
    }
    fn is_normalized(&self) -> bool {
        true
    }
    fn unnorm_logpdf(&self, theta: &RealArray, _y: &[f64]) -> Result<Vec<f64>> {
        Ok(theta
            .data()
            .iter()
            .map(|t| if *t == 1e6 { 0.0 } else { f64::NEG_INFINITY })
            .collect())
    }
    fn sample(&self, _y: &[f64], n: usize, _seed: u64) -> Result<PosteriorSamples> {
        Ok(PosteriorSamples::exact(RealArray::column_vector(vec![1e6; n])))
    }
}

#[test]
fn point_mass_far_away_never_covers() {
    let (task, entries) = tg_setup(10);
    let reference = TaskReference::new(task, 9);
    let obs = column(&entries, 2);
    for a in [0.05, 0.5, 0.95] {
        assert_eq!(expected_coverage(&FarAway, &obs, &reference, a, 20, 100, 1).unwrap(), 0.0);
    }
}

#[test]
fn curve_ignores_observation_order() {
    let (task, entries) = tg_setup(12);
    let reference = TaskReference::new(task, 9);
    let mut obs = column(&entries, 1);
    let cfg = CoverageConfig {
        m: 30,
        k: 200,
        ..CoverageConfig::default()
    };
    let q = ConjugatePosterior { variance_scale: 2.0 };
    let a = coverage_curve(&q, &obs, &reference, &cfg, 3).unwrap();
    obs.reverse();
    let b = coverage_curve(&q, &obs, &reference, &cfg, 3).unwrap();
    assert_eq!(a.empirical, b.empirical);
}

/// Wraps a reference source and reverses the order of its draws.
struct Reversed<'a>(&'a TaskReference);

impl ReferenceSource for Reversed<'_> {
    fn draws(&self, obs: &Observation, m: usize) -> Result<Option<RealArray>> {
        Ok(self.0.draws(obs, m)?.map(|d| {
            let idx: Vec<usize> = (0..d.rows()).rev().collect();
            d.select_rows(&idx)
        }))
    }
}

#[test]
fn curve_ignores_reference_draw_order() {
    let (task, entries) = tg_setup(8);
    let reference = TaskReference::new(task, 9);
    let obs = column(&entries, 3);
    let cfg = CoverageConfig {
        m: 40,
        k: 200,
        ..CoverageConfig::default()
    };
    let q = ConjugatePosterior::exact();
    let a = coverage_curve(&q, &obs, &reference, &cfg, 3).unwrap();
    let b = coverage_curve(&q, &obs, &Reversed(&reference), &cfg, 3).unwrap();
    assert_eq!(a.empirical, b.empirical);
}

/// Every reference draw fails its diagnostics.
struct Failing;

impl ReferenceSource for Failing {
    fn draws(&self, _obs: &Observation, _m: usize) -> Result<Option<RealArray>> {
        Ok(None)
    }
}

#[test]
fn failed_references_are_excluded() {
    let (_, entries) = tg_setup(3);
    let obs = column(&entries, 0);
    assert!(coverage_curve(&ConjugatePosterior::exact(), &obs, &Failing, &CoverageConfig::default(), 1).is_err());
}
