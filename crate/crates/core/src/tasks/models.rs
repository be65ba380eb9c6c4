//! Simulators, transforms, summaries and tractable likelihoods of the
//! individual models.

use rand_distr::{Distribution, StandardNormal, StudentT};

use crate::error::{Error, Result};
use crate::seeding::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn std_normals(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Arithmetic mean and sample standard deviation (divisor `n − 1`).
pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let ss = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    (m, (ss / (n - 1.0)).sqrt())
}

/// Median with the midpoint convention for even lengths.
pub fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub mod tg {
    //! Gaussian location model: `θ ∼ N(0, 5²)`, `x_i ∼ N(θ, 1)`, `i = 1..100`.

    use super::*;

    pub const N: usize = 100;
    pub const PRIOR_VAR: f64 = 25.0;

    pub fn simulate(theta: f64, rng: &mut Rng) -> Vec<f64> {
        (0..N)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                theta + z
            })
            .collect()
    }

    pub fn summary(x: &[f64]) -> Vec<f64> {
        let (m, s) = mean_sd(x);
        vec![m, s]
    }

    pub fn draw_noise(rng: &mut Rng) -> Vec<f64> {
        std_normals(N, rng)
    }

    /// `x + σ z`; exactly `x` at `σ = 0`.
    pub fn transform(x: &[f64], sigma: u8, z: &[f64]) -> Vec<f64> {
        if sigma == 0 {
            return x.to_vec();
        }
        let s = sigma as f64;
        x.iter().zip(z).map(|(a, b)| a + s * b).collect()
    }

    /// Conjugate posterior `(mean, variance)` of `θ` given iid unit-variance
    /// observations `y`. No observations gives the prior.
    pub fn posterior(y: &[f64]) -> (f64, f64) {
        let n = y.len() as f64;
        let precision = 1.0 / PRIOR_VAR + n;
        let sum: f64 = y.iter().sum();
        (sum / precision, 1.0 / precision)
    }

    pub fn log_likelihood(theta: f64, y: &[f64]) -> f64 {
        y.iter()
            .map(|v| -0.5 * (v - theta) * (v - theta) - 0.5 * LN_2PI)
            .sum()
    }
}

pub mod sv {
    //! Stochastic volatility: a Gaussian random walk `s` with step precision
    //! `τ²` drives Student-t observations with scale `exp(s_i)`.

    use super::*;

    pub const N: usize = 100;
    /// 0-based indices of the volatility shock window (1-based 50..=65).
    pub const WINDOW: std::ops::RangeInclusive<usize> = 49..=64;

    /// Latent path `s_1 ∼ N(0, τ⁻²)`, `s_i ∼ N(s_{i−1}, τ⁻²)`.
    pub fn latent_path(tau: f64, rng: &mut Rng) -> Vec<f64> {
        let step = 1.0 / tau;
        let mut s = 0.0;
        (0..N)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                s += step * z;
                s
            })
            .collect()
    }

    pub fn simulate(tau: f64, nu: f64, rng: &mut Rng) -> Result<Vec<f64>> {
        if !(tau > 0.0 && nu > 0.0) {
            return Err(Error::invalid(format!(
                "stochastic volatility needs τ > 0 and ν > 0, got ({tau}, {nu})"
            )));
        }
        let s = latent_path(tau, rng);
        let t = StudentT::new(nu).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(s.iter().map(|si| si.exp() * t.sample(rng)).collect())
    }

    /// Window entries scaled by `5σ` for `σ ≥ 1`; identity at `σ = 0`.
    pub fn transform(x: &[f64], sigma: u8) -> Vec<f64> {
        let mut y = x.to_vec();
        if sigma > 0 {
            let f = 5.0 * sigma as f64;
            for v in &mut y[WINDOW] {
                *v *= f;
            }
        }
        y
    }

    /// Mean, sample sd, median and unscaled median absolute deviation.
    pub fn summary(x: &[f64]) -> Vec<f64> {
        let (m, s) = mean_sd(x);
        let med = median(x);
        let dev: Vec<f64> = x.iter().map(|v| (v - med).abs()).collect();
        vec![m, s, med, median(&dev)]
    }

    /// Log density of a location-0 Student-t with the given scale.
    pub fn student_t_logpdf(x: f64, nu: f64, log_scale: f64) -> f64 {
        let z = x * (-log_scale).exp();
        libm::lgamma(0.5 * (nu + 1.0))
            - libm::lgamma(0.5 * nu)
            - 0.5 * (nu * std::f64::consts::PI).ln()
            - log_scale
            - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p()
    }

    /// `log p(s | τ) + Σ log t_ν(y_i; 0, e^{s_i})`.
    pub fn log_joint_given_theta(tau: f64, nu: f64, s: &[f64], y: &[f64]) -> f64 {
        let ln_tau = tau.ln();
        let mut lp = 0.0;
        let mut prev = 0.0;
        for &si in s {
            let d = (si - prev) * tau;
            lp += -0.5 * d * d + ln_tau - 0.5 * LN_2PI;
            prev = si;
        }
        let c = libm::lgamma(0.5 * (nu + 1.0)) - libm::lgamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln();
        for (&si, &yi) in s.iter().zip(y) {
            let z = yi * (-si).exp();
            lp += c - si - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p();
        }
        lp
    }
}

pub mod slcp {
    //! Five-parameter model whose four iid bivariate normal draws have mean
    //! `(θ₁, θ₂)` and covariance built from `s₁ = θ₃²`, `s₂ = θ₄²`,
    //! `ρ = tanh θ₅`.

    use super::*;

    pub const DRAWS: usize = 4;
    pub const JITTER: f64 = 1e-6;
    pub const NOISE_SCALE: f64 = 100.0;

    /// `[S₁₁, S₁₂, S₂₂]`, with jitter on the diagonal when singular.
    pub fn covariance(theta: &[f64]) -> [f64; 3] {
        let s1 = theta[2] * theta[2];
        let s2 = theta[3] * theta[3];
        let rho = theta[4].tanh();
        let (mut a, b, mut c) = (s1 * s1, rho * s1 * s2, s2 * s2);
        if !(a * c - b * b > 0.0) {
            a += JITTER;
            c += JITTER;
        }
        [a, b, c]
    }

    fn cholesky(s: [f64; 3]) -> [f64; 3] {
        let l11 = s[0].sqrt();
        let l21 = s[1] / l11;
        let l22 = (s[2] - l21 * l21).max(0.0).sqrt();
        [l11, l21, l22]
    }

    /// Eight reals in draw-major order.
    pub fn simulate(theta: &[f64], rng: &mut Rng) -> Vec<f64> {
        let l = cholesky(covariance(theta));
        let mut x = Vec::with_capacity(2 * DRAWS);
        for _ in 0..DRAWS {
            let z1: f64 = StandardNormal.sample(rng);
            let z2: f64 = StandardNormal.sample(rng);
            x.push(theta[0] + l[0] * z1);
            x.push(theta[1] + l[1] * z1 + l[2] * z2);
        }
        x
    }

    pub fn draw_noise(rng: &mut Rng) -> Vec<f64> {
        std_normals(2 * DRAWS, rng)
    }

    /// `x_i + 100σ c_i z_i` with `c_3 = √2` (variance-2 noise on the third
    /// draw) and `c_i = 1` otherwise.
    pub fn transform(x: &[f64], sigma: u8, z: &[f64]) -> Vec<f64> {
        if sigma == 0 {
            return x.to_vec();
        }
        let s = NOISE_SCALE * sigma as f64;
        x.iter()
            .zip(z)
            .enumerate()
            .map(|(k, (a, b))| {
                let c = if k / 2 == 2 { std::f64::consts::SQRT_2 } else { 1.0 };
                a + s * c * b
            })
            .collect()
    }

    pub fn log_likelihood(theta: &[f64], y: &[f64]) -> f64 {
        let [a, b, c] = covariance(theta);
        let det = a * c - b * b;
        let norm = -LN_2PI - 0.5 * det.ln();
        y.chunks_exact(2)
            .map(|p| {
                let (u, v) = (p[0] - theta[0], p[1] - theta[1]);
                let q = (c * u * u - 2.0 * b * u * v + a * v * v) / det;
                norm - 0.5 * q
            })
            .sum()
    }
}
