use serde::{Deserialize, Serialize};

/// Convergence summary of a multi-chain run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcDiagnostics {
    /// Split-chain potential scale reduction, per coordinate.
    pub rhat: Vec<f64>,
    /// Effective sample size, per coordinate.
    pub ess: Vec<f64>,
    /// Post-warm-up acceptance rate, per chain.
    pub acceptance: Vec<f64>,
    pub rhat_limit: f64,
}

impl McmcDiagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().cloned().fold(f64::NAN, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.ess.iter().cloned().fold(f64::NAN, f64::min)
    }

    /// Every coordinate's R-hat within the limit. Empty runs pass vacuously.
    pub fn passed(&self) -> bool {
        self.rhat.iter().all(|r| r.is_finite() && *r <= self.rhat_limit)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Split R-hat of one coordinate: each chain is halved, then the classic
/// between/within variance ratio is taken over the halves.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let half = chains.iter().map(Vec::len).min().unwrap_or(0) / 2;
    if half < 2 {
        return f64::NAN;
    }
    let parts: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[half..2 * half]])
        .collect();
    let n = half as f64;
    let means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let w = mean(&parts.iter().map(|p| var(p)).collect::<Vec<_>>());
    let b = n * var(&means);
    if w == 0.0 {
        // Constant chains: agreeing constants are converged, differing are not.
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

fn autocovariance(xs: &[f64], max_lag: usize) -> Vec<f64> {
    let n = xs.len();
    let m = mean(xs);
    (0..=max_lag)
        .map(|t| {
            (0..n - t).map(|i| (xs[i] - m) * (xs[i + t] - m)).sum::<f64>() / n as f64
        })
        .collect()
}

/// Multi-chain effective sample size with Geyer's initial monotone
/// sequence truncation.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let max_lag = (n - 1).min(1000);
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c, max_lag)).collect();
    let nf = n as f64;
    let w = mean(&acov.iter().map(|a| a[0] * nf / (nf - 1.0)).collect::<Vec<_>>());
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let b_over_n = if m > 1 { var(&means) } else { 0.0 };
    let var_plus = (nf - 1.0) / nf * w + b_over_n;
    if var_plus <= 0.0 {
        return (m * n) as f64;
    }
    let rho = |t: usize| -> f64 {
        let mean_acov = acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };
    // Sum consecutive pairs while positive, enforcing monotone decrease.
    let mut sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 <= max_lag {
        let mut pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        if pair > prev_pair {
            pair = prev_pair;
        }
        sum += pair;
        prev_pair = pair;
        t += 2;
    }
    let tau = -1.0 + 2.0 * sum;
    let tau = tau.max(1.0 / (m as f64 * nf).log10().max(1.0));
    (m as f64 * nf) / tau
}
