//! Monotone rational-quadratic spline on `[−B, B]` with identity tails.
//!
//! Each transformed scalar takes `3K − 1` unconstrained parameters: `K` bin
//! widths, `K` bin heights (both through a softmax with a floor) and `K − 1`
//! interior knot derivatives (through a shifted softplus, so that all-zero
//! parameters give the identity map). Boundary derivatives are fixed at 1,
//! which makes the map continuously differentiable into the linear tails.

use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, softplus};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineConfig {
    pub bins: usize,
    pub tail_bound: f64,
    pub min_bin_width: f64,
    pub min_bin_height: f64,
    pub min_derivative: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            bins: 8,
            tail_bound: 5.0,
            min_bin_width: 1e-3,
            min_bin_height: 1e-3,
            min_derivative: 1e-3,
        }
    }
}

impl SplineConfig {
    pub fn params_per_dim(&self) -> usize {
        3 * self.bins - 1
    }

    /// Softplus offset making a zero raw derivative map to exactly 1.
    fn derivative_shift(&self) -> f64 {
        (1.0 - self.min_derivative).exp_m1().ln()
    }
}

/// Knot positions and derivatives decoded from raw parameters.
struct Knots {
    /// `K + 1` x-positions from `−B` to `B`.
    cw: Vec<f64>,
    /// `K + 1` y-positions.
    ch: Vec<f64>,
    /// `K + 1` derivatives, the first and last equal to 1.
    d: Vec<f64>,
    /// Softmax probabilities of widths and heights, kept for the backward pass.
    pw: Vec<f64>,
    ph: Vec<f64>,
}

fn softmax(raw: &[f64]) -> Vec<f64> {
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|r| (r - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn knots_from(p: &[f64], min: f64, bound: f64) -> Vec<f64> {
    let k = p.len();
    let mut c = Vec::with_capacity(k + 1);
    c.push(-bound);
    let mut acc = 0.0;
    for &pi in &p[..k - 1] {
        acc += min + (1.0 - min * k as f64) * pi;
        c.push(2.0 * bound * acc - bound);
    }
    c.push(bound);
    c
}

impl Knots {
    fn new(raw: &[f64], cfg: &SplineConfig) -> Self {
        let k = cfg.bins;
        let pw = softmax(&raw[..k]);
        let ph = softmax(&raw[k..2 * k]);
        let shift = cfg.derivative_shift();
        let mut d = Vec::with_capacity(k + 1);
        d.push(1.0);
        d.extend(raw[2 * k..].iter().map(|r| cfg.min_derivative + softplus(r + shift)));
        d.push(1.0);
        Self {
            cw: knots_from(&pw, cfg.min_bin_width, cfg.tail_bound),
            ch: knots_from(&ph, cfg.min_bin_height, cfg.tail_bound),
            d,
            pw,
            ph,
        }
    }
}

/// Index `k` with `knots[k] ≤ x < knots[k+1]`, clamped to the last bin.
fn find_bin(knots: &[f64], x: f64) -> usize {
    let k = knots.len() - 1;
    knots[1..k].iter().take_while(|&&c| c <= x).count()
}

/// Per-bin quantities of the forward map at one point.
struct Local {
    w: f64,
    h: f64,
    s: f64,
    t: f64,
    d0: f64,
    d1: f64,
    a: f64,
    den: f64,
    q: f64,
}

impl Local {
    fn at(kn: &Knots, bin: usize, u: f64) -> Self {
        let w = kn.cw[bin + 1] - kn.cw[bin];
        let h = kn.ch[bin + 1] - kn.ch[bin];
        let s = h / w;
        let t = (u - kn.cw[bin]) / w;
        let (d0, d1) = (kn.d[bin], kn.d[bin + 1]);
        let tt = t * (1.0 - t);
        let a = s * t * t + d0 * tt;
        let den = s + (d0 + d1 - 2.0 * s) * tt;
        let q = d1 * t * t + 2.0 * s * tt + d0 * (1.0 - t) * (1.0 - t);
        Self {
            w,
            h,
            s,
            t,
            d0,
            d1,
            a,
            den,
            q,
        }
    }

    fn logdet(&self) -> f64 {
        2.0 * self.s.ln() + self.q.ln() - 2.0 * self.den.ln()
    }
}

fn inside(u: f64, cfg: &SplineConfig) -> bool {
    u >= -cfg.tail_bound && u <= cfg.tail_bound
}

/// `(v, log dv/du)` at `u`.
pub fn forward(u: f64, raw: &[f64], cfg: &SplineConfig) -> (f64, f64) {
    if !inside(u, cfg) {
        return (u, 0.0);
    }
    let kn = Knots::new(raw, cfg);
    let bin = find_bin(&kn.cw, u);
    let l = Local::at(&kn, bin, u);
    (kn.ch[bin] + l.h * l.a / l.den, l.logdet())
}

/// Inverse map: `(u, log du/dv)`, the log-derivative being that of the
/// inverse (the negative of the forward one at `u`).
pub fn inverse(v: f64, raw: &[f64], cfg: &SplineConfig) -> (f64, f64) {
    if !inside(v, cfg) {
        return (v, 0.0);
    }
    let kn = Knots::new(raw, cfg);
    let bin = find_bin(&kn.ch, v);
    let w = kn.cw[bin + 1] - kn.cw[bin];
    let h = kn.ch[bin + 1] - kn.ch[bin];
    let s = h / w;
    let (d0, d1) = (kn.d[bin], kn.d[bin + 1]);
    let dv = v - kn.ch[bin];
    let m = d0 + d1 - 2.0 * s;
    let a = dv * m + h * (s - d0);
    let b = h * d0 - dv * m;
    let c = -s * dv;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let t = (2.0 * c / (-b - disc.sqrt())).clamp(0.0, 1.0);
    let u = t * w + kn.cw[bin];
    let l = Local::at(&kn, bin, u);
    (u, -l.logdet())
}

/// Gradients of `gv · v + gl · logdet` at one point.
pub struct SplineGrad {
    pub v: f64,
    pub logdet: f64,
    pub du: f64,
}

/// Forward value plus reverse-mode gradients; raw-parameter gradients are
/// written into `graw` (length `3K − 1`, overwritten).
pub fn forward_with_grad(u: f64, raw: &[f64], cfg: &SplineConfig, gv: f64, gl: f64, graw: &mut [f64]) -> SplineGrad {
    graw.iter_mut().for_each(|g| *g = 0.0);
    if !inside(u, cfg) {
        return SplineGrad {
            v: u,
            logdet: 0.0,
            du: gv,
        };
    }
    let k = cfg.bins;
    let kn = Knots::new(raw, cfg);
    let bin = find_bin(&kn.cw, u);
    let l = Local::at(&kn, bin, u);
    let v = kn.ch[bin] + l.h * l.a / l.den;
    let logdet = l.logdet();

    let Local {
        w,
        h,
        s,
        t,
        d0,
        d1,
        a,
        den,
        q,
    } = l;
    let tt = t * (1.0 - t);
    let dtt = 1.0 - 2.0 * t;
    let m = d0 + d1 - 2.0 * s;
    let dv_da = h / den;
    let dv_dden = -h * a / (den * den);

    let g_s = gv * (dv_da * t * t + dv_dden * (1.0 - 2.0 * tt))
        + gl * (2.0 / s + 2.0 * tt / q - 2.0 * (1.0 - 2.0 * tt) / den);
    let g_d0 = gv * (dv_da * tt + dv_dden * tt) + gl * ((1.0 - t) * (1.0 - t) / q - 2.0 * tt / den);
    let g_d1 = gv * dv_dden * tt + gl * (t * t / q - 2.0 * tt / den);
    let g_t = gv * (dv_da * (2.0 * s * t + d0 * dtt) + dv_dden * m * dtt)
        + gl * ((2.0 * d1 * t + 2.0 * s * dtt - 2.0 * d0 * (1.0 - t)) / q - 2.0 * m * dtt / den);
    let g_h = gv * a / den + g_s / w;
    let g_w = -g_s * s / w - g_t * t / w;
    let g_cw = -g_t / w;
    let g_ch = gv;
    let du = g_t / w;

    // Knot-position adjoints: w = cw[k+1] − cw[k], h = ch[k+1] − ch[k].
    let mut gcw = vec![0.0; k + 1];
    gcw[bin] += g_cw - g_w;
    gcw[bin + 1] += g_w;
    let mut gch = vec![0.0; k + 1];
    gch[bin] += g_ch - g_h;
    gch[bin + 1] += g_h;

    softmax_knot_backward(&kn.pw, &gcw, cfg.min_bin_width, cfg.tail_bound, &mut graw[..k]);
    softmax_knot_backward(&kn.ph, &gch, cfg.min_bin_height, cfg.tail_bound, &mut graw[k..2 * k]);

    let shift = cfg.derivative_shift();
    if bin >= 1 {
        graw[2 * k + bin - 1] += g_d0 * sigmoid(raw[2 * k + bin - 1] + shift);
    }
    if bin + 1 <= k - 1 {
        graw[2 * k + bin] += g_d1 * sigmoid(raw[2 * k + bin] + shift);
    }
    SplineGrad { v, logdet, du }
}

/// Chains knot adjoints through `knot_j = 2B Σ_{i<j} (min + (1 − K·min) p_i) − B`
/// (interior knots only; the end knots are constants) and the softmax.
fn softmax_knot_backward(p: &[f64], gknot: &[f64], min: f64, bound: f64, out: &mut [f64]) {
    let k = p.len();
    // gp_i = (1 − K·min)·2B·Σ_{j=i+1}^{K−1} gknot_j
    let mut gp = vec![0.0; k];
    let mut acc = 0.0;
    for i in (0..k).rev() {
        gp[i] = acc;
        if i >= 1 && i <= k - 1 {
            acc += gknot[i];
        }
    }
    let scale = (1.0 - min * k as f64) * 2.0 * bound;
    let dot: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum::<f64>() * scale;
    for i in 0..k {
        out[i] = p[i] * (gp[i] * scale - dot);
    }
}
