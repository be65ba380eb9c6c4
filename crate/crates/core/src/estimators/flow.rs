use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mlp::{mlp_forward, MlpLayout};
use super::spline::{self, SplineConfig};
use crate::diffcore::{Graph, RealArray, Reduce, Var};
use crate::error::{Error, Result};
use crate::optim::Param;
use crate::seeding::{derived_rng, Rng};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Hidden layers per conditioner.
    pub depth: usize,
    pub spline: SplineConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            hidden: 64,
            depth: 2,
            spline: SplineConfig::default(),
        }
    }
}

/// Conditional density `q(target | context)` built from coupling layers with
/// rational-quadratic splines over a standard normal base. Works in
/// standardized coordinates; the estimator bundle handles the rescaling.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalFlow {
    dim: usize,
    context_dim: usize,
    config: FlowConfig,
    params: Vec<Param>,
}

/// Which coordinates a layer conditions on and which it transforms. Odd
/// layers see the coordinates in reverse order, so every coordinate is
/// transformed by some layer whenever there are at least two layers.
pub fn layer_split(dim: usize, layer: usize) -> (Vec<usize>, Vec<usize>) {
    let order: Vec<usize> = if layer % 2 == 0 {
        (0..dim).collect()
    } else {
        (0..dim).rev().collect()
    };
    let half = dim / 2;
    (order[..half].to_vec(), order[half..].to_vec())
}

impl ConditionalFlow {
    pub fn new(dim: usize, context_dim: usize, config: FlowConfig, seed: u64) -> Result<Self> {
        if dim == 0 || config.layers == 0 || config.spline.bins < 2 {
            return Err(Error::invalid("flow needs dim ≥ 1, at least one layer and two bins"));
        }
        let mut params = Vec::new();
        for l in 0..config.layers {
            let mut rng = derived_rng(seed, &["flow-layer".into(), l.into()]);
            let layout = Self::conditioner_layout(dim, context_dim, &config, l);
            params.extend(layout.init(&format!("layer{l}"), true, &mut rng));
        }
        Ok(Self {
            dim,
            context_dim,
            config,
            params,
        })
    }

    /// Rebuilds a flow around existing parameters, checking their shapes.
    pub fn from_params(dim: usize, context_dim: usize, config: FlowConfig, params: Vec<Param>) -> Result<Self> {
        let template = Self::new(dim, context_dim, config, 0)?;
        check_shapes(&template.params, &params)?;
        Ok(Self { params, ..template })
    }

    fn conditioner_layout(dim: usize, context_dim: usize, config: &FlowConfig, layer: usize) -> MlpLayout {
        let (ids, trs) = layer_split(dim, layer);
        MlpLayout {
            input: ids.len() + context_dim,
            hidden: vec![config.hidden; config.depth],
            output: trs.len() * config.spline.params_per_dim(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Param] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn per_layer(&self) -> usize {
        2 * (self.config.depth + 1)
    }

    fn conditioner_input(&self, g: &mut Graph, z: Var, context: Var, layer: usize) -> Result<Var> {
        let (ids, _) = layer_split(self.dim, layer);
        let n = g.value(z).rows();
        let mut parts = Vec::with_capacity(2);
        if !ids.is_empty() {
            parts.push(g.slice(z, &ids)?);
        }
        if self.context_dim > 0 {
            parts.push(context);
        }
        Ok(match parts.len() {
            0 => g.constant(RealArray::zeros(n, 0)),
            1 => parts[0],
            _ => g.concat(&parts)?,
        })
    }

    /// Pushes target rows through every coupling layer. Returns the base
    /// point and the summed log-determinant (`None` only with zero layers).
    fn forward_graph(&self, g: &mut Graph, params: &[Var], target: Var, context: Var) -> Result<(Var, Option<Var>)> {
        let (n, d) = (g.value(target).rows(), self.dim);
        if g.value(target).cols() != d {
            return Err(Error::Dimension {
                what: "flow target",
                expected: d,
                got: g.value(target).cols(),
            });
        }
        if g.value(context).cols() != self.context_dim || g.value(context).rows() != n {
            return Err(Error::Dimension {
                what: "flow context",
                expected: self.context_dim,
                got: g.value(context).cols(),
            });
        }
        let per = self.per_layer();
        let mut z = target;
        let mut total: Option<Var> = None;
        for l in 0..self.config.layers {
            let input = self.conditioner_input(g, z, context, l)?;
            let raw = mlp_forward(g, input, &params[l * per..(l + 1) * per])?;
            let (_, trs) = layer_split(d, l);
            let out = coupling(g, z, raw, &trs, self.config.spline, l)?;
            z = g.slice_range(out, 0, d)?;
            let ld = g.slice(out, &[d])?;
            total = Some(match total {
                Some(t) => g.add(t, ld)?,
                None => ld,
            });
        }
        Ok((z, total))
    }

    /// Log density of each target row given the matching context row, as a
    /// `[N, 1]` node. `params` holds one var per flow parameter.
    pub fn log_prob_graph(&self, g: &mut Graph, params: &[Var], target: Var, context: Var) -> Result<Var> {
        let (z, total) = self.forward_graph(g, params, target, context)?;
        let sq = g.mul(z, z)?;
        let ss = g.sum(sq, Reduce::PerRow);
        let base = g.scale(ss, -0.5);
        let c = g.constant(RealArray::scalar(-0.5 * self.dim as f64 * LN_2PI));
        let base = g.add(base, c)?;
        match total {
            Some(t) => Ok(g.add(base, t)?),
            None => Ok(base),
        }
    }

    /// Maps target rows to the base space.
    pub fn forward(&self, target: &RealArray, context: &RealArray) -> Result<RealArray> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let t = g.constant(target.clone());
        let c = g.constant(context.clone());
        let (z, _) = self.forward_graph(&mut g, &params, t, c)?;
        Ok(g.value(z).clone())
    }

    /// Forward-only log densities.
    pub fn log_prob(&self, target: &RealArray, context: &RealArray) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let t = g.constant(target.clone());
        let c = g.constant(context.clone());
        let lp = self.log_prob_graph(&mut g, &params, t, c)?;
        Ok(g.value(lp).data().to_vec())
    }

    /// Maps base points to target space, one context row per point.
    pub fn inverse(&self, base: &RealArray, context: &RealArray) -> Result<RealArray> {
        let (n, d) = (base.rows(), self.dim);
        let per = self.per_layer();
        let p = self.config.spline.params_per_dim();
        let mut z = base.clone();
        for l in (0..self.config.layers).rev() {
            let mut g = Graph::new();
            let params: Vec<Var> = self.params[l * per..(l + 1) * per]
                .iter()
                .map(|q| g.constant(q.value.clone()))
                .collect();
            let zv = g.constant(z.clone());
            let cv = g.constant(context.clone());
            let input = self.conditioner_input(&mut g, zv, cv, l)?;
            let raw = mlp_forward(&mut g, input, &params)?;
            let raw = g.value(raw);
            if !raw.all_finite() {
                return Err(Error::NonFinite(format!("spline parameters in coupling layer {l}")));
            }
            let (_, trs) = layer_split(d, l);
            for r in 0..n {
                let rr = raw.row(r);
                for (k, &j) in trs.iter().enumerate() {
                    let (u, _) = spline::inverse(z.get(r, j), &rr[k * p..(k + 1) * p], &self.config.spline);
                    z.set(r, j, u);
                }
            }
        }
        Ok(z)
    }

    /// `n` draws given a single context row.
    pub fn sample(&self, context: &[f64], n: usize, rng: &mut Rng) -> Result<RealArray> {
        if context.len() != self.context_dim {
            return Err(Error::Dimension {
                what: "flow context",
                expected: self.context_dim,
                got: context.len(),
            });
        }
        let base: Vec<f64> = (0..n * self.dim).map(|_| StandardNormal.sample(rng)).collect();
        let base = RealArray::matrix(n, self.dim, base);
        let ctx = repeat_row(context, n);
        self.inverse(&base, &ctx)
    }
}

pub(crate) fn repeat_row(row: &[f64], n: usize) -> RealArray {
    let mut data = Vec::with_capacity(n * row.len());
    for _ in 0..n {
        data.extend_from_slice(row);
    }
    RealArray::matrix(n, row.len(), data)
}

pub(crate) fn check_shapes(expected: &[Param], got: &[Param]) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Format(format!(
            "expected {} parameter arrays, found {}",
            expected.len(),
            got.len()
        )));
    }
    for (e, g) in expected.iter().zip(got) {
        if e.value.shape() != g.value.shape() {
            return Err(Error::Format(format!(
                "parameter `{}` has shape {:?}, expected {:?}",
                g.name,
                g.value.shape(),
                e.value.shape()
            )));
        }
    }
    Ok(())
}

/// Coupling transform as a single graph node. Output is `[N, d + 1]`: the
/// transformed rows followed by a column with the summed log-determinant.
fn coupling(g: &mut Graph, z: Var, raw: Var, transformed: &[usize], cfg: SplineConfig, layer: usize) -> Result<Var> {
    let zv = g.value(z);
    let pv = g.value(raw);
    if !pv.all_finite() {
        return Err(Error::NonFinite(format!("spline parameters in coupling layer {layer}")));
    }
    let (n, d) = (zv.rows(), zv.cols());
    let p = cfg.params_per_dim();
    let mut out = Vec::with_capacity(n * (d + 1));
    for r in 0..n {
        let zr = zv.row(r);
        let pr = pv.row(r);
        let start = out.len();
        out.extend_from_slice(zr);
        let mut ld = 0.0;
        for (k, &j) in transformed.iter().enumerate() {
            let (v, l) = spline::forward(zr[j], &pr[k * p..(k + 1) * p], &cfg);
            out[start + j] = v;
            ld += l;
        }
        out.push(ld);
    }
    let value = RealArray::matrix(n, d + 1, out);
    if !value.all_finite() {
        return Err(Error::NonFinite(format!("output of coupling layer {layer}")));
    }
    if !(g.needs_grad(z) || g.needs_grad(raw)) {
        return Ok(g.custom(&[z, raw], value, |_| Vec::new()));
    }
    let (zv, pv) = (zv.clone(), pv.clone());
    let transformed = transformed.to_vec();
    Ok(g.custom(&[z, raw], value, move |adj| {
        let mut gz = RealArray::zeros(n, d);
        let mut gp = RealArray::zeros(n, pv.cols());
        for r in 0..n {
            let ar = adj.row(r);
            gz.row_mut(r).copy_from_slice(&ar[..d]);
            let gl = ar[d];
            let zr = zv.row(r);
            let pr = pv.row(r);
            let gpr = gp.row_mut(r);
            for (k, &j) in transformed.iter().enumerate() {
                let sl = k * p..(k + 1) * p;
                let res = spline::forward_with_grad(zr[j], &pr[sl.clone()], &cfg, ar[j], gl, &mut gpr[sl]);
                gz.set(r, j, res.du);
            }
        }
        vec![gz, gp]
    }))
}
