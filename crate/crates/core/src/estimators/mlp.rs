use rand::Rng as _;

use crate::diffcore::{Graph, RealArray, Var};
use crate::error::Result;
use crate::optim::Param;
use crate::seeding::Rng;

/// Fully connected relu network shape.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayout {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpLayout {
    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }

    /// Parameters in order `w0, b0, w1, b1, …`, drawn uniformly on
    /// `±1/√fan_in`. With `zero_output` the final layer starts at zero.
    pub fn init(&self, prefix: &str, zero_output: bool, rng: &mut Rng) -> Vec<Param> {
        let w = self.widths();
        let mut out = Vec::with_capacity(2 * self.n_layers());
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (w[l], w[l + 1]);
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let last = l + 1 == self.n_layers();
            let mut draw = |n: usize| -> Vec<f64> {
                if last && zero_output {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| bound * (2.0 * rng.random::<f64>() - 1.0)).collect()
                }
            };
            let wv = draw(fan_in * fan_out);
            let bv = draw(fan_out);
            out.push(Param::new(format!("{prefix}.w{l}"), RealArray::matrix(fan_in, fan_out, wv)));
            out.push(Param::new(format!("{prefix}.b{l}"), RealArray::matrix(1, fan_out, bv)));
        }
        out
    }
}

/// Forward pass with relu between layers and a linear output.
pub fn mlp_forward(g: &mut Graph, x: Var, params: &[Var]) -> Result<Var> {
    let n_layers = params.len() / 2;
    let mut h = x;
    for l in 0..n_layers {
        h = g.affine(h, params[2 * l], params[2 * l + 1])?;
        if l + 1 < n_layers {
            h = g.relu(h);
        }
    }
    Ok(h)
}
