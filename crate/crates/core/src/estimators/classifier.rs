use serde::{Deserialize, Serialize};

use super::flow::check_shapes;
use super::mlp::{mlp_forward, MlpLayout};
use crate::diffcore::{Graph, RealArray, Reduce, Var};
use crate::error::{Error, Result};
use crate::optim::Param;
use crate::seeding::derived_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { hidden: vec![64; 3] }
    }
}

/// MLP on `(θ, x)` whose logit estimates `log p(x | θ) − log p(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioClassifier {
    theta_dim: usize,
    x_dim: usize,
    config: ClassifierConfig,
    params: Vec<Param>,
}

impl RatioClassifier {
    pub fn new(theta_dim: usize, x_dim: usize, config: ClassifierConfig, seed: u64) -> Self {
        let layout = MlpLayout {
            input: theta_dim + x_dim,
            hidden: config.hidden.clone(),
            output: 1,
        };
        let params = layout.init("classifier", false, &mut derived_rng(seed, &["classifier".into()]));
        Self {
            theta_dim,
            x_dim,
            config,
            params,
        }
    }

    pub fn from_params(theta_dim: usize, x_dim: usize, config: ClassifierConfig, params: Vec<Param>) -> Result<Self> {
        let template = Self::new(theta_dim, x_dim, config, 0);
        check_shapes(&template.params, &params)?;
        Ok(Self { params, ..template })
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Param] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// `[N, 1]` logits for paired rows.
    pub fn logit_graph(&self, g: &mut Graph, params: &[Var], theta: Var, x: Var) -> Result<Var> {
        let input = g.concat(&[theta, x])?;
        if g.value(input).cols() != self.theta_dim + self.x_dim {
            return Err(Error::Dimension {
                what: "classifier input",
                expected: self.theta_dim + self.x_dim,
                got: g.value(input).cols(),
            });
        }
        mlp_forward(g, input, params)
    }

    pub fn logit(&self, theta: &RealArray, x: &RealArray) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let t = g.constant(theta.clone());
        let xv = g.constant(x.clone());
        let l = self.logit_graph(&mut g, &params, t, xv)?;
        Ok(g.value(l).data().to_vec())
    }

    /// Contrastive binary cross-entropy. Row `i` of the batch is a joint pair
    /// (label 1); pairing `x_i` with `θ_{(i+1) mod m}` gives the marginal
    /// pairs (label 0).
    pub fn loss_graph(&self, g: &mut Graph, params: &[Var], theta: &RealArray, x: &RealArray) -> Result<Var> {
        let m = theta.rows();
        if m < 2 {
            return Err(Error::invalid("ratio estimation needs a batch of at least 2 pairs"));
        }
        let shifted: Vec<usize> = (0..m).map(|i| (i + 1) % m).collect();
        let mut th_data = theta.data().to_vec();
        th_data.extend_from_slice(theta.select_rows(&shifted).data());
        let both_theta = RealArray::matrix(2 * m, theta.cols(), th_data);
        let mut x_data = x.data().to_vec();
        x_data.extend_from_slice(x.data());
        let both_x = RealArray::matrix(2 * m, x.cols(), x_data);

        let tv = g.constant(both_theta);
        let xv = g.constant(both_x);
        let logits = self.logit_graph(g, params, tv, xv)?;
        // softplus(−l) for joint pairs, softplus(l) for marginal pairs.
        let signs: Vec<f64> = (0..2 * m).map(|i| if i < m { -1.0 } else { 1.0 }).collect();
        let sv = g.constant(RealArray::column_vector(signs));
        let signed = g.mul(logits, sv)?;
        let sp = g.softplus(signed);
        Ok(g.mean(sp, Reduce::All))
    }
}
