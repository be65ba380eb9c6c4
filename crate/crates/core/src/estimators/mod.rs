//! Conditional density and ratio estimators: a coupling spline flow (used
//! for posterior and likelihood estimation) and an MLP ratio classifier,
//! with their training losses, input standardization and a versioned binary
//! file format.

mod classifier;
mod flow;
mod mlp;
pub mod spline;
mod standardizer;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use classifier::{ClassifierConfig, RatioClassifier};
pub use flow::{layer_split, ConditionalFlow, FlowConfig};
pub use mlp::{mlp_forward, MlpLayout};
pub use spline::SplineConfig;
pub use standardizer::Standardizer;

use crate::diffcore::{Graph, RealArray, Reduce, Var};
use crate::error::{Error, Result};
use crate::optim::{train, PairDataset, Param, TrainConfig, TrainLog, Trainable};
use crate::seeding::{derive_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "NPE")]
    Npe,
    #[serde(rename = "NLE")]
    Nle,
    #[serde(rename = "NRE")]
    Nre,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Npe => "NPE",
            EstimatorKind::Nle => "NLE",
            EstimatorKind::Nre => "NRE",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub flow: FlowConfig,
    pub classifier: ClassifierConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    Flow(ConditionalFlow),
    Classifier(RatioClassifier),
}

/// Mean negative log density of `target` rows given `context` rows.
pub fn flow_nll(g: &mut Graph, flow: &ConditionalFlow, params: &[Var], target: Var, context: Var) -> Result<Var> {
    let lp = flow.log_prob_graph(g, params, target, context)?;
    let m = g.mean(lp, Reduce::All);
    Ok(g.scale(m, -1.0))
}

/// Posterior-estimation loss `−(1/m) Σ log q(θ_i | x_i)`.
pub fn npe_loss(g: &mut Graph, flow: &ConditionalFlow, params: &[Var], batch: &PairDataset) -> Result<Var> {
    let t = g.constant(batch.theta.clone());
    let c = g.constant(batch.x.clone());
    flow_nll(g, flow, params, t, c)
}

/// Likelihood-estimation loss `−(1/m) Σ log q(x_i | θ_i)`.
pub fn nle_loss(g: &mut Graph, flow: &ConditionalFlow, params: &[Var], batch: &PairDataset) -> Result<Var> {
    let t = g.constant(batch.x.clone());
    let c = g.constant(batch.theta.clone());
    flow_nll(g, flow, params, t, c)
}

/// Ratio-estimation loss; see [`RatioClassifier::loss_graph`].
pub fn nre_loss(g: &mut Graph, clf: &RatioClassifier, params: &[Var], batch: &PairDataset) -> Result<Var> {
    clf.loss_graph(g, params, &batch.theta, &batch.x)
}

/// A trained (or trainable) network together with the standardizers of
/// `θ` and `x`. The network sees standardized coordinates only.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorBundle {
    kind: EstimatorKind,
    theta_dim: usize,
    x_dim: usize,
    network: Network,
    theta_std: Standardizer,
    x_std: Standardizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub log: TrainLog,
    /// Training pairs dropped for non-finite values.
    pub dropped: usize,
}

const EVAL_CHUNK: usize = 4096;

impl EstimatorBundle {
    pub fn new(
        kind: EstimatorKind,
        theta_std: Standardizer,
        x_std: Standardizer,
        config: &EstimatorConfig,
        seed: u64,
    ) -> Result<Self> {
        let (theta_dim, x_dim) = (theta_std.dim(), x_std.dim());
        let init = derive_seed(seed, &["init".into()]);
        let network = match kind {
            EstimatorKind::Npe => Network::Flow(ConditionalFlow::new(theta_dim, x_dim, config.flow, init)?),
            EstimatorKind::Nle => Network::Flow(ConditionalFlow::new(x_dim, theta_dim, config.flow, init)?),
            EstimatorKind::Nre => {
                Network::Classifier(RatioClassifier::new(theta_dim, x_dim, config.classifier.clone(), init))
            }
        };
        Ok(Self {
            kind,
            theta_dim,
            x_dim,
            network,
            theta_std,
            x_std,
        })
    }

    /// Fits standardizers on `data`, then trains a freshly initialized
    /// network on the standardized pairs. Rows with non-finite entries are
    /// dropped first.
    pub fn fit(
        kind: EstimatorKind,
        data: &PairDataset,
        config: &EstimatorConfig,
        train_cfg: &TrainConfig,
    ) -> Result<(Self, FitReport)> {
        let keep: Vec<usize> = (0..data.len())
            .filter(|&r| {
                data.theta.row(r).iter().all(|v| v.is_finite()) && data.x.row(r).iter().all(|v| v.is_finite())
            })
            .collect();
        let dropped = data.len() - keep.len();
        let clean = if dropped > 0 { data.subset(&keep) } else { data.clone() };
        if clean.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let theta_std = Standardizer::fit(&clean.theta);
        let x_std = Standardizer::fit(&clean.x);
        let mut bundle = Self::new(kind, theta_std, x_std, config, train_cfg.seed)?;
        let std_data = bundle.standardize(&clean)?;
        let log = train(&mut bundle, &std_data, train_cfg)?;
        Ok((bundle, FitReport { log, dropped }))
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn theta_standardizer(&self) -> &Standardizer {
        &self.theta_std
    }

    pub fn x_standardizer(&self) -> &Standardizer {
        &self.x_std
    }

    pub fn standardize(&self, data: &PairDataset) -> Result<PairDataset> {
        PairDataset::new(self.theta_std.apply(&data.theta), self.x_std.apply(&data.x))
    }

    fn flow(&self) -> Result<&ConditionalFlow> {
        match &self.network {
            Network::Flow(f) => Ok(f),
            Network::Classifier(_) => Err(Error::invalid(format!("{} has no flow", self.kind))),
        }
    }

    fn classifier(&self) -> Result<&RatioClassifier> {
        match &self.network {
            Network::Classifier(c) => Ok(c),
            Network::Flow(_) => Err(Error::invalid(format!("{} has no classifier", self.kind))),
        }
    }

    fn check_y(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.x_dim {
            return Err(Error::Dimension {
                what: "observation",
                expected: self.x_dim,
                got: y.len(),
            });
        }
        Ok(())
    }

    /// Evaluates `f(θ chunk in standardized space, repeated y)` chunk-wise.
    fn per_theta(
        &self,
        theta: &RealArray,
        y: &[f64],
        f: impl Fn(&RealArray, &RealArray) -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        self.check_y(y)?;
        if theta.cols() != self.theta_dim {
            return Err(Error::Dimension {
                what: "θ",
                expected: self.theta_dim,
                got: theta.cols(),
            });
        }
        let ys = self.x_std.apply_row(y);
        let mut out = Vec::with_capacity(theta.rows());
        let rows: Vec<usize> = (0..theta.rows()).collect();
        for chunk in rows.chunks(EVAL_CHUNK) {
            let th = self.theta_std.apply(&theta.select_rows(chunk));
            let ctx = flow::repeat_row(&ys, chunk.len());
            out.extend(f(&th, &ctx)?);
        }
        Ok(out)
    }

    /// Posterior estimate `log q(θ | y)` in original coordinates.
    pub fn posterior_log_prob(&self, theta: &RealArray, y: &[f64]) -> Result<Vec<f64>> {
        if self.kind != EstimatorKind::Npe {
            return Err(Error::invalid(format!("{} does not model the posterior", self.kind)));
        }
        let flow = self.flow()?;
        let corr = self.theta_std.log_scale_sum();
        let lp = self.per_theta(theta, y, |th, ctx| flow.log_prob(th, ctx))?;
        Ok(lp.into_iter().map(|v| v - corr).collect())
    }

    /// Likelihood estimate `log q(y | θ)` in original coordinates.
    pub fn likelihood_log_prob(&self, theta: &RealArray, y: &[f64]) -> Result<Vec<f64>> {
        if self.kind != EstimatorKind::Nle {
            return Err(Error::invalid(format!("{} does not model the likelihood", self.kind)));
        }
        let flow = self.flow()?;
        let corr = self.x_std.log_scale_sum();
        let lp = self.per_theta(theta, y, |th, ctx| flow.log_prob(ctx, th))?;
        Ok(lp.into_iter().map(|v| v - corr).collect())
    }

    /// Estimated log likelihood-to-evidence ratio.
    pub fn log_ratio(&self, theta: &RealArray, y: &[f64]) -> Result<Vec<f64>> {
        let clf = self.classifier()?;
        self.per_theta(theta, y, |th, ctx| clf.logit(th, ctx))
    }

    /// Draws from the posterior estimate given `y` (NPE only).
    pub fn sample_posterior(&self, y: &[f64], n: usize, rng: &mut Rng) -> Result<RealArray> {
        if self.kind != EstimatorKind::Npe {
            return Err(Error::invalid(format!("{} cannot sample the posterior directly", self.kind)));
        }
        self.check_y(y)?;
        let z = self.flow()?.sample(&self.x_std.apply_row(y), n, rng)?;
        Ok(self.theta_std.invert(&z))
    }

    /// Draws from the likelihood estimate given `θ` (NLE only).
    pub fn sample_likelihood(&self, theta: &[f64], n: usize, rng: &mut Rng) -> Result<RealArray> {
        if self.kind != EstimatorKind::Nle {
            return Err(Error::invalid(format!("{} cannot sample the likelihood", self.kind)));
        }
        let z = self.flow()?.sample(&self.theta_std.apply_row(theta), n, rng)?;
        Ok(self.x_std.invert(&z))
    }
}

impl Trainable for EstimatorBundle {
    fn parameters(&self) -> &[Param] {
        match &self.network {
            Network::Flow(f) => f.parameters(),
            Network::Classifier(c) => c.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> &mut [Param] {
        match &mut self.network {
            Network::Flow(f) => f.parameters_mut(),
            Network::Classifier(c) => c.parameters_mut(),
        }
    }

    /// `batch` must already be standardized.
    fn build_loss(&self, g: &mut Graph, params: &[Var], batch: &PairDataset) -> Result<Var> {
        match (&self.network, self.kind) {
            (Network::Flow(f), EstimatorKind::Npe) => npe_loss(g, f, params, batch),
            (Network::Flow(f), _) => nle_loss(g, f, params, batch),
            (Network::Classifier(c), _) => nre_loss(g, c, params, batch),
        }
    }

    fn min_batch_size(&self) -> usize {
        if self.kind == EstimatorKind::Nre {
            2
        } else {
            1
        }
    }
}

const MAGIC: &[u8; 8] = b"CBEST\0\0\x01";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: EstimatorKind,
    theta_dim: usize,
    x_dim: usize,
    flow: Option<FlowConfig>,
    classifier: Option<ClassifierConfig>,
    theta_std: Standardizer,
    x_std: Standardizer,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

impl EstimatorBundle {
    /// Magic, header length, JSON header, value count, little-endian values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.parameters();
        let header = Header {
            kind: self.kind,
            theta_dim: self.theta_dim,
            x_dim: self.x_dim,
            flow: match &self.network {
                Network::Flow(f) => Some(*f.config()),
                Network::Classifier(_) => None,
            },
            classifier: match &self.network {
                Network::Classifier(c) => Some(c.config().clone()),
                Network::Flow(_) => None,
            },
            theta_std: self.theta_std.clone(),
            x_std: self.x_std.clone(),
            params: params
                .iter()
                .map(|p| ParamHeader {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let count: usize = params.iter().map(|p| p.value.len()).sum();
        let mut out = Vec::with_capacity(24 + json.len() + 8 * count);
        out.extend_from_slice(MAGIC);
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        out.extend((count as u64).to_le_bytes());
        for p in params {
            for v in p.value.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("estimator file: {m}"));
        let take_u64 = |at: usize| -> Result<u64> {
            bytes
                .get(at..at + 8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                .ok_or_else(|| bad("truncated"))
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic or version"));
        }
        let hlen = take_u64(8)? as usize;
        let json = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        let count = take_u64(16 + hlen)? as usize;
        let body = &bytes[24 + hlen..];
        if body.len() != 8 * count {
            return Err(bad("payload length mismatch"));
        }
        let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut params = Vec::with_capacity(header.params.len());
        for ph in &header.params {
            let n: usize = ph.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(bad("payload shorter than declared shapes"));
            }
            params.push(Param::new(ph.name.clone(), RealArray::new(ph.shape.clone(), data)?));
        }
        if values.next().is_some() {
            return Err(bad("payload longer than declared shapes"));
        }
        if header.theta_std.dim() != header.theta_dim || header.x_std.dim() != header.x_dim {
            return Err(bad("standardizer dimension mismatch"));
        }
        let network = match (header.kind, header.flow, header.classifier) {
            (EstimatorKind::Npe, Some(fc), None) => {
                Network::Flow(ConditionalFlow::from_params(header.theta_dim, header.x_dim, fc, params)?)
            }
            (EstimatorKind::Nle, Some(fc), None) => {
                Network::Flow(ConditionalFlow::from_params(header.x_dim, header.theta_dim, fc, params)?)
            }
            (EstimatorKind::Nre, None, Some(cc)) => {
                Network::Classifier(RatioClassifier::from_params(header.theta_dim, header.x_dim, cc, params)?)
            }
            _ => return Err(bad("network section does not match kind")),
        };
        Ok(Self {
            kind: header.kind,
            theta_dim: header.theta_dim,
            x_dim: header.x_dim,
            network,
            theta_std: header.theta_std,
            x_std: header.x_std,
        })
    }
}
