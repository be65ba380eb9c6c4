use covbench_core::diffcore::{Graph, RealArray, Reduce, Var};
use covbench_core::estimators::{EstimatorBundle, EstimatorConfig, EstimatorKind, FlowConfig};
use covbench_core::optim::{eval_loss, split_indices, train, PairDataset, Param, TrainConfig, Trainable};
use covbench_core::seeding::rng;
use covbench_core::Result;
use rand_distr::{Distribution, StandardNormal};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// θ ~ N(0, 1), x = θ + 0.5·ε: the posterior is N(0.8x, 0.2).
fn linear_gaussian(n: usize, seed: u64) -> PairDataset {
    let mut r = rng(seed);
    let mut theta = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    for _ in 0..n {
        let t: f64 = StandardNormal.sample(&mut r);
        let e: f64 = StandardNormal.sample(&mut r);
        theta.push(t);
        x.push(t + 0.5 * e);
    }
    PairDataset::new(RealArray::column_vector(theta), RealArray::column_vector(x)).unwrap()
}

#[test]
fn npe_toy_reaches_analytic_optimum() {
    let data = linear_gaussian(10_000, 1);
    let cfg = EstimatorConfig {
        flow: FlowConfig {
            layers: 2,
            hidden: 32,
            ..FlowConfig::default()
        },
        ..EstimatorConfig::default()
    };
    let tc = TrainConfig {
        seed: 2,
        max_epochs: Some(200),
        ..TrainConfig::default()
    };
    let (b, _) = EstimatorBundle::fit(EstimatorKind::Npe, &data, &cfg, &tc).unwrap();
    // Compare on the validation rows the trainer held out.
    let (_, val) = split_indices(data.len(), tc.validation_fraction, tc.seed);
    let (mut model_nll, mut exact_nll) = (0.0, 0.0);
    for &i in &val {
        let (t, x) = (data.theta.get(i, 0), data.x.get(i, 0));
        model_nll -= b.posterior_log_prob(&RealArray::matrix(1, 1, vec![t]), &[x]).unwrap()[0];
        exact_nll += 0.5 * (t - 0.8 * x).powi(2) / 0.2 + 0.5 * (LN_2PI + 0.2f64.ln());
    }
    let gap = (model_nll - exact_nll) / val.len() as f64;
    assert!(gap.abs() <= 0.05, "gap {gap} nats");
}

/// Least squares `mean (x·w − θ)²`: convex in `w`.
struct Linear {
    params: Vec<Param>,
}

impl Trainable for Linear {
    fn parameters(&self) -> &[Param] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn build_loss(&self, g: &mut Graph, params: &[Var], batch: &PairDataset) -> Result<Var> {
        let x = g.constant(batch.x.clone());
        let t = g.constant(batch.theta.clone());
        let pred = g.matmul(x, params[0])?;
        let err = g.sub(pred, t)?;
        let sq = g.mul(err, err)?;
        Ok(g.mean(sq, Reduce::All))
    }
}

fn regression_data(seed: u64) -> PairDataset {
    let mut r = rng(seed);
    let n = 2000;
    let mut x = Vec::with_capacity(3 * n);
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut r)).collect();
        let e: f64 = StandardNormal.sample(&mut r);
        t.push(row[0] - 2.0 * row[1] + 0.5 * row[2] + 0.1 * e);
        x.extend(row);
    }
    PairDataset::new(RealArray::column_vector(t), RealArray::matrix(n, 3, x)).unwrap()
}

#[test]
fn convex_training_loss_is_non_increasing_on_average() {
    let epochs = 15;
    let mut avg = vec![0.0; epochs];
    for seed in 0..10 {
        let data = regression_data(100 + seed);
        let mut m = Linear {
            params: vec![Param::new("w", RealArray::zeros(3, 1))],
        };
        let tc = TrainConfig {
            seed,
            max_epochs: Some(epochs),
            patience: epochs + 1,
            ..TrainConfig::default()
        };
        let log = train(&mut m, &data, &tc).unwrap();
        for (a, e) in avg.iter_mut().zip(&log.epochs) {
            *a += e.train_loss / 10.0;
        }
    }
    assert!(avg.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{avg:?}");
}

#[test]
fn returned_parameters_are_the_best_observed() {
    let data = regression_data(7);
    let mut m = Linear {
        params: vec![Param::new("w", RealArray::zeros(3, 1))],
    };
    let tc = TrainConfig {
        seed: 3,
        max_epochs: Some(30),
        ..TrainConfig::default()
    };
    let log = train(&mut m, &data, &tc).unwrap();
    let best_seen = log
        .epochs
        .iter()
        .map(|e| e.val_loss)
        .fold(log.initial_val_loss, f64::min);
    assert!(log.best_val_loss <= best_seen);
    let (_, val) = split_indices(data.len(), tc.validation_fraction, tc.seed);
    let reval = eval_loss(&m, &data.subset(&val)).unwrap();
    assert!((reval - log.best_val_loss).abs() < 1e-12);
}
