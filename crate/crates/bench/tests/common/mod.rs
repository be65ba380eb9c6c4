#![allow(dead_code)]

use covbench::BenchConfig;

/// A matrix small enough to run in seconds: one task, short training and
/// light coverage settings.
pub fn tiny_config(algorithms: &str) -> BenchConfig {
    BenchConfig::from_toml_str(&format!(
        r#"
master_seed = 11
tasks = ["TG_SS"]
algorithms = [{algorithms}]
n_train = [1000]
sigmas = [0, 1, 2, 3, 4]
n_obs = 5
n_seeds = 3
persist_samples = true
workers = 2

[metrics]
m = 20
k = 100
bootstrap = 50

[training]
max_epochs = 5

[abc]
n_total = 2000
acceptance_rate = 0.05
"#
    ))
    .expect("test configuration is valid")
}
