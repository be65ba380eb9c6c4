use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Task, TaskName, SIGMAS};
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng};

/// One observed data set: a transformed simulation at a given σ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// 1-based row of the grid.
    pub index: usize,
    pub sigma: u8,
    pub theta_true: Vec<f64>,
    /// Data as seen by the estimators (summarized where the task has summaries).
    pub y: Vec<f64>,
    /// Full transformed series, kept when it differs from `y`; the reference
    /// posterior conditions on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_full: Option<Vec<f64>>,
    /// Hex seed this row was drawn from.
    pub seed_material: String,
}

impl Observation {
    /// Data the reference oracle conditions on.
    pub fn reference_data(&self) -> &[f64] {
        self.y_full.as_deref().unwrap_or(&self.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationGrid {
    pub task: TaskName,
    pub n_obs: usize,
    pub master_seed: u64,
    /// Ordered by index, then σ.
    pub entries: Vec<Observation>,
}

/// Draws `(θ, x, z)` once per index and fills every σ column from that draw.
pub fn build_observation_grid(task: &Task, n_obs: usize, master_seed: u64) -> Result<ObservationGrid> {
    if n_obs == 0 {
        return Err(Error::invalid("n_obs must be at least 1"));
    }
    let rows: Vec<Result<Vec<Observation>>> = (1..=n_obs)
        .into_par_iter()
        .map(|index| {
            let seed = derive_seed(master_seed, &["grid".into(), task.name().as_str().into(), index.into()]);
            let mut r = rng(seed);
            let theta = task.prior().sample(&mut r);
            let raw = task.simulate_raw(&theta, &mut r)?;
            let z = task.draw_noise(&mut r);
            Ok(SIGMAS
                .iter()
                .map(|&sigma| {
                    let full = task.transform(&raw, sigma, &z);
                    let y = task.summarize(&full);
                    Observation {
                        index,
                        sigma,
                        theta_true: theta.clone(),
                        y_full: task.has_summary().then_some(full),
                        y,
                        seed_material: format!("{seed:016x}"),
                    }
                })
                .collect())
        })
        .collect();
    let mut entries = Vec::with_capacity(n_obs * SIGMAS.len());
    for r in rows {
        entries.extend(r?);
    }
    Ok(ObservationGrid {
        task: task.name(),
        n_obs,
        master_seed,
        entries,
    })
}

impl ObservationGrid {
    pub fn column(&self, sigma: u8) -> Vec<&Observation> {
        self.entries.iter().filter(|o| o.sigma == sigma).collect()
    }

    /// One JSON record per line, in grid order.
    pub fn write_ndjson(&self, mut w: impl Write) -> Result<()> {
        for e in &self.entries {
            let line = serde_json::to_string(e).map_err(|err| Error::Format(err.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_ndjson(task: TaskName, master_seed: u64, r: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str::<Observation>(&line).map_err(|e| Error::Format(e.to_string()))?);
        }
        let n_obs = entries.iter().map(|e| e.index).max().unwrap_or(0);
        Ok(Self {
            task,
            n_obs,
            master_seed,
            entries,
        })
    }
}
