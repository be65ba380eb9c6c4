//! The run matrix: trains every cell's seeds, builds its posteriors and
//! ensemble, and writes one coverage curve per (member, σ).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use covbench_core::diffcore::RealArray;
use covbench_core::estimators::EstimatorBundle;
use covbench_core::inference::{
    ensemble, nle_posterior, npe_posterior, nre_posterior, AbcTable, AbcTablePosterior, PosteriorApproximation,
    PosteriorKind, PosteriorSamples,
};
use covbench_core::metrics::{coverage_curve, TaskReference};
use covbench_core::seeding::{derive_seed, Label};
use covbench_core::tasks::{build_observation_grid, ObservationGrid, ReferenceCache, Task, TaskName};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, BenchConfig, Cell, Variant};
use crate::error::{BenchError, Result};
use crate::records::{
    append_records, member_id, write_atomic, CurveCounts, CurveRows, RunRecord, Status, Timings, CURVES_FILE,
    CURVE_HEADER, RUNS_FILE,
};

pub const CONFIG_FILE: &str = "config.toml";
const DONE_FILE: &str = "done.json";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Skip cells whose completion marker matches their current hash.
    pub resume: bool,
    /// Stop after this many cells have run, as if interrupted.
    pub stop_after: Option<usize>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    /// Records appended by this invocation.
    pub records: Vec<RunRecord>,
    pub cells_run: usize,
    pub cells_skipped: usize,
    /// Cells left for a later `--resume` because of `stop_after`.
    pub cells_pending: usize,
}

impl RunSummary {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.status == Status::Failed).count()
    }
}

#[derive(Serialize, Deserialize)]
struct DoneMarker {
    cell_hash: String,
}

/// Paths of a cell's artifacts, relative to the output directory.
pub fn curve_rel_path(cell: &Cell, variant: Variant, sigma: u8, seed: Option<usize>) -> PathBuf {
    variant_dir("curves", cell, variant)
        .join(format!("sigma{sigma}"))
        .join(format!("{}.csv", member_id(seed)))
}

fn variant_dir(root: &str, cell: &Cell, variant: Variant) -> PathBuf {
    PathBuf::from(root)
        .join(cell.task.as_str())
        .join(format!("n{}", cell.n_train))
        .join(format!("{}-{}", cell.spec.algorithm, variant))
}

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Observation grids are persisted under `grids/`.
pub fn grid_path(out_dir: &Path, task: TaskName) -> PathBuf {
    out_dir.join("grids").join(format!("{task}.ndjson"))
}

struct Context<'a> {
    cfg: &'a BenchConfig,
    out: &'a Path,
    config_hash: String,
    grids: BTreeMap<TaskName, ObservationGrid>,
    references: BTreeMap<TaskName, TaskReference>,
    verbose: bool,
    log: Mutex<()>,
}

fn task_for(cfg: &BenchConfig, name: TaskName) -> Task {
    Task::with_gamma_convention(name, cfg.sv_gamma)
}

/// Runs every pending cell of `cfg` into `out_dir` and rebuilds the
/// combined curve table. Cell failures are recorded; the matrix continues.
pub fn run_matrix(cfg: &BenchConfig, out_dir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(BenchError::io(out_dir))?;
    let runs = out_dir.join(RUNS_FILE);
    if !opts.resume && fs::metadata(&runs).is_ok_and(|m| m.len() > 0) {
        return Err(BenchError::config(format!(
            "{} already holds results; pass --resume to continue it",
            out_dir.display()
        )));
    }
    write_atomic(&out_dir.join(CONFIG_FILE), cfg.to_toml_string().as_bytes())?;

    let cache = ReferenceCache::new(out_dir.join("reference-cache"))?;
    let mut grids = BTreeMap::new();
    let mut references = BTreeMap::new();
    for &name in &cfg.tasks {
        let task = task_for(cfg, name);
        let grid = build_observation_grid(&task, cfg.n_obs, cfg.master_seed)?;
        let mut buf = Vec::new();
        grid.write_ndjson(&mut buf)?;
        write_atomic(&grid_path(out_dir, name), &buf)?;
        grids.insert(name, grid);
        let mut reference = TaskReference::new(task, cfg.master_seed).with_cache(cache.clone());
        reference.settings = cfg.oracle.clone();
        references.insert(name, reference);
    }

    let ctx = Context {
        cfg,
        out: out_dir,
        config_hash: cfg.config_hash(),
        grids,
        references,
        verbose: opts.verbose,
        log: Mutex::new(()),
    };

    let cells = cfg.cells();
    let mut pending: Vec<Cell> = Vec::new();
    let mut skipped = 0;
    for cell in &cells {
        if opts.resume && ctx.is_done(cell) {
            skipped += 1;
        } else {
            pending.push(*cell);
        }
    }
    let budget = opts.stop_after.unwrap_or(usize::MAX).min(pending.len());
    let left = pending.len() - budget;
    pending.truncate(budget);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.resolve_workers()?)
        .build()
        .map_err(|e| BenchError::config(format!("cannot start worker pool: {e}")))?;
    let per_cell: Vec<Result<Vec<RunRecord>>> = pool.install(|| pending.par_iter().map(|c| ctx.run_cell(c)).collect());
    let mut records = Vec::new();
    for r in per_cell {
        records.extend(r?);
    }
    write_combined_curves(cfg, out_dir)?;
    Ok(RunSummary {
        records,
        cells_run: budget,
        cells_skipped: skipped,
        cells_pending: left,
    })
}

/// Concatenates every curve file in configuration order into one table.
pub fn write_combined_curves(cfg: &BenchConfig, out_dir: &Path) -> Result<()> {
    let mut s = format!("{CURVE_HEADER}\n");
    for cell in cfg.cells() {
        let mut members: Vec<(Variant, Option<usize>)> =
            (0..cfg.n_seeds).map(|k| (cell.spec.variant(), Some(k))).collect();
        if cell.spec.variant() == Variant::Plain {
            members.push((Variant::Ensemble, None));
        }
        for (variant, seed) in members {
            for &sigma in &cfg.sigmas {
                let path = out_dir.join(curve_rel_path(&cell, variant, sigma, seed));
                if path.exists() {
                    s.push_str(&CurveRows::read(&path)?.csv_rows());
                }
            }
        }
    }
    write_atomic(&out_dir.join(CURVES_FILE), s.as_bytes())
}

/// A trained member of a cell, or why it could not be built.
struct Member {
    seed: usize,
    posterior: std::result::Result<Arc<dyn PosteriorApproximation>, String>,
    train_seconds: f64,
    artifacts: Vec<String>,
}

impl Context<'_> {
    fn done_path(&self, cell: &Cell) -> PathBuf {
        self.out.join("cells").join(cell.rel_dir()).join(DONE_FILE)
    }

    fn is_done(&self, cell: &Cell) -> bool {
        let Ok(text) = fs::read_to_string(self.done_path(cell)) else {
            return false;
        };
        serde_json::from_str::<DoneMarker>(&text).is_ok_and(|m| m.cell_hash == self.cfg.cell_hash(cell))
    }

    fn say(&self, msg: impl AsRef<str>) {
        if self.verbose {
            let _guard = self.log.lock().unwrap_or_else(|e| e.into_inner());
            eprintln!("{}", msg.as_ref());
        }
    }

    fn seed(&self, labels: &[Label<'_>]) -> u64 {
        derive_seed(self.cfg.master_seed, labels)
    }

    fn run_cell(&self, cell: &Cell) -> Result<Vec<RunRecord>> {
        let started = Instant::now();
        self.say(format!("cell {cell}: start"));
        let cell_hash = self.cfg.cell_hash(cell);
        let task = task_for(self.cfg, cell.task);
        let members = self.build_members(cell, &task)?;

        let mut jobs: Vec<(Variant, Option<usize>, std::result::Result<Arc<dyn PosteriorApproximation>, String>, f64, Vec<String>)> =
            members
                .iter()
                .map(|m| {
                    (cell.spec.variant(), Some(m.seed), m.posterior.clone(), m.train_seconds, m.artifacts.clone())
                })
                .collect();
        if cell.spec.variant() == Variant::Plain {
            let ok: Vec<Arc<dyn PosteriorApproximation>> =
                members.iter().filter_map(|m| m.posterior.as_ref().ok().cloned()).collect();
            let mixed = if ok.is_empty() {
                Err("every ensemble member failed".to_string())
            } else {
                let seed = self.seed(&[
                    "ensemble".into(),
                    cell.task.as_str().into(),
                    cell.n_train.into(),
                    cell.spec.algorithm.as_str().into(),
                ]);
                ensemble(ok, task.prior(), seed)
                    .map(|e| {
                        Arc::new(e.with_normalization_draws(self.cfg.ensemble_normalization_draws))
                            as Arc<dyn PosteriorApproximation>
                    })
                    .map_err(|e| e.to_string())
            };
            jobs.push((Variant::Ensemble, None, mixed, 0.0, Vec::new()));
        }

        let mut records = Vec::new();
        for (variant, seed, posterior, train_seconds, artifacts) in jobs {
            for &sigma in &self.cfg.sigmas {
                let mut rec = RunRecord {
                    task: cell.task,
                    algorithm: cell.spec.algorithm,
                    variant,
                    sigma,
                    n_train: cell.n_train,
                    seed,
                    status: Status::Failed,
                    timings: Timings {
                        train_seconds,
                        coverage_seconds: 0.0,
                    },
                    artifacts: Vec::new(),
                    config_hash: self.config_hash.clone(),
                    cell_hash: cell_hash.clone(),
                    counts: None,
                    error: None,
                };
                match &posterior {
                    Err(e) => rec.error = Some(e.clone()),
                    Ok(q) => {
                        let t0 = Instant::now();
                        match self.coverage(cell, variant, sigma, seed, q.as_ref()) {
                            Ok((counts, mut paths)) => {
                                rec.status = if counts.flagged > 0 { Status::McmcFlagged } else { Status::Ok };
                                rec.counts = Some(counts);
                                rec.artifacts.append(&mut paths);
                            }
                            Err(e) => rec.error = Some(e.to_string()),
                        }
                        rec.timings.coverage_seconds = t0.elapsed().as_secs_f64();
                    }
                }
                rec.artifacts.extend(artifacts.iter().cloned());
                records.push(rec);
            }
        }

        append_records(self.out, &records)?;
        let failed = records.iter().filter(|r| r.status == Status::Failed).count();
        if failed == 0 {
            let marker = serde_json::to_vec(&DoneMarker { cell_hash }).expect("marker serializes");
            write_atomic(&self.done_path(cell), &marker)?;
        }
        self.say(format!(
            "cell {cell}: {} curves, {failed} failed, {:.1}s",
            records.len(),
            started.elapsed().as_secs_f64()
        ));
        Ok(records)
    }

    /// Trains (or, for ABC, simulates) every seed of a cell in parallel.
    fn build_members(&self, cell: &Cell, task: &Task) -> Result<Vec<Member>> {
        let cfg = self.cfg;
        let alg = cell.spec.algorithm;
        let data = match alg.estimator() {
            Some(_) => {
                let seed = self.seed(&["train".into(), cell.task.as_str().into(), cell.n_train.into()]);
                Some(task.simulate_dataset(cell.n_train, seed)?)
            }
            None => None,
        };
        let cell_dir = PathBuf::from("cells").join(cell.rel_dir());
        fs::create_dir_all(self.out.join(&cell_dir)).map_err(BenchError::io(self.out.join(&cell_dir)))?;

        let members: Vec<Result<Member>> = (0..cfg.n_seeds)
            .into_par_iter()
            .map(|k| {
                let t0 = Instant::now();
                let mut artifacts = Vec::new();
                let built: std::result::Result<Arc<dyn PosteriorApproximation>, String> = match (alg.estimator(), &data) {
                    (Some(kind), Some(data)) => {
                        let fit_seed = self.seed(&[
                            "fit".into(),
                            cell.task.as_str().into(),
                            cell.n_train.into(),
                            alg.as_str().into(),
                            k.into(),
                        ]);
                        let tc = cfg.training.train_config(cell.spec.sam, fit_seed);
                        match EstimatorBundle::fit(kind, data, &cfg.estimator, &tc) {
                            Ok((bundle, report)) => {
                                let bin = cell_dir.join(format!("seed{k}.bin"));
                                write_atomic(&self.out.join(&bin), &bundle.to_bytes())?;
                                let log = cell_dir.join(format!("seed{k}.train.ndjson"));
                                let mut text = String::new();
                                for e in &report.log.epochs {
                                    let _ = writeln!(text, "{}", serde_json::to_string(e).expect("epoch serializes"));
                                }
                                write_atomic(&self.out.join(&log), text.as_bytes())?;
                                artifacts.push(rel_string(&bin));
                                artifacts.push(rel_string(&log));
                                let bundle = Arc::new(bundle);
                                let prior = task.prior();
                                let q = match alg {
                                    Algorithm::Npe => npe_posterior(bundle, prior),
                                    Algorithm::Nle => nle_posterior(bundle, prior, cfg.mcmc.clone()),
                                    _ => nre_posterior(bundle, prior, cfg.mcmc.clone()),
                                };
                                q.map(|q| Arc::new(q) as Arc<dyn PosteriorApproximation>)
                                    .map_err(|e| e.to_string())
                            }
                            Err(e) => Err(format!("training failed: {e}")),
                        }
                    }
                    _ => {
                        let seed = self.seed(&["abc".into(), cell.task.as_str().into(), k.into()]);
                        AbcTable::simulate(task, cfg.abc.n_total, seed)
                            .and_then(|t| AbcTablePosterior::new(Arc::new(t), cfg.abc.acceptance_rate))
                            .map(|q| Arc::new(q) as Arc<dyn PosteriorApproximation>)
                            .map_err(|e| e.to_string())
                    }
                };
                let train_seconds = t0.elapsed().as_secs_f64();
                self.say(format!("cell {cell}: seed {k} ready in {train_seconds:.1}s"));
                Ok(Member {
                    seed: k,
                    posterior: built,
                    train_seconds,
                    artifacts,
                })
            })
            .collect();
        members.into_iter().collect()
    }

    fn coverage(
        &self,
        cell: &Cell,
        variant: Variant,
        sigma: u8,
        seed: Option<usize>,
        q: &dyn PosteriorApproximation,
    ) -> Result<(CurveCounts, Vec<String>)> {
        let grid = &self.grids[&cell.task];
        let observations = grid.column(sigma);
        let reference = &self.references[&cell.task];
        let member = member_id(seed);
        let cov_seed = self.seed(&[
            "coverage".into(),
            cell.task.as_str().into(),
            cell.n_train.into(),
            cell.spec.algorithm.as_str().into(),
            variant.as_str().into(),
            (&member).into(),
            u64::from(sigma).into(),
        ]);
        let recorder = Recorder::new(q, &observations);
        let approx: &dyn PosteriorApproximation = if self.cfg.persist_samples { &recorder } else { q };
        let curve = coverage_curve(approx, &observations, reference, &self.cfg.metrics, cov_seed)?;

        let proto = RunRecord {
            task: cell.task,
            algorithm: cell.spec.algorithm,
            variant,
            sigma,
            n_train: cell.n_train,
            seed,
            status: Status::Ok,
            timings: Timings::default(),
            artifacts: Vec::new(),
            config_hash: String::new(),
            cell_hash: String::new(),
            counts: None,
            error: None,
        };
        let rows = CurveRows::from_curve(&proto, &curve);
        let rel = curve_rel_path(cell, variant, sigma, seed);
        rows.write(&self.out.join(&rel))?;
        let mut paths = vec![rel_string(&rel)];
        if self.cfg.persist_samples {
            let srel = variant_dir("samples", cell, variant)
                .join(format!("sigma{sigma}"))
                .join(format!("{member}.ndjson"));
            write_atomic(&self.out.join(&srel), recorder.to_ndjson(sigma).as_bytes())?;
            paths.push(rel_string(&srel));
        }
        Ok((CurveCounts::from(&curve), paths))
    }
}

/// Passes calls through and keeps the sample set drawn for each observation.
struct Recorder<'a> {
    inner: &'a dyn PosteriorApproximation,
    index_of: HashMap<Vec<u64>, usize>,
    drawn: Mutex<BTreeMap<usize, (RealArray, bool)>>,
}

#[derive(Serialize)]
struct SampleLine<'a> {
    index: usize,
    sigma: u8,
    flagged: bool,
    samples: Vec<&'a [f64]>,
}

impl<'a> Recorder<'a> {
    fn new(inner: &'a dyn PosteriorApproximation, observations: &[&covbench_core::tasks::Observation]) -> Self {
        Self {
            inner,
            index_of: observations
                .iter()
                .map(|o| (o.y.iter().map(|v| v.to_bits()).collect(), o.index))
                .collect(),
            drawn: Mutex::new(BTreeMap::new()),
        }
    }

    fn to_ndjson(&self, sigma: u8) -> String {
        let drawn = self.drawn.lock().unwrap_or_else(|e| e.into_inner());
        let mut s = String::new();
        for (&index, (samples, flagged)) in drawn.iter() {
            let line = SampleLine {
                index,
                sigma,
                flagged: *flagged,
                samples: (0..samples.rows()).map(|r| samples.row(r)).collect(),
            };
            let _ = writeln!(s, "{}", serde_json::to_string(&line).expect("samples serialize"));
        }
        s
    }
}

impl PosteriorApproximation for Recorder<'_> {
    fn kind(&self) -> PosteriorKind {
        self.inner.kind()
    }

    fn theta_dim(&self) -> usize {
        self.inner.theta_dim()
    }

    fn is_normalized(&self) -> bool {
        self.inner.is_normalized()
    }

    fn unnorm_logpdf(&self, theta: &RealArray, y: &[f64]) -> covbench_core::Result<Vec<f64>> {
        self.inner.unnorm_logpdf(theta, y)
    }

    fn sample(&self, y: &[f64], n: usize, seed: u64) -> covbench_core::Result<PosteriorSamples> {
        let out = self.inner.sample(y, n, seed)?;
        let key: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
        if let Some(&index) = self.index_of.get(&key) {
            self.drawn
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .insert(index, (out.samples.clone(), out.flagged()));
        }
        Ok(out)
    }
}
