//! Run records and curve files: the persisted results of a matrix run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use covbench_core::metrics::CoverageCurve;
use covbench_core::tasks::TaskName;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, Variant};
use crate::error::{BenchError, Result};

pub const RUNS_FILE: &str = "runs.ndjson";
pub const CURVES_FILE: &str = "curves.csv";
pub const CURVE_HEADER: &str =
    "task,algorithm,variant,sigma,n_train,seed_or_ensemble_id,alpha,nominal,empirical,band_lo,band_hi";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    McmcFlagged,
    Failed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds: f64,
    pub coverage_seconds: f64,
}

/// Observation bookkeeping of one curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurveCounts {
    pub n_obs: usize,
    pub excluded_reference: usize,
    pub excluded_approximation: usize,
    pub flagged: usize,
}

impl From<&CoverageCurve> for CurveCounts {
    fn from(c: &CoverageCurve) -> Self {
        Self {
            n_obs: c.n_obs,
            excluded_reference: c.excluded_reference,
            excluded_approximation: c.excluded_approximation,
            flagged: c.flagged,
        }
    }
}

/// One curve's worth of work: a seed (or the ensemble) of one cell at one σ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: TaskName,
    pub algorithm: Algorithm,
    pub variant: Variant,
    pub sigma: u8,
    pub n_train: usize,
    /// Seed index within the cell; absent for the ensemble.
    pub seed: Option<usize>,
    pub status: Status,
    pub timings: Timings,
    /// Paths relative to the output directory; the curve file comes first
    /// when there is one.
    pub artifacts: Vec<String>,
    pub config_hash: String,
    pub cell_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<CurveCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Coordinates that identify a curve.
pub type CurveKey = (TaskName, usize, Algorithm, Variant, u8, Option<usize>);

impl RunRecord {
    pub fn member_id(&self) -> String {
        member_id(self.seed)
    }

    pub fn key(&self) -> CurveKey {
        (self.task, self.n_train, self.algorithm, self.variant, self.sigma, self.seed)
    }

    /// The curve file, if the run produced one.
    pub fn curve_path(&self) -> Option<&str> {
        (self.status != Status::Failed)
            .then(|| self.artifacts.first().map(String::as_str))
            .flatten()
    }
}

pub fn member_id(seed: Option<usize>) -> String {
    seed.map_or_else(|| "ensemble".to_string(), |s| s.to_string())
}

/// Appends records, one JSON object per line.
pub fn append_records(out_dir: &Path, records: &[RunRecord]) -> Result<()> {
    let path = out_dir.join(RUNS_FILE);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(BenchError::io(&path))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serializes"));
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(BenchError::io(&path))?;
    f.sync_data().map_err(BenchError::io(&path))
}

/// Every record in file order. A missing file reads as empty.
pub fn read_records(out_dir: &Path) -> Result<Vec<RunRecord>> {
    let path = out_dir.join(RUNS_FILE);
    let f = match fs::File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(BenchError::io(&path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(BenchError::io(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| BenchError::Artifact {
            path: path.clone(),
            detail: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// The most recent record per curve, sorted by coordinates.
pub fn latest_records(records: &[RunRecord]) -> Vec<RunRecord> {
    let mut by_key: BTreeMap<CurveKey, &RunRecord> = BTreeMap::new();
    for r in records {
        by_key.insert(r.key(), r);
    }
    by_key.into_values().cloned().collect()
}

/// A coverage curve with the coordinates it was computed at.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRows {
    pub task: TaskName,
    pub algorithm: Algorithm,
    pub variant: Variant,
    pub sigma: u8,
    pub n_train: usize,
    pub seed: Option<usize>,
    pub alpha: Vec<f64>,
    pub nominal: Vec<f64>,
    pub empirical: Vec<f64>,
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
}

impl CurveRows {
    pub fn from_curve(record: &RunRecord, curve: &CoverageCurve) -> Self {
        Self {
            task: record.task,
            algorithm: record.algorithm,
            variant: record.variant,
            sigma: record.sigma,
            n_train: record.n_train,
            seed: record.seed,
            alpha: curve.alphas.clone(),
            nominal: curve.nominal.clone(),
            empirical: curve.empirical.clone(),
            band_lo: curve.band_lo.clone(),
            band_hi: curve.band_hi.clone(),
        }
    }

    /// CSV body rows, no header. Floats use the shortest exact form.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for i in 0..self.alpha.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                self.task,
                self.algorithm,
                self.variant,
                self.sigma,
                self.n_train,
                member_id(self.seed),
                self.alpha[i],
                self.nominal[i],
                self.empirical[i],
                self.band_lo[i],
                self.band_hi[i]
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{CURVE_HEADER}\n{}", self.csv_rows())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(BenchError::io(path))?;
        parse_curve_csv(&text).map_err(|detail| BenchError::Artifact {
            path: path.to_path_buf(),
            detail,
        })
    }

    /// The core curve type, for the deviation summaries.
    pub fn as_curve(&self) -> CoverageCurve {
        CoverageCurve {
            alphas: self.alpha.clone(),
            nominal: self.nominal.clone(),
            empirical: self.empirical.clone(),
            band_lo: self.band_lo.clone(),
            band_hi: self.band_hi.clone(),
            n_obs: 0,
            n_ref_per_obs: 0,
            k: 0,
            excluded_reference: 0,
            excluded_approximation: 0,
            flagged: 0,
        }
    }
}

fn parse_curve_csv(text: &str) -> std::result::Result<CurveRows, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err("unexpected header".into());
    }
    let mut rows: Option<CurveRows> = None;
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(format!("row {}: expected 11 fields, got {}", i + 1, f.len()));
        }
        let num = |j: usize| f[j].parse::<f64>().map_err(|e| format!("row {}: field {j}: {e}", i + 1));
        let task: TaskName = f[0].parse().map_err(|e| format!("{e}"))?;
        let algorithm: Algorithm = f[1].parse().map_err(|e| format!("{e}"))?;
        let variant: Variant = f[2].parse().map_err(|e| format!("{e}"))?;
        let sigma: u8 = f[3].parse().map_err(|e| format!("sigma: {e}"))?;
        let n_train: usize = f[4].parse().map_err(|e| format!("n_train: {e}"))?;
        let seed = match f[5] {
            "ensemble" => None,
            s => Some(s.parse::<usize>().map_err(|e| format!("seed: {e}"))?),
        };
        let r = rows.get_or_insert_with(|| CurveRows {
            task,
            algorithm,
            variant,
            sigma,
            n_train,
            seed,
            alpha: Vec::new(),
            nominal: Vec::new(),
            empirical: Vec::new(),
            band_lo: Vec::new(),
            band_hi: Vec::new(),
        });
        if (r.task, r.algorithm, r.variant, r.sigma, r.n_train, r.seed) != (task, algorithm, variant, sigma, n_train, seed) {
            return Err(format!("row {}: coordinates differ from the first row", i + 1));
        }
        r.alpha.push(num(6)?);
        r.nominal.push(num(7)?);
        r.empirical.push(num(8)?);
        r.band_lo.push(num(9)?);
        r.band_hi.push(num(10)?);
    }
    rows.ok_or_else(|| "no rows".into())
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(BenchError::io(dir))?;
    }
    let tmp: PathBuf = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".tmp");
        path.with_file_name(name)
    };
    fs::write(&tmp, bytes).map_err(BenchError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(BenchError::io(path))
}
