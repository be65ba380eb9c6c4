//! Per-curve deviation table and a plain-text digest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use covbench_core::metrics::diagonal_deviation;
use covbench_core::tasks::TaskName;

use crate::config::{Algorithm, Variant};
use crate::error::Result;
use crate::records::{latest_records, write_atomic, CurveRows, RunRecord, Status};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const DIGEST_FILE: &str = "digest.txt";
pub const SUMMARY_HEADER: &str =
    "task,algorithm,variant,sigma,n_train,seed_or_ensemble_id,status,max_below,max_above,signed_area";

#[derive(Clone, Debug, PartialEq)]
pub struct ReportOutcome {
    pub summary: PathBuf,
    pub digest: PathBuf,
    /// Rows of the summary table, one per curve.
    pub rows: usize,
    /// Records that are not `ok`.
    pub flagged: usize,
}

/// Trend of the median signed area over increasing σ for one row.
#[derive(Clone, Debug, PartialEq)]
pub struct Trend {
    pub medians: Vec<(u8, f64)>,
    /// Adjacent σ pairs where the median area went up.
    pub inversions: usize,
}

impl Trend {
    pub fn monotone(&self) -> bool {
        self.inversions == 0
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn trend(areas_by_sigma: &BTreeMap<u8, Vec<f64>>) -> Trend {
    let medians: Vec<(u8, f64)> = areas_by_sigma
        .iter()
        .map(|(&s, v)| (s, median(&mut v.clone())))
        .collect();
    let inversions = medians.windows(2).filter(|w| w[1].1 > w[0].1).count();
    Trend { medians, inversions }
}

type RowKey = (TaskName, Algorithm, Variant, usize);

pub fn emit_report(records: &[RunRecord], out_dir: &Path) -> Result<ReportOutcome> {
    let latest = latest_records(records);
    let mut table = format!("{SUMMARY_HEADER}\n");
    let mut rows = 0;
    let mut areas: BTreeMap<RowKey, BTreeMap<u8, Vec<f64>>> = BTreeMap::new();
    let mut seeds_per_cell: BTreeSet<usize> = BTreeSet::new();
    let mut seed_sets: BTreeMap<RowKey, BTreeSet<usize>> = BTreeMap::new();
    let mut flagged = Vec::new();
    for r in &latest {
        if let Some(k) = r.seed {
            seed_sets.entry((r.task, r.algorithm, r.variant, r.n_train)).or_default().insert(k);
        }
        if r.status != Status::Ok {
            flagged.push(r);
        }
        let Some(path) = r.curve_path() else { continue };
        let Ok(curve) = CurveRows::read(&out_dir.join(path)) else {
            continue;
        };
        let d = diagonal_deviation(&curve.as_curve())?;
        let status = serde_json::to_value(r.status).expect("status serializes");
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{},{},{}",
            r.task,
            r.algorithm,
            r.variant,
            r.sigma,
            r.n_train,
            r.member_id(),
            status.as_str().unwrap_or_default(),
            d.max_below,
            d.max_above,
            d.signed_area
        );
        rows += 1;
        areas
            .entry((r.task, r.algorithm, r.variant, r.n_train))
            .or_default()
            .entry(r.sigma)
            .or_default()
            .push(d.signed_area);
    }
    for s in seed_sets.values() {
        seeds_per_cell.insert(s.len());
    }

    let mut digest = String::new();
    let hashes: BTreeSet<&str> = latest.iter().map(|r| r.config_hash.as_str()).collect();
    let _ = writeln!(digest, "coverage benchmark digest");
    let _ = writeln!(digest, "config hash: {}", hashes.into_iter().collect::<Vec<_>>().join(", "));
    let seeds: Vec<String> = seeds_per_cell.iter().map(usize::to_string).collect();
    let _ = writeln!(
        digest,
        "seed curves per cell: {}",
        if seeds.is_empty() { "none".into() } else { seeds.join(", ") }
    );
    let _ = writeln!(digest, "curves: {rows}; records not ok: {}", flagged.len());
    let tasks: BTreeSet<TaskName> = areas.keys().map(|k| k.0).collect();
    for task in tasks {
        let _ = writeln!(digest, "\n{task}");
        let (mut mono, mut total) = (0, 0);
        for ((_, alg, variant, n_train), by_sigma) in areas.iter().filter(|(k, _)| k.0 == task) {
            let t = trend(by_sigma);
            let levels: Vec<String> = t.medians.iter().map(|(s, m)| format!("σ{s} {m:+.4}")).collect();
            let verdict = if t.medians.len() < 2 {
                "single σ level".to_string()
            } else if t.monotone() {
                total += 1;
                mono += 1;
                "degrades monotonically".to_string()
            } else {
                total += 1;
                format!("not monotone ({} inversion{})", t.inversions, if t.inversions == 1 { "" } else { "s" })
            };
            let _ = writeln!(
                digest,
                "  {alg} {variant} n_train={n_train}: median signed area {}: {verdict}",
                levels.join(", ")
            );
        }
        let _ = writeln!(
            digest,
            "  coverage degrades monotonically in σ for {mono} of {total} rows"
        );
    }
    let _ = writeln!(digest, "\nflagged cells");
    if flagged.is_empty() {
        let _ = writeln!(digest, "  none");
    }
    for r in &flagged {
        let status = serde_json::to_value(r.status).expect("status serializes");
        let _ = writeln!(
            digest,
            "  {} {} {} n_train={} σ={} seed={}: {}{}",
            r.task,
            r.algorithm,
            r.variant,
            r.n_train,
            r.sigma,
            r.member_id(),
            status.as_str().unwrap_or_default(),
            r.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
        );
    }

    let summary = out_dir.join(SUMMARY_FILE);
    let digest_path = out_dir.join(DIGEST_FILE);
    write_atomic(&summary, table.as_bytes())?;
    write_atomic(&digest_path, digest.as_bytes())?;
    Ok(ReportOutcome {
        summary,
        digest: digest_path,
        rows,
        flagged: flagged.len(),
    })
}
