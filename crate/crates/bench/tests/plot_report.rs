use std::fs;
use std::path::Path;

use covbench::config::{Algorithm, Variant};
use covbench::plot::plot_path;
use covbench::records::{CurveRows, Timings};
use covbench::{emit_plots, emit_report, BenchError, RunRecord, Status};
use covbench_core::metrics::default_alpha_grid;
use covbench_core::tasks::TaskName;

/// Writes a curve with `empirical = nominal + shift` (clamped) and returns
/// its record.
fn curve(
    out: &Path,
    algorithm: Algorithm,
    variant: Variant,
    sigma: u8,
    seed: Option<usize>,
    shift: f64,
    status: Status,
) -> RunRecord {
    let alphas = default_alpha_grid();
    let nominal: Vec<f64> = alphas.iter().map(|a| 1.0 - a).collect();
    let empirical: Vec<f64> = nominal.iter().map(|n| (n + shift).clamp(0.0, 1.0)).collect();
    let rec = RunRecord {
        task: TaskName::TgSs,
        algorithm,
        variant,
        sigma,
        n_train: 10_000,
        seed,
        status,
        timings: Timings::default(),
        artifacts: Vec::new(),
        config_hash: "h".into(),
        cell_hash: "c".into(),
        counts: None,
        error: (status == Status::Failed).then(|| "training diverged".to_string()),
    };
    if status == Status::Failed {
        return rec;
    }
    let rel = format!("curves/{algorithm}-{variant}-{sigma}-{}.csv", rec.member_id());
    CurveRows {
        task: rec.task,
        algorithm,
        variant,
        sigma,
        n_train: rec.n_train,
        seed,
        alpha: alphas,
        band_lo: empirical.iter().map(|e| e - 0.02).collect(),
        band_hi: empirical.iter().map(|e| e + 0.02).collect(),
        nominal,
        empirical,
    }
    .write(&out.join(&rel))
    .unwrap();
    RunRecord {
        artifacts: vec![rel],
        ..rec
    }
}

/// Four plain algorithms, two seeds and an ensemble each, at five σ.
fn full_grid(out: &Path, shift_per_sigma: f64) -> Vec<RunRecord> {
    let mut recs = Vec::new();
    for alg in Algorithm::ALL {
        for sigma in 0..5u8 {
            let shift = -shift_per_sigma * sigma as f64;
            for k in 0..2 {
                recs.push(curve(out, alg, Variant::Plain, sigma, Some(k), shift, Status::Ok));
            }
            recs.push(curve(out, alg, Variant::Ensemble, sigma, None, shift, Status::Ok));
        }
    }
    recs
}

#[test]
fn four_algorithms_by_five_sigmas_make_twenty_panels() {
    let dir = tempfile::tempdir().unwrap();
    let recs = full_grid(dir.path(), 0.05);
    let out = emit_plots(&recs, dir.path()).unwrap();
    assert_eq!(out.files, vec![plot_path(dir.path(), TaskName::TgSs, 10_000)]);
    assert!(!out.incomplete);
    let svg = fs::read_to_string(&out.files[0]).unwrap();
    assert_eq!(svg.matches("<g id=\"panel-").count(), 20);
    assert!(!svg.contains("missing"));
}

#[test]
fn identical_inputs_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let recs = full_grid(dir.path(), 0.05);
    let path = emit_plots(&recs, dir.path()).unwrap().files.remove(0);
    let first = fs::read(&path).unwrap();
    let mut shuffled = recs.clone();
    shuffled.reverse();
    emit_plots(&shuffled, dir.path()).unwrap();
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn empty_record_set_is_an_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(emit_plots(&[], dir.path()), Err(BenchError::NoRecords)));
    assert!(!dir.path().join("plots").exists());
}

#[test]
fn missing_curves_are_marked() {
    let dir = tempfile::tempdir().unwrap();
    let mut recs = full_grid(dir.path(), 0.05);
    // Fail every curve of one panel.
    for r in recs.iter_mut().filter(|r| r.algorithm == Algorithm::Nle && r.sigma == 3) {
        *r = curve(dir.path(), r.algorithm, r.variant, r.sigma, r.seed, 0.0, Status::Failed);
    }
    let out = emit_plots(&recs, dir.path()).unwrap();
    assert!(out.incomplete);
    let svg = fs::read_to_string(&out.files[0]).unwrap();
    assert_eq!(svg.matches(">missing<").count(), 1);
}

#[test]
fn diagonal_curves_have_zero_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let recs = full_grid(dir.path(), 0.0);
    let out = emit_report(&recs, dir.path()).unwrap();
    let table = fs::read_to_string(&out.summary).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), recs.len());
    assert_eq!(out.rows, recs.len());
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        for v in &f[7..] {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{row}");
        }
    }
}

#[test]
fn digest_reports_trends_and_flagged_cells() {
    let dir = tempfile::tempdir().unwrap();
    let mut recs = full_grid(dir.path(), 0.05);
    recs.push(curve(dir.path(), Algorithm::Npe, Variant::Sam, 0, Some(0), 0.0, Status::McmcFlagged));
    recs.push(curve(dir.path(), Algorithm::Npe, Variant::Sam, 1, Some(0), 0.0, Status::Failed));
    let out = emit_report(&recs, dir.path()).unwrap();
    // The failed record has no curve.
    assert_eq!(out.rows, recs.len() - 1);
    assert_eq!(out.flagged, 2);
    let digest = fs::read_to_string(&out.digest).unwrap();
    assert!(digest.contains("seed curves per cell: 1, 2"), "{digest}");
    assert!(digest.contains("NPE sam n_train=10000 σ=0 seed=0: mcmc_flagged"));
    assert!(digest.contains("NPE sam n_train=10000 σ=1 seed=0: failed (training diverged)"));
    assert!(digest.contains("NLE plain n_train=10000: median signed area"));
    assert!(digest.contains("coverage degrades monotonically in σ for 8 of 8 rows"), "{digest}");
}
