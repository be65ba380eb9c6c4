//! Coverage panel grids as SVG: one file per (task, n_train), σ levels as
//! columns and algorithms as rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use covbench_core::tasks::TaskName;

use crate::config::{Algorithm, Variant};
use crate::error::{BenchError, Result};
use crate::records::{latest_records, write_atomic, CurveRows, RunRecord};

const PANEL: f64 = 150.0;
const GAP: f64 = 24.0;
const LEFT: f64 = 110.0;
const TOP: f64 = 64.0;
const BOTTOM: f64 = 48.0;
const SEED_COLOURS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotOutcome {
    pub files: Vec<PathBuf>,
    /// Some expected curve was missing or failed.
    pub incomplete: bool,
}

/// A row of the grid: an algorithm with its training variant. Ensemble
/// curves are drawn in the plain row they were built from.
type RowKey = (Algorithm, bool);

#[derive(Default)]
struct Panel {
    seeds: Vec<(usize, CurveRows)>,
    ensemble: Option<CurveRows>,
    missing: usize,
}

pub fn plot_path(out_dir: &Path, task: TaskName, n_train: usize) -> PathBuf {
    out_dir.join("plots").join(format!("{task}_n{n_train}.svg"))
}

/// Renders every (task, n_train) present in `records`, reading curve files
/// relative to `out_dir`.
pub fn emit_plots(records: &[RunRecord], out_dir: &Path) -> Result<PlotOutcome> {
    if records.is_empty() {
        return Err(BenchError::NoRecords);
    }
    let latest = latest_records(records);
    let mut grids: BTreeMap<(TaskName, usize), BTreeMap<(RowKey, u8), Panel>> = BTreeMap::new();
    for r in &latest {
        let row = (r.algorithm, r.variant == Variant::Sam);
        let panel = grids
            .entry((r.task, r.n_train))
            .or_default()
            .entry((row, r.sigma))
            .or_default();
        let curve = match r.curve_path() {
            Some(p) => CurveRows::read(&out_dir.join(p)).ok(),
            None => None,
        };
        match (curve, r.seed) {
            (Some(c), Some(k)) => panel.seeds.push((k, c)),
            (Some(c), None) => panel.ensemble = Some(c),
            (None, _) => panel.missing += 1,
        }
    }

    let mut outcome = PlotOutcome::default();
    for ((task, n_train), panels) in grids {
        let rows: BTreeSet<RowKey> = panels.keys().map(|(r, _)| *r).collect();
        let cols: BTreeSet<u8> = panels.keys().map(|(_, s)| *s).collect();
        let (svg, incomplete) = render(task, n_train, &rows, &cols, &panels);
        let path = plot_path(out_dir, task, n_train);
        write_atomic(&path, svg.as_bytes())?;
        outcome.files.push(path);
        outcome.incomplete |= incomplete;
    }
    Ok(outcome)
}

fn row_label((alg, sam): RowKey) -> String {
    if sam {
        format!("{alg} + SAM")
    } else {
        alg.to_string()
    }
}

fn polyline(rows: &CurveRows, values: &[f64], x0: f64, y0: f64) -> String {
    let mut idx: Vec<usize> = (0..rows.nominal.len()).collect();
    idx.sort_by(|&a, &b| rows.nominal[a].total_cmp(&rows.nominal[b]));
    idx.iter()
        .map(|&i| format!("{:.2},{:.2}", x0 + rows.nominal[i] * PANEL, y0 + (1.0 - values[i]) * PANEL))
        .collect::<Vec<_>>()
        .join(" ")
}

fn band(rows: &CurveRows, x0: f64, y0: f64) -> String {
    let mut idx: Vec<usize> = (0..rows.nominal.len()).collect();
    idx.sort_by(|&a, &b| rows.nominal[a].total_cmp(&rows.nominal[b]));
    let upper = idx
        .iter()
        .map(|&i| format!("{:.2},{:.2}", x0 + rows.nominal[i] * PANEL, y0 + (1.0 - rows.band_hi[i]) * PANEL));
    let lower = idx
        .iter()
        .rev()
        .map(|&i| format!("{:.2},{:.2}", x0 + rows.nominal[i] * PANEL, y0 + (1.0 - rows.band_lo[i]) * PANEL));
    upper.chain(lower).collect::<Vec<_>>().join(" ")
}

fn render(
    task: TaskName,
    n_train: usize,
    rows: &BTreeSet<RowKey>,
    cols: &BTreeSet<u8>,
    panels: &BTreeMap<(RowKey, u8), Panel>,
) -> (String, bool) {
    let width = LEFT + cols.len() as f64 * (PANEL + GAP);
    let height = TOP + rows.len() as f64 * (PANEL + GAP) + BOTTOM;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{LEFT:.0}" y="20" font-size="14" font-weight="bold">{task}, n_train = {n_train}</text>"#
    );
    let mut incomplete = false;
    for (c, sigma) in cols.iter().enumerate() {
        let x = LEFT + c as f64 * (PANEL + GAP) + PANEL / 2.0;
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">σ = {sigma}</text>"#, TOP - 10.0);
    }
    for (r, row) in rows.iter().enumerate() {
        let y0 = TOP + r as f64 * (PANEL + GAP);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 14.0,
            y0 + PANEL / 2.0,
            row_label(*row)
        );
        for (c, sigma) in cols.iter().enumerate() {
            let x0 = LEFT + c as f64 * (PANEL + GAP);
            let _ = writeln!(s, r#"<g id="panel-{}-{sigma}">"#, row_label(*row).replace(' ', ""));
            let _ = writeln!(
                s,
                r##"<rect x="{x0:.2}" y="{y0:.2}" width="{PANEL:.0}" height="{PANEL:.0}" fill="none" stroke="#444"/>"##
            );
            let _ = writeln!(
                s,
                r##"<line x1="{x0:.2}" y1="{:.2}" x2="{:.2}" y2="{y0:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
                y0 + PANEL,
                x0 + PANEL
            );
            let empty = Panel::default();
            let p = panels.get(&(*row, *sigma)).unwrap_or(&empty);
            if let Some(e) = &p.ensemble {
                let _ = writeln!(s, r##"<polygon points="{}" fill="#000" fill-opacity="0.12" stroke="none"/>"##, band(e, x0, y0));
            } else {
                for (_, c) in &p.seeds {
                    let _ = writeln!(s, r##"<polygon points="{}" fill="#000" fill-opacity="0.05" stroke="none"/>"##, band(c, x0, y0));
                }
            }
            for (k, c) in &p.seeds {
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1"/>"#,
                    polyline(c, &c.empirical, x0, y0),
                    SEED_COLOURS[k % SEED_COLOURS.len()]
                );
            }
            if let Some(e) = &p.ensemble {
                let _ = writeln!(
                    s,
                    r##"<polyline points="{}" fill="none" stroke="#000" stroke-width="2.5"/>"##,
                    polyline(e, &e.empirical, x0, y0)
                );
            }
            let nothing = p.seeds.is_empty() && p.ensemble.is_none();
            if nothing {
                incomplete = true;
                let _ = writeln!(
                    s,
                    r##"<text x="{:.2}" y="{:.2}" text-anchor="middle" fill="#b00" font-size="14">missing</text>"##,
                    x0 + PANEL / 2.0,
                    y0 + PANEL / 2.0
                );
            } else if p.missing > 0 {
                incomplete = true;
                let _ = writeln!(
                    s,
                    r##"<text x="{:.2}" y="{:.2}" fill="#b00">missing {}</text>"##,
                    x0 + 4.0,
                    y0 + 14.0,
                    p.missing
                );
            }
            let _ = writeln!(s, "</g>");
        }
    }
    let axis_y = TOP + rows.len() as f64 * (PANEL + GAP) - GAP + 14.0;
    for c in 0..cols.len() {
        let x0 = LEFT + c as f64 * (PANEL + GAP);
        for (v, anchor) in [(0.0, "start"), (0.5, "middle"), (1.0, "end")] {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{axis_y:.2}" text-anchor="{anchor}" font-size="9">{v}</text>"#,
                x0 + v * PANEL
            );
        }
    }
    let _ = writeln!(
        s,
        r##"<text x="{LEFT:.0}" y="{:.2}" fill="#444">x: nominal coverage 1 − α, y: empirical coverage. Thin: seeds, thick: ensemble, shaded: cluster-bootstrap band over observations.</text>"##,
        height - 12.0
    );
    let _ = writeln!(s, "</svg>");
    (s, incomplete)
}
