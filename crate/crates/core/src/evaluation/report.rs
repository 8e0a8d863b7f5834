use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    ConvergenceCurve, ConvergencePoint, DomainTag, EncoderKind, EvalReport, EvalRow, Framework,
};
use crate::error::{Error, Result};

use super::grid::{median, ratio_label};

pub const GRID_CSV: &str = "grid.csv";
pub const GRID_MD: &str = "grid.md";
pub const CONVERGENCE_DIR: &str = "convergence";

/// A `grid.csv` line: the row plus flags marking the best framework of its
/// (encoder, test domain, ratio, seed) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    encoder: EncoderKind,
    framework: Framework,
    label_ratio: f64,
    train_domain: DomainTag,
    test_domain: DomainTag,
    seed: u64,
    accuracy: f64,
    macro_f1: f64,
    best_accuracy: bool,
    best_macro_f1: bool,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Dataset(format!("{}: {other:?}", path.display())),
    }
}

type Group = (EncoderKind, DomainTag, u64, u64);

fn group_of(row: &EvalRow) -> Group {
    (row.encoder, row.test_domain, row.label_ratio.to_bits(), row.seed)
}

fn best_per_group(rows: &[EvalRow]) -> BTreeMap<Group, (f64, f64)> {
    let mut best: BTreeMap<Group, (f64, f64)> = BTreeMap::new();
    for r in rows {
        let e = best.entry(group_of(r)).or_insert((f64::NEG_INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.max(r.accuracy);
        e.1 = e.1.max(r.macro_f1);
    }
    best
}

fn write_grid_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let best = best_per_group(rows);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let (ba, bf) = best[&group_of(r)];
        w.serialize(CsvRow {
            encoder: r.encoder,
            framework: r.framework,
            label_ratio: r.label_ratio,
            train_domain: r.train_domain,
            test_domain: r.test_domain,
            seed: r.seed,
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
            best_accuracy: r.accuracy == ba,
            best_macro_f1: r.macro_f1 == bf,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_grid_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row.map_err(|e| csv_err(path, e))?;
            Ok(EvalRow {
                encoder: row.encoder,
                framework: row.framework,
                label_ratio: row.label_ratio,
                train_domain: row.train_domain,
                test_domain: row.test_domain,
                accuracy: row.accuracy,
                macro_f1: row.macro_f1,
                seed: row.seed,
            })
        })
        .collect()
}

/// Median-over-seeds tables, one per test domain. Columns are grouped by
/// label ratio from largest to smallest; the best framework of each encoder
/// block is bold in every column.
pub fn render_markdown(report: &EvalReport) -> String {
    let rows = &report.rows;
    let mut ratios: Vec<f64> = rows.iter().map(|r| r.label_ratio).collect();
    ratios.sort_by(|a, b| b.total_cmp(a));
    ratios.dedup();
    let encoders: BTreeSet<EncoderKind> = rows.iter().map(|r| r.encoder).collect();
    let frameworks: BTreeSet<Framework> = rows.iter().map(|r| r.framework).collect();
    let pairs: BTreeSet<(DomainTag, DomainTag)> = rows.iter().map(|r| (r.train_domain, r.test_domain)).collect();
    let seeds: BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();

    let mut out = String::new();
    let _ = writeln!(out, "# Evaluation grid\n");
    if rows.iter().all(|r| r.train_domain.is_synthetic() && r.test_domain.is_synthetic()) {
        let _ = writeln!(out, "Data: SYNTH (synthetic generator).\n");
    }
    let _ = writeln!(out, "Median over {} seed(s). Bold marks the best framework per encoder and column.\n", seeds.len());
    for (train, test) in pairs {
        let _ = writeln!(out, "## Trained on {train}, tested on {test}\n");
        let mut header = String::from("| Encoder | Framework |");
        let mut rule = String::from("|---|---|");
        for r in &ratios {
            let _ = write!(header, " {}% Acc | {}% F1 |", ratio_label(*r), ratio_label(*r));
            rule.push_str("---|---|");
        }
        let _ = writeln!(out, "{header}\n{rule}");
        for &enc in &encoders {
            let cell = |fw: Framework, ratio: f64| -> Option<(f64, f64)> {
                let sel: Vec<&EvalRow> = rows
                    .iter()
                    .filter(|r| {
                        r.encoder == enc
                            && r.framework == fw
                            && r.label_ratio == ratio
                            && r.train_domain == train
                            && r.test_domain == test
                    })
                    .collect();
                let acc: Vec<f64> = sel.iter().map(|r| r.accuracy).collect();
                let f1: Vec<f64> = sel.iter().map(|r| r.macro_f1).collect();
                Some((median(&acc)?, median(&f1)?))
            };
            let best: Vec<(f64, f64)> = ratios
                .iter()
                .map(|&ratio| {
                    frameworks.iter().filter_map(|&fw| cell(fw, ratio)).fold(
                        (f64::NEG_INFINITY, f64::NEG_INFINITY),
                        |b, (a, f)| (b.0.max(a), b.1.max(f)),
                    )
                })
                .collect();
            for &fw in &frameworks {
                let _ = write!(out, "| {} | {} |", enc.display_name(), fw.display_name());
                for (i, &ratio) in ratios.iter().enumerate() {
                    match cell(fw, ratio) {
                        Some((a, f)) => {
                            let fmt = |v: f64, b: f64| {
                                if v == b { format!(" **{v:.4}** |") } else { format!(" {v:.4} |") }
                            };
                            out.push_str(&fmt(a, best[i].0));
                            out.push_str(&fmt(f, best[i].1));
                        }
                        None => out.push_str(" - | - |"),
                    }
                }
                out.push('\n');
            }
        }
        out.push('\n');
    }
    out
}

fn write_curve_csv(path: &Path, curve: &ConvergenceCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    if curve.points.is_empty() {
        w.write_record(["epoch", "train_accuracy", "eval_accuracy"])
            .map_err(|e| csv_err(path, e))?;
    }
    for p in &curve.points {
        w.serialize(p).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve_csv(path: &Path) -> Result<ConvergenceCurve> {
    let cell = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Dataset(format!("{} has no file stem", path.display())))?
        .to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let points = r
        .deserialize::<ConvergencePoint>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))?;
    Ok(ConvergenceCurve { cell, points })
}

/// Line plot of training (blue) and validation (red) accuracy against
/// epoch, accuracy axis fixed to [0, 1].
fn plot_curve(path: &Path, curve: &ConvergenceCurve) -> Result<()> {
    let plot_err = |e: String| Error::Dataset(format!("{}: {e}", path.display()));
    let root = BitMapBackend::new(path, (480, 320)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let epochs = curve.points.last().map_or(1, |p| p.epoch.max(1));
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .build_cartesian_2d(0f64..epochs as f64, 0f64..1f64)
        .map_err(|e| plot_err(e.to_string()))?;
    let frame = [(0.0, 0.0), (epochs as f64, 0.0), (epochs as f64, 1.0), (0.0, 1.0), (0.0, 0.0)];
    chart
        .draw_series(LineSeries::new(frame, BLACK.stroke_width(1)))
        .map_err(|e| plot_err(e.to_string()))?;
    for level in [0.25, 0.5, 0.75] {
        chart
            .draw_series(LineSeries::new([(0.0, level), (epochs as f64, level)], RGBColor(220, 220, 220)))
            .map_err(|e| plot_err(e.to_string()))?;
    }
    let series = |f: fn(&ConvergencePoint) -> f64| -> Vec<(f64, f64)> {
        curve
            .points
            .iter()
            .filter(|p| f(p).is_finite())
            .map(|p| (p.epoch as f64, f(p)))
            .collect()
    };
    chart
        .draw_series(LineSeries::new(series(|p| p.train_accuracy), BLUE.stroke_width(2)))
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .draw_series(LineSeries::new(series(|p| p.eval_accuracy), RED.stroke_width(2)))
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))
}

/// Writes `grid.csv`, `grid.md` and per-cell convergence CSV and PNG files
/// under `dir`. Returns the written paths.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        return Err(Error::Empty);
    }
    report.check()?;
    let curves_dir = dir.join(CONVERGENCE_DIR);
    std::fs::create_dir_all(&curves_dir).map_err(|e| Error::io(&curves_dir, e))?;
    let mut written = Vec::new();
    let csv_path = dir.join(GRID_CSV);
    write_grid_csv(&csv_path, &report.rows)?;
    written.push(csv_path);
    let md_path = dir.join(GRID_MD);
    std::fs::write(&md_path, render_markdown(report)).map_err(|e| Error::io(&md_path, e))?;
    written.push(md_path);
    for curve in &report.curves {
        let csv_path = curves_dir.join(format!("{}.csv", curve.cell));
        write_curve_csv(&csv_path, curve)?;
        let png_path = curves_dir.join(format!("{}.png", curve.cell));
        plot_curve(&png_path, curve)?;
        written.push(csv_path);
        written.push(png_path);
    }
    Ok(written)
}

/// Reads back a report written by [`emit_report`].
pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let rows = read_grid_csv(&dir.join(GRID_CSV))?;
    let curves_dir = dir.join(CONVERGENCE_DIR);
    let mut curves = Vec::new();
    if curves_dir.is_dir() {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&curves_dir)
            .map_err(|e| Error::io(&curves_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        paths.sort();
        for p in paths {
            curves.push(read_curve_csv(&p)?);
        }
    }
    Ok(EvalReport { rows, curves })
}
