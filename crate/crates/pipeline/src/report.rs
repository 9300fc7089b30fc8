//! Summary tables and trend plots from an evaluation CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use morphoflow_core::io::create_dir;
use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::eval::EvalRow;

pub const SUMMARY_FILE: &str = "summary.csv";

/// Distribution-level image metrics are not computed; these stand in.
pub const SUBSTITUTION_NOTE: &str =
    "FID and KID need a pretrained 3D feature network and are not computed; PSNR, SSIM and Dice are reported instead.";

/// Aggregate of one metric at one frame (`frame == 0` pools all frames).
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub metric: &'static str,
    pub frame: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

type Getter = fn(&EvalRow) -> Option<f64>;

const METRICS: [(&str, Getter); 4] = [
    ("psnr", |r| Some(r.psnr)),
    ("ssim", |r| Some(r.ssim)),
    ("dice", |r| r.dice),
    ("neg_detjac_fraction", |r| r.neg_detjac_fraction),
];

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Per-frame and pooled mean and standard deviation of every metric that
/// has values.
pub fn summarize(rows: &[EvalRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for (metric, get) in METRICS {
        let mut by_frame: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in rows {
            if let Some(v) = get(r) {
                by_frame.entry(r.frame).or_default().push(v);
            }
        }
        if by_frame.is_empty() {
            continue;
        }
        let all: Vec<f64> = by_frame.values().flatten().copied().collect();
        by_frame.insert(0, all);
        for (frame, v) in by_frame {
            let (mean, std) = mean_std(&v);
            out.push(SummaryRow { metric, frame, mean, std, n: v.len() });
        }
    }
    out
}

pub fn summary_csv(summary: &[SummaryRow]) -> String {
    let mut s = String::from("metric,frame,mean,std,n\n");
    for r in summary {
        let frame = if r.frame == 0 { "all".to_string() } else { r.frame.to_string() };
        let _ = writeln!(s, "{},{frame},{:.9},{:.9},{}", r.metric, r.mean, r.std, r.n);
    }
    s
}

const SERIES: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_metric(path: &Path, rows: &[EvalRow], get: Getter, mean: &[(f64, f64)]) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot { path: path.to_path_buf(), reason: e.to_string() };
    let mut subjects: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        if let Some(v) = get(r) {
            subjects.entry(&r.subject).or_default().push((r.frame as f64, v));
        }
    }
    let values: Vec<f64> = subjects.values().flatten().map(|p| p.1).collect();
    let (mut lo, mut hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pad = ((hi - lo) * 0.05).max(1e-9);
    lo -= pad;
    hi += pad;
    let frames = rows.iter().map(|r| r.frame).max().unwrap_or(1) as f64;

    let root = BitMapBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let area = root.margin(20, 20, 20, 20);
    let mut chart = ChartBuilder::on(&area)
        .build_cartesian_2d(0.75..frames + 0.25, lo..hi)
        .map_err(|e| plot_err(&e))?;
    chart
        .plotting_area()
        .draw(&Rectangle::new([(0.75, lo), (frames + 0.25, hi)], BLACK.stroke_width(1)))
        .map_err(|e| plot_err(&e))?;
    for (i, pts) in subjects.values().enumerate() {
        let color = SERIES[i % SERIES.len()].mix(0.5);
        chart.draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(1))).map_err(|e| plot_err(&e))?;
    }
    chart.draw_series(LineSeries::new(mean.iter().copied(), BLACK.stroke_width(3))).map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// Writes `summary.csv` and one `<metric>.png` per available metric into
/// `dir`. Each plot draws one thin line per subject over frames and the
/// per-frame mean in bold. Returns the files written.
pub fn write_report(rows: &[EvalRow], dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::usage("evaluation CSV has no rows"));
    }
    create_dir(dir)?;
    let summary = summarize(rows);
    let path = dir.join(SUMMARY_FILE);
    std::fs::write(&path, summary_csv(&summary)).map_err(|e| Error::io(&path, e))?;
    let mut written = vec![path];
    for (metric, get) in METRICS {
        let mean: Vec<(f64, f64)> =
            summary.iter().filter(|s| s.metric == metric && s.frame > 0).map(|s| (s.frame as f64, s.mean)).collect();
        if mean.is_empty() {
            continue;
        }
        let path = dir.join(format!("{metric}.png"));
        plot_metric(&path, rows, get, &mean)?;
        written.push(path);
    }
    Ok(written)
}
