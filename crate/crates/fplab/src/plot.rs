//! Deterministic SVG charts for runs and sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fplab_core::fl::Role;

use crate::error::{HarnessError, Result};
use crate::experiment::{MisFile, MIS_FILE, ROUND_LOG};
use crate::io::{read_json, read_round_log};
use crate::sweep::{read_sweep_table, SWEEP_TABLE};

pub const ROUND_CHART: &str = "acc_asr.svg";
pub const SWEEP_CHART: &str = "sweep.svg";
pub const MIS_CHART: &str = "mis_scatter.svg";

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

pub struct Series {
    pub name: String,
    pub color: &'static str,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>, default: [f64; 4]) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return Frame { x0: default[0], x1: default[1], y0: default[2], y1: default[3] };
        }
        let pad = |a: f64, b: f64| if b - a < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn header(svg: &mut String, title: &str) {
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn axes(svg: &mut String, f: &Frame, x_label: &str, y_label: &str, x_ticks: &[f64]) {
    let (bx, by) = (LEFT, H - BOTTOM);
    let _ = writeln!(
        svg,
        "<g class=\"axes\" stroke=\"black\"><line x1=\"{bx}\" y1=\"{by}\" x2=\"{}\" y2=\"{by}\"/><line x1=\"{bx}\" y1=\"{by}\" x2=\"{bx}\" y2=\"{TOP}\"/></g>",
        W - RIGHT
    );
    for &t in x_ticks {
        let x = f.px(t);
        let _ = writeln!(
            svg,
            "<g class=\"xtick\"><line x1=\"{x:.2}\" y1=\"{by}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"black\"/><text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text></g>",
            by + 5.0,
            by + 18.0,
            fmt_tick(t)
        );
    }
    for i in 0..=4 {
        let v = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let y = f.py(v);
        let _ = writeln!(
            svg,
            "<g class=\"ytick\"><line x1=\"{}\" y1=\"{y:.2}\" x2=\"{bx}\" y2=\"{y:.2}\" stroke=\"black\"/><text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{}</text></g>",
            bx - 5.0,
            bx - 8.0,
            y + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        (LEFT + W - RIGHT) / 2.0,
        H - 10.0,
        escape(x_label),
        (TOP + H - BOTTOM) / 2.0,
        (TOP + H - BOTTOM) / 2.0,
        escape(y_label)
    );
}

fn legend(svg: &mut String, entries: &[(&str, &str)]) {
    for (i, (name, color)) in entries.iter().enumerate() {
        let x = LEFT + 10.0 + 110.0 * i as f64;
        let _ = writeln!(
            svg,
            "<g class=\"legend\"><rect x=\"{x}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/><text x=\"{}\" y=\"{}\">{}</text></g>",
            TOP - 8.0,
            x + 16.0,
            TOP + 2.0,
            escape(name)
        );
    }
}

fn default_ticks(f: &Frame) -> Vec<f64> {
    (0..=5).map(|i| f.x0 + (f.x1 - f.x0) * i as f64 / 5.0).collect()
}

/// Line chart on a [0, 1] y axis. `x_ticks` overrides the evenly spaced
/// default ticks.
pub fn line_chart(title: &str, x_label: &str, series: &[Series], x_ticks: Option<&[f64]>) -> String {
    let mut f = Frame::fit(series.iter().flat_map(|s| s.points.iter().copied()), [0.0, 1.0, 0.0, 1.0]);
    f.y0 = 0.0;
    f.y1 = 1.0;
    let mut svg = String::new();
    header(&mut svg, title);
    let ticks = x_ticks.map_or_else(|| default_ticks(&f), <[f64]>::to_vec);
    axes(&mut svg, &f, x_label, "rate", &ticks);
    for s in series.iter().filter(|s| !s.points.is_empty()) {
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        let _ = writeln!(
            svg,
            "<polyline class=\"series\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
            s.color,
            pts.join(" ")
        );
    }
    legend(&mut svg, &series.iter().map(|s| (s.name.as_str(), s.color)).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Scatter of projected models, one circle per model, colored by role.
pub fn mis_scatter(report: &MisFile) -> String {
    let pts = &report.report.points;
    let f = Frame::fit(pts.iter().map(|p| (p.point[0], p.point[1])), [-1.0, 1.0, -1.0, 1.0]);
    let mut svg = String::new();
    header(&mut svg, &format!("Projected local models, round {}", report.round));
    axes(&mut svg, &f, "PC1", "PC2", &default_ticks(&f));
    for p in pts {
        let (class, color) = match p.role {
            Role::Benign => ("benign", "#1f77b4"),
            Role::Malicious => ("malicious", "#d62728"),
        };
        let _ = writeln!(
            svg,
            "<circle class=\"{class}\" data-client=\"{}\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"5\" fill=\"{color}\"/>",
            p.client_id,
            f.px(p.point[0]),
            f.py(p.point[1])
        );
    }
    legend(&mut svg, &[("benign", "#1f77b4"), ("malicious", "#d62728")]);
    svg.push_str("</svg>\n");
    svg
}

fn write(path: PathBuf, text: &str, made: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, text).map_err(HarnessError::io(&path))?;
    made.push(path);
    Ok(())
}

/// Renders whatever the directory holds: a round log (plus stealth report)
/// for a run, a sweep table for a sweep. Returns the files written.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let log = dir.join(ROUND_LOG);
    let table = dir.join(SWEEP_TABLE);
    let mut made = Vec::new();
    if log.is_file() {
        let records = read_round_log(&log)?;
        let acc = records.iter().map(|r| (f64::from(r.round), r.acc)).collect();
        let asr = records.iter().map(|r| (f64::from(r.round), r.asr)).collect();
        let series = [
            Series { name: "ACC".into(), color: "#1f77b4", points: acc },
            Series { name: "ASR".into(), color: "#d62728", points: asr },
        ];
        write(dir.join(ROUND_CHART), &line_chart("Accuracy and attack success", "round", &series, None), &mut made)?;
        let mis = dir.join(MIS_FILE);
        if mis.is_file() {
            let report: MisFile = read_json(&mis)?;
            write(dir.join(MIS_CHART), &mis_scatter(&report), &mut made)?;
        }
    }
    if table.is_file() {
        let rows = read_sweep_table(&table)?;
        let param = rows.first().map_or_else(|| "value".to_string(), |r| r.param.clone());
        let xs: Vec<f64> = rows.iter().map(|r| r.value).collect();
        let pick = |f: fn(&crate::sweep::SweepTableRow) -> Option<f64>| {
            rows.iter().filter_map(|r| f(r).map(|y| (r.value, y))).collect::<Vec<_>>()
        };
        let series = [
            Series { name: "ACC".into(), color: "#1f77b4", points: pick(|r| r.acc_mean) },
            Series { name: "ASR".into(), color: "#d62728", points: pick(|r| r.asr_mean) },
        ];
        let chart = line_chart(&format!("Final ACC and ASR vs {param}"), &param, &series, Some(&xs));
        write(dir.join(SWEEP_CHART), &chart, &mut made)?;
    }
    if made.is_empty() {
        return Err(HarnessError::Validation(format!(
            "{}: nothing to plot; expected {ROUND_LOG} (run directory, optionally with {MIS_FILE}) or {SWEEP_TABLE} (sweep directory)",
            dir.display()
        )));
    }
    Ok(made)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_deterministic_and_counts_ticks() {
        let s = [Series { name: "ASR".into(), color: "red", points: vec![(0.1, 0.2), (0.2, 0.4), (0.4, 0.9)] }];
        let a = line_chart("t", "pmr", &s, Some(&[0.1, 0.2, 0.4]));
        assert_eq!(a, line_chart("t", "pmr", &s, Some(&[0.1, 0.2, 0.4])));
        assert_eq!(a.matches("class=\"xtick\"").count(), 3);
        assert_eq!(a.matches("<polyline").count(), 1);
    }

    #[test]
    fn empty_chart_still_has_axes() {
        let svg = line_chart("t", "round", &[Series { name: "ACC".into(), color: "blue", points: vec![] }], None);
        assert!(svg.contains("class=\"axes\""));
        assert_eq!(svg.matches("<polyline").count(), 0);
    }

    #[test]
    fn tick_labels_are_compact() {
        assert_eq!(fmt_tick(0.1), "0.1");
        assert_eq!(fmt_tick(150.0), "150");
        assert_eq!(fmt_tick(-0.0001), "0");
    }
}
