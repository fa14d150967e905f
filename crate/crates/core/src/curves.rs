//! CSV and SVG output for training curves, energy traces and IoU tables.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MeanIou;
use crate::pgm::write_atomic;
use crate::train::TrainingCurve;

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::InvalidValue(format!("csv encoding failed: {e}"));
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(&row).map_err(fail)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidValue(format!("csv encoding failed: {e}")))
}

/// One row per iteration: `iter,ce,ls,total,miou`; `miou` is empty unless an evaluation ran then.
pub fn training_curve_csv(curve: &TrainingCurve) -> Result<Vec<u8>> {
    let miou_at = |iter: usize| {
        curve
            .evals
            .iter()
            .find(|e| e.iter == iter)
            .map(|e| format!("{:e}", e.miou))
            .unwrap_or_default()
    };
    let initial = curve
        .evals
        .first()
        .filter(|e| e.iter == 0)
        .map(|e| vec!["0".into(), String::new(), String::new(), String::new(), format!("{:e}", e.miou)]);
    let rows = initial.into_iter().chain(curve.iterations.iter().map(|it| {
        vec![
            it.iter.to_string(),
            format!("{:e}", it.report.ce),
            format!("{:e}", it.report.ls),
            format!("{:e}", it.report.total),
            miou_at(it.iter),
        ]
    }));
    csv_bytes(&["iter", "ce", "ls", "total", "miou"], rows)
}

/// `iter,energy` with the initial energy at iteration 0.
pub fn energy_trace_csv(trace: &[f64]) -> Result<Vec<u8>> {
    csv_bytes(
        &["iter", "energy"],
        trace
            .iter()
            .enumerate()
            .map(|(i, e)| vec![i.to_string(), format!("{e:e}")]),
    )
}

/// `class,iou` rows followed by a `mean` row; classes absent everywhere have an empty IoU.
pub fn iou_table_csv(m: &MeanIou) -> Result<Vec<u8>> {
    let rows = m
        .per_class
        .iter()
        .enumerate()
        .map(|(c, iou)| vec![c.to_string(), iou.map(|v| format!("{v:e}")).unwrap_or_default()])
        .chain(std::iter::once(vec!["mean".into(), format!("{:e}", m.miou)]));
    csv_bytes(&["class", "iou"], rows)
}

pub fn write_csv(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}

/// A named polyline.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// A self-contained SVG line chart; each series gets its own y scale when `normalize` is set.
pub fn line_plot_svg(title: &str, x_label: &str, series: &[Series], normalize: bool) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let finite = |s: &Series| -> Vec<(f64, f64)> {
        s.points
            .iter()
            .copied()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect()
    };
    let all: Vec<(f64, f64)> = series.iter().flat_map(finite).collect();
    let range = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo.is_finite() && hi > lo {
            (lo, hi)
        } else if lo.is_finite() {
            (lo - 0.5, lo + 0.5)
        } else {
            (0.0, 1.0)
        }
    };
    let (x0, x1) = range(&mut all.iter().map(|p| p.0));
    let (gy0, gy1) = range(&mut all.iter().map(|p| p.1));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        w / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{pad}" y="{}" font-family="sans-serif" font-size="10">{x0}</text><text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{x1}</text>"#,
        h - pad + 14.0,
        w - pad,
        h - pad + 14.0
    );
    if !normalize {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{gy1:.4}</text><text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{gy0:.4}</text>"#,
            pad - 4.0,
            pad + 4.0,
            pad - 4.0,
            h - pad
        );
    }
    for (i, s) in series.iter().enumerate() {
        let pts = finite(s);
        let (y0, y1) = if normalize {
            range(&mut pts.iter().map(|p| p.1))
        } else {
            (gy0, gy1)
        };
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let px = pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
                let py = h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}" font-family="sans-serif" font-size="12">{}</text>"#,
            w - pad - 150.0,
            pad + 16.0 * i as f64,
            escape(s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Loss components and evaluation mIoU against iteration, each on its own scale.
pub fn training_curve_svg(curve: &TrainingCurve, smoothing: usize) -> String {
    let iters: Vec<f64> = curve.iterations.iter().map(|i| i.iter as f64).collect();
    let smooth = |f: &dyn Fn(&crate::train::IterationLog) -> f64| {
        let raw: Vec<f64> = curve.iterations.iter().map(f).collect();
        crate::metrics::moving_average(&raw, smoothing)
    };
    let ce = smooth(&|i| i.report.ce);
    let ls = smooth(&|i| i.report.ls);
    let series = [
        Series {
            name: "cross-entropy",
            points: iters.iter().copied().zip(ce).collect(),
        },
        Series {
            name: "level set energy",
            points: iters.iter().copied().zip(ls).collect(),
        },
        Series {
            name: "eval mIoU",
            points: curve.evals.iter().map(|e| (e.iter as f64, e.miou)).collect(),
        },
    ];
    line_plot_svg("training curves (each series rescaled)", "iteration", &series, true)
}
