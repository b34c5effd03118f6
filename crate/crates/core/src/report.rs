//! Aggregation of per-run metric tables into mean ± SEM and SVG bar charts.
//! Everything here is a pure function of the input rows.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{read_metric_csv, MetricRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub mode: String,
    pub metric: String,
    pub submetric: String,
    pub n: usize,
    pub mean: f64,
    /// Standard error of the mean (sample std / √n); 0 for a single run.
    pub sem: f64,
}

pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Groups rows by `(model, mode, metric, submetric)` in order of first
/// appearance and reduces each group to mean ± SEM.
pub fn aggregate(rows: &[MetricRow]) -> Result<Vec<AggregateRow>> {
    if rows.is_empty() {
        return Err(Error::contract("no metric rows to aggregate"));
    }
    let mut order: Vec<(String, String, String, String)> = Vec::new();
    let mut values: HashMap<(String, String, String, String), Vec<f64>> = HashMap::new();
    for r in rows {
        let key = (r.model.clone(), r.mode.clone(), r.metric.clone(), r.submetric.clone());
        values
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r.value);
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let v = &values[&key];
            let (mean, sem) = mean_sem(v);
            let (model, mode, metric, submetric) = key;
            AggregateRow {
                model,
                mode,
                metric,
                submetric,
                n: v.len(),
                mean,
                sem,
            }
        })
        .collect())
}

pub fn write_aggregate_csv(path: impl AsRef<Path>, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

const PALETTE: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Smallest value of the form {1, 2, 5}·10^k that is ≥ `x`.
fn nice_ceiling(x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 || !x.is_finite() {
        return 1.0;
    }
    let base = 10f64.powf(x.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * base)
        .find(|&c| c >= x * (1.0 - 1e-12))
        .unwrap_or(10.0 * base)
}

/// Bar chart for one metric: one group per `(model, submetric)`, one bar per
/// mode, SEM error bars.
pub fn bar_chart_svg(metric: &str, rows: &[AggregateRow]) -> String {
    let rows: Vec<&AggregateRow> = rows.iter().filter(|r| r.metric == metric).collect();
    let mut groups: Vec<(String, String)> = Vec::new();
    let mut modes: Vec<String> = Vec::new();
    for r in &rows {
        let g = (r.model.clone(), r.submetric.clone());
        if !groups.contains(&g) {
            groups.push(g);
        }
        if !modes.contains(&r.mode) {
            modes.push(r.mode.clone());
        }
    }
    let multi_model = groups.iter().any(|g| g.0 != groups[0].0);
    let top = nice_ceiling(rows.iter().map(|r| r.mean + r.sem).fold(0.0, f64::max));

    let (bar_w, gap, left, right, top_pad, plot_h, bottom) = (24.0, 24.0, 60.0, 20.0, 40.0, 220.0, 60.0);
    let group_w = bar_w * modes.len().max(1) as f64 + gap;
    let width = left + right + group_w * groups.len().max(1) as f64;
    let height = top_pad + plot_h + bottom;
    let y = |v: f64| top_pad + plot_h * (1.0 - (v / top).clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(metric)
    );
    for i in 0..=4 {
        let v = top * i as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            width - right,
            left - 4.0,
            yy + 4.0,
            format_tick(v)
        );
    }
    for (gi, (model, sub)) in groups.iter().enumerate() {
        let gx = left + gap / 2.0 + gi as f64 * group_w;
        for (mi, mode) in modes.iter().enumerate() {
            let Some(r) = rows.iter().find(|r| &r.model == model && &r.submetric == sub && &r.mode == mode) else {
                continue;
            };
            let x = gx + mi as f64 * bar_w;
            let (y0, y1) = (y(r.mean), y(0.0));
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{} {} {}: {:.4} ± {:.4} (n={})</title></rect>"#,
                bar_w - 2.0,
                y1 - y0,
                PALETTE[mi % PALETTE.len()],
                escape(model),
                escape(sub),
                escape(mode),
                r.mean,
                r.sem,
                r.n
            );
            if r.sem > 0.0 {
                let cx = x + (bar_w - 2.0) / 2.0;
                let (ya, yb) = (y(r.mean + r.sem), y((r.mean - r.sem).max(0.0)));
                let _ = writeln!(
                    s,
                    r#"<line x1="{cx:.2}" y1="{ya:.2}" x2="{cx:.2}" y2="{yb:.2}" stroke="black"/><line x1="{:.2}" y1="{ya:.2}" x2="{:.2}" y2="{ya:.2}" stroke="black"/><line x1="{:.2}" y1="{yb:.2}" x2="{:.2}" y2="{yb:.2}" stroke="black"/>"#,
                    cx - 4.0,
                    cx + 4.0,
                    cx - 4.0,
                    cx + 4.0
                );
            }
        }
        let label = if multi_model { format!("{model} {sub}") } else { sub.clone() };
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            gx + bar_w * modes.len() as f64 / 2.0,
            top_pad + plot_h + 16.0,
            escape(&label)
        );
    }
    for (mi, mode) in modes.iter().enumerate() {
        let x = left + mi as f64 * 80.0;
        let yy = height - 16.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="10" height="10" fill="{}"/><text x="{:.2}" y="{yy:.2}">{}</text>"#,
            yy - 9.0,
            PALETTE[mi % PALETTE.len()],
            x + 14.0,
            escape(mode)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Reads every eval CSV, writes `report.csv` and one `<metric>.svg` per
/// metric into `out_dir`; returns the written paths.
pub fn write_report(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(Error::contract("report needs at least one metric CSV"));
    }
    let mut rows = Vec::new();
    for p in inputs {
        rows.extend(read_metric_csv(p)?);
    }
    let agg = aggregate(&rows)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let csv_path = out_dir.join("report.csv");
    write_aggregate_csv(&csv_path, &agg)?;
    written.push(csv_path);
    let mut metrics: Vec<&str> = Vec::new();
    for r in &agg {
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    for m in metrics {
        let safe: String = m.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        let path = out_dir.join(format!("{safe}.svg"));
        std::fs::write(&path, bar_chart_svg(m, &agg)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
