//! Static SVG rendering of training logs and result CSVs.

use std::path::Path;

use plotters::prelude::*;
use whvi::bnn::LogRecord;

use crate::error::{CliError, Result};

/// One named series of `(x, y)` points.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Figure<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    /// Plot `log10` of the coordinate; non-positive values are dropped.
    pub log_x: bool,
    pub log_y: bool,
    /// Draw markers only, without connecting lines.
    pub scatter: bool,
}

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Plot(e.to_string())
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

/// Writes `series` to an SVG file at `out`.
pub fn render(out: &Path, fig: &Figure, series: &[Series]) -> Result<()> {
    let tf = |v: f64, log: bool| if log { (v > 0.0).then(|| v.log10()) } else { v.is_finite().then_some(v) };
    let data: Vec<(&str, Vec<(f64, f64)>)> = series
        .iter()
        .map(|s| {
            let pts = s.points.iter().filter_map(|&(x, y)| Some((tf(x, fig.log_x)?, tf(y, fig.log_y)?))).collect();
            (s.label.as_str(), pts)
        })
        .collect();
    let (x0, x1) = bounds(data.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = bounds(data.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let axis = |name: &str, log: bool| if log { format!("log10 {name}") } else { name.to_string() };

    let root = SVGBackend::new(out, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(fig.title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(44)
        .y_label_area_size(64)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(axis(fig.x_label, fig.log_x))
        .y_desc(axis(fig.y_label, fig.log_y))
        .draw()
        .map_err(plot_err)?;
    for (i, (label, pts)) in data.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        if fig.scatter {
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?
                .label(*label)
                .legend(move |(x, y)| Circle::new((x + 10, y), 3, color.filled()));
        } else {
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(*label)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// `-ELBO` against step.
pub fn render_log(out: &Path, log: &[LogRecord]) -> Result<()> {
    let series = Series { label: "-ELBO".into(), points: log.iter().map(|r| (r.step as f64, r.neg_elbo)).collect() };
    let fig = Figure { title: "Training objective", x_label: "step", y_label: "-ELBO", log_x: false, log_y: false, scatter: false };
    render(out, &fig, &[series])
}

/// Reads a CSV with a header and returns `(headers, numeric rows)`.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, std::io::Error::new(io.kind(), io.to_string())),
        _ => CliError::Parse { path: path.to_path_buf(), line: 1, msg: e.to_string() },
    })?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Parse { path: path.to_path_buf(), line: 1, msg: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::Parse { path: path.to_path_buf(), line, msg: e.to_string() })?;
        rows.push(row);
    }
    Ok((headers, rows))
}

/// Renders column `y` against column `x` of a result table. Recognized
/// tables (bench and approx-study output) get sensible axes by default.
pub fn render_table(out: &Path, headers: &[String], rows: &[Vec<f64>], x: Option<&str>, y: Option<&str>) -> Result<()> {
    let has = |n: &str| headers.iter().any(|h| h == n);
    let (dx, dy, log, scatter, title) = if has("mean_ms") {
        ("D", "mean_ms", true, false, "Batch transform time")
    } else if has("best_rmse") {
        ("D", "best_rmse", false, true, "Structured approximation error")
    } else {
        let first = headers.first().map_or("", String::as_str);
        let second = headers.get(1).map_or("", String::as_str);
        (first, second, false, false, "")
    };
    let xn = x.unwrap_or(dx);
    let yn = y.unwrap_or(dy);
    let col = |n: &str| {
        headers.iter().position(|h| h == n).ok_or_else(|| CliError::Usage(format!("no column named `{n}`")))
    };
    let (xi, yi) = (col(xn)?, col(yn)?);
    let points = rows.iter().filter(|r| r.len() > xi.max(yi)).map(|r| (r[xi], r[yi])).collect();
    let title = if title.is_empty() { format!("{yn} vs {xn}") } else { title.to_string() };
    let fig = Figure { title: &title, x_label: xn, y_label: yn, log_x: log, log_y: log, scatter };
    render(out, &fig, &[Series { label: yn.to_string(), points }])
}
