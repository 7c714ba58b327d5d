//! CSV results and SVG line charts drawn from them.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use mcvi::experiments::{Experiment, ResultRow, RunOutput};

/// Columns of a run's `results.csv`. Missing values are empty cells.
pub const RUN_HEADER: [&str; 6] = ["iteration", "smoothed_bound", "exact_bound", "exact_kl", "r_squared", "seconds"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_run_csv(path: &Path, rows: &[ResultRow]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RUN_HEADER)?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.smoothed.to_string(),
            cell(r.exact_bound),
            cell(r.exact_kl),
            cell(r.r_squared),
            cell(r.seconds),
        ])?;
    }
    w.flush()
}

pub fn write_summary_csv(path: &Path, out: &RunOutput) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["key", "value"])?;
    for (k, v) in &out.summary {
        w.write_record([k.clone(), v.to_string()])?;
    }
    w.flush()
}

/// One row per sweep point: the axis value, then every summary key seen in
/// any point, in first-seen order.
pub fn write_sweep_csv(path: &Path, axis: &str, points: &[(usize, RunOutput)]) -> io::Result<()> {
    let mut keys: Vec<&str> = Vec::new();
    for (_, out) in points {
        for (k, _) in &out.summary {
            if !keys.contains(&k.as_str()) {
                keys.push(k);
            }
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(std::iter::once(axis).chain(keys.iter().copied()))?;
    for (value, out) in points {
        let row = std::iter::once(value.to_string()).chain(keys.iter().map(|k| cell(out.get(k))));
        w.write_record(row)?;
    }
    w.flush()
}

/// Columns plotted against the iteration for a single run.
pub fn run_series(e: Experiment) -> &'static [&'static str] {
    match e {
        Experiment::BetabinomHvi => &["exact_kl", "r_squared"],
        _ => &["smoothed_bound", "exact_bound"],
    }
}

/// Summary columns plotted against the sweep axis.
pub fn sweep_series(e: Experiment) -> &'static [&'static str] {
    match e {
        Experiment::BetabinomHvi => &["exact_kl", "r_squared"],
        Experiment::AnnealedGauss => &["annealed_mean", "elbo_mean", "log_normalizer"],
        _ => &["exact_bound", "log_normalizer"],
    }
}

/// Reads `(x, y)` pairs for each of `ys` from a CSV file, skipping empty cells.
pub fn read_series(path: &Path, x: &str, ys: &[&str]) -> io::Result<Vec<(String, Vec<(f64, f64)>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let xi = col(x).ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("no column {x}")))?;
    let mut series: Vec<(String, Vec<(f64, f64)>)> = ys.iter().map(|y| (y.to_string(), Vec::new())).collect();
    for record in r.records() {
        let record = record?;
        let Ok(xv) = record[xi].parse::<f64>() else { continue };
        for (name, points) in &mut series {
            if let Some(yv) = col(name).and_then(|i| record[i].parse::<f64>().ok()) {
                points.push((xv, yv));
            }
        }
    }
    series.retain(|(_, p)| !p.is_empty());
    Ok(series)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// A line chart with one polyline per series and min/max axis labels.
pub fn line_chart(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let all = || series.iter().flat_map(|(_, p)| p.iter());
    let (x0, x1) = extent(all().map(|p| p.0));
    let (y0, y1) = extent(all().map(|p| p.1));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<polyline points="{left},{top} {left},{bottom} {right},{bottom}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(s, r#"<text x="{left}" y="{}" text-anchor="middle">{}</text>"#, bottom + 16.0, fmt_num(x0));
    let _ = writeln!(s, r#"<text x="{right}" y="{}" text-anchor="middle">{}</text>"#, bottom + 16.0, fmt_num(x1));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="{}" y="{bottom}" text-anchor="end">{}</text>"#, left - 4.0, fmt_num(y0));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4.0, top + 4.0, fmt_num(y1));
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            coords.join(" ")
        );
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" text-anchor="end" fill="{color}">{}</text>"#,
            right,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e7 {
        format!("{v:.0}")
    } else if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_one_polyline_per_series_plus_axes() {
        let series = vec![
            ("a".to_string(), vec![(0.0, 1.0), (1.0, 2.0)]),
            ("b<".to_string(), vec![(0.0, 3.0), (2.0, 1.0)]),
        ];
        let svg = line_chart("t", "x", &series);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("b&lt;"));
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn empty_and_flat_series_stay_finite() {
        let svg = line_chart("t", "x", &[("a".to_string(), vec![(1.0, 2.0)])]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        let svg = line_chart("t", "x", &[]);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn series_skip_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![
            ResultRow {
                iteration: 1,
                smoothed: 0.5,
                exact_bound: None,
                exact_kl: Some(0.1),
                r_squared: None,
                seconds: None,
            },
            ResultRow {
                iteration: 2,
                smoothed: 0.7,
                exact_bound: Some(0.9),
                exact_kl: None,
                r_squared: None,
                seconds: None,
            },
        ];
        write_run_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), RUN_HEADER.join(","));
        assert_eq!(text.lines().nth(1).unwrap(), "1,0.5,,0.1,,");
        let s = read_series(&path, "iteration", &["smoothed_bound", "exact_bound", "r_squared"]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].1, vec![(1.0, 0.5), (2.0, 0.7)]);
        assert_eq!(s[1].1, vec![(2.0, 0.9)]);
    }
}
