//! Static SVG line charts of seed-averaged forgetting scores.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::table::SUMMARY_HEADER;
use super::ExperimentError;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A self-contained SVG with axes, tick labels and a legend.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(s, r##"<line x1="{left}" x2="{0}" y1="{1}" y2="{1}" stroke="#ddd"/>"##, left + pw, sy(fy));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, left - 6.0, sy(fy) + 4.0, fy);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{:.3}</text>"#, sx(fx), top + ph + 18.0, fx);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#, top + ph / 2.0, escape(y_label));
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> =
            ser.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for p in &path {
            let (cx, cy) = p.split_once(',').expect("pair");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 10.0 + 18.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{0}" x2="{1}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, left + pw + 10.0, left + pw + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, left + pw + 36.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reads `summary.csv` in `dir` and writes one chart per forgetting metric; returns the written paths.
pub fn render_report(dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let path = dir.join("summary.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| ExperimentError::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(ExperimentError::io(&path, "unexpected header"));
    }
    // metric -> (series label -> points)
    let mut charts: Vec<(String, Vec<Series>)> = Vec::new();
    for (k, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(ExperimentError::io(&path, format!("line {}: expected 9 fields", k + 2)));
        }
        let metric = f[5];
        if !metric.starts_with("f_") {
            continue;
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| ExperimentError::io(&path, format!("line {}: bad number `{s}`", k + 2)));
        let label = format!("{} depth {} probes {}", f[0], f[1], f[2]);
        let point = (num(f[4])?, num(f[6])?);
        let chart = match charts.iter_mut().position(|c| c.0 == metric) {
            Some(i) => &mut charts[i].1,
            None => {
                charts.push((metric.to_string(), Vec::new()));
                &mut charts.last_mut().expect("just pushed").1
            }
        };
        match chart.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push(point),
            None => chart.push(Series { label, points: vec![point] }),
        }
    }
    let mut written = Vec::new();
    for (metric, series) in charts {
        let out = dir.join(format!("report_{metric}.svg"));
        let svg = svg_line_chart(&format!("{metric} (seed mean)"), "checkpoint", metric.as_str(), &series);
        std::fs::write(&out, svg).map_err(|e| ExperimentError::io(&out, e))?;
        written.push(out);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_series() {
        let svg = svg_line_chart("t<1>", "x", "y", &[Series { label: "a".into(), points: vec![(1.0, 0.0), (2.0, 1.0)] }]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("t&lt;1&gt;"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("<circle").count(), 2);
    }

    #[test]
    fn report_from_summary() {
        let dir = tempfile::tempdir().unwrap();
        let body =
            format!("{SUMMARY_HEADER}\nfull,1,1,1,1,norm,1.0e0,0.0e0,2\nfull,1,1,0,2,f_norm,1.0e-1,0.0e0,2\nfull,1,1,0,3,f_norm,2.0e-1,0.0e0,2\n");
        std::fs::write(dir.path().join("summary.csv"), body).unwrap();
        let out = render_report(dir.path()).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].ends_with("report_f_norm.svg"));
        assert!(render_report(&dir.path().join("missing")).is_err());
    }
}
