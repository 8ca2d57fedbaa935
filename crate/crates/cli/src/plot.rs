//! Static SVG rendering of risk-coverage curve CSV files.

use std::fmt::Write as _;
use std::path::Path;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;

const COLORS: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// One polyline: a legend name and its (coverage, risk) points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads a curve CSV (`stage,threshold,coverage,risk,accuracy`) into one
/// series per stage present in the file.
pub fn read_curve_csv(path: &Path) -> Result<Vec<Series>, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = rdr.headers().map_err(|e| format!("{}: {e}", path.display()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| format!("{}: missing column '{name}'", path.display()))
    };
    let (stage_col, cov_col, risk_col) = (col("stage")?, col("coverage")?, col("risk")?);
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| format!("{}: {e}", path.display()))?;
        let num = |c: usize| -> Result<f64, String> {
            row.get(c)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| format!("{}: row {}: {e}", path.display(), i + 2))
        };
        let stage = row.get(stage_col).unwrap_or("").to_owned();
        let point = (num(cov_col)?, num(risk_col)?);
        match series.iter_mut().find(|(s, _)| *s == stage) {
            Some((_, pts)) => pts.push(point),
            None => series.push((stage, vec![point])),
        }
    }
    Ok(series
        .into_iter()
        .map(|(stage, points)| Series {
            name: format!("{stem} (stage {stage})"),
            points,
        })
        .collect())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn x_px(coverage: f64) -> f64 {
    LEFT + coverage.clamp(0.0, 1.0) * (WIDTH - LEFT - RIGHT)
}

fn y_px(risk: f64) -> f64 {
    HEIGHT - BOTTOM - risk.clamp(0.0, 1.0) * (HEIGHT - TOP - BOTTOM)
}

/// Renders curves on fixed [0,1] axes: coverage on x, risk on y.
pub fn render_svg(series: &[Series]) -> String {
    let mut svg = String::new();
    let w = &mut svg;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(w, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);

    // axes and ticks
    let (x0, x1, y0, y1) = (x_px(0.0), x_px(1.0), y_px(0.0), y_px(1.0));
    let _ = writeln!(w, r#"<g stroke="black" stroke-width="1">"#);
    let _ = writeln!(w, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>"#);
    let _ = writeln!(w, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let (tx, ty) = (x_px(v), y_px(v));
        let _ = writeln!(w, r#"<line x1="{tx}" y1="{y0}" x2="{tx}" y2="{}"/>"#, y0 + 5.0);
        let _ = writeln!(w, r#"<line x1="{x0}" y1="{ty}" x2="{}" y2="{ty}"/>"#, x0 - 5.0);
    }
    let _ = writeln!(w, "</g>");
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            w,
            r#"<text x="{}" y="{}" text-anchor="middle">{v:.1}</text>"#,
            x_px(v),
            y0 + 20.0
        );
        let _ = writeln!(
            w,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#,
            x0 - 8.0,
            y_px(v) + 4.0
        );
    }
    let _ = writeln!(
        w,
        r#"<text x="{}" y="{}" text-anchor="middle">Coverage</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 25.0
    );
    let _ = writeln!(
        w,
        r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">Risk</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(c, r)| format!("{:.2},{:.2}", x_px(c), y_px(r)))
            .collect();
        let _ = writeln!(
            w,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 20.0 * i as f64;
        let lx = WIDTH - RIGHT + 20.0;
        let _ = writeln!(
            w,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(w, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&s.name));
    }
    let _ = writeln!(w, "</svg>");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_series_one_polyline() {
        let svg = render_svg(&[Series {
            name: "a<b".into(),
            points: vec![(0.5, 0.1), (1.0, 0.3)],
        }]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.contains(r#"viewBox="0 0 800 600""#));
    }

    #[test]
    fn axis_mapping() {
        assert_eq!(x_px(0.0), LEFT);
        assert_eq!(x_px(1.0), WIDTH - RIGHT);
        assert_eq!(y_px(0.0), HEIGHT - BOTTOM);
        assert_eq!(y_px(1.0), TOP);
    }
}
