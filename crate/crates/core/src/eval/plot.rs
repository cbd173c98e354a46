use std::fmt::Write as _;
use std::path::Path;

use super::SweepPoint;
use crate::error::{Error, Result};

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;

/// Line plot of mean accuracy against clip length with a ±1 std band.
pub fn sweep_svg(points: &[SweepPoint], title: &str) -> String {
    let (x_min, x_max) = match (points.first(), points.last()) {
        (Some(a), Some(b)) if b.length > a.length => (a.length as f64, b.length as f64),
        (Some(a), _) => (a.length as f64 - 1.0, a.length as f64 + 1.0),
        _ => (0.0, 1.0),
    };
    let px = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - y.clamp(0.0, 1.0) * (HEIGHT - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{:.2}</text>"#,
            x0 - 4.0,
            py(v) + 3.0,
            v
        );
    }
    for p in points {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="10">{}</text>"#,
            px(p.length as f64),
            y0 + 14.0,
            p.length
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">frames</text>"#,
        WIDTH / 2.0,
        HEIGHT - 10.0
    );
    if !points.is_empty() {
        let upper: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.length as f64), py(p.mean + p.std)))
            .collect();
        let lower: Vec<String> = points
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", px(p.length as f64), py(p.mean - p.std)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polygon points="{} {}" fill="#4c72b0" fill-opacity="0.25" stroke="none"/>"##,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.length as f64), py(p.mean)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#4c72b0" stroke-width="2"/>"##,
            line.join(" ")
        );
        for p in points {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#4c72b0"/>"##,
                px(p.length as f64),
                py(p.mean)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_sweep_svg(path: &Path, points: &[SweepPoint], title: &str) -> Result<()> {
    std::fs::write(path, sweep_svg(points, title)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed() {
        let pts = vec![
            SweepPoint { length: 15, accuracies: vec![0.5], mean: 0.5, std: 0.05 },
            SweepPoint { length: 60, accuracies: vec![0.9], mean: 0.9, std: 0.02 },
        ];
        let svg = sweep_svg(&pts, "a < b");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("polyline") && svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<circle").count(), 2);
    }
}
