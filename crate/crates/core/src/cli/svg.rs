//! Minimal hand-written SVG plots.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 40.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = (f64, f64)> + 'a) -> Frame {
        let mut f = Frame {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            return Frame {
                x0: -1.0,
                x1: 1.0,
                y0: -1.0,
                y1: 1.0,
            };
        }
        let pad = |lo: &mut f64, hi: &mut f64| {
            let span = (*hi - *lo).max(1e-9);
            *lo -= 0.05 * span;
            *hi += 0.05 * span;
        };
        pad(&mut f.x0, &mut f.x1);
        pad(&mut f.y0, &mut f.y1);
        f
    }

    fn map(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        if !(x.is_finite() && y.is_finite()) {
            return None;
        }
        let px = MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN);
        let py = HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN);
        Some((px, py))
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="14">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn dots(out: &mut String, frame: &Frame, pts: &[Vec<f64>], fill: &str) {
    let _ = writeln!(out, r#"<g fill="{fill}" fill-opacity="0.6">"#);
    for p in pts {
        if let Some((x, y)) = frame.map(p[0], p.get(1).copied().unwrap_or(0.0)) {
            let _ = writeln!(out, r#"<circle cx="{x:.1}" cy="{y:.1}" r="1.5"/>"#);
        }
    }
    out.push_str("</g>\n");
}

fn xy(p: &[f64]) -> (f64, f64) {
    (p[0], p.get(1).copied().unwrap_or(0.0))
}

/// Scatter of the first two coordinates.
pub fn scatter(samples: &[Vec<f64>], title: &str) -> String {
    let frame = Frame::fit(samples.iter().map(|p| xy(p)));
    let mut out = String::new();
    header(&mut out, title);
    dots(&mut out, &frame, samples, "#1f77b4");
    out.push_str("</svg>\n");
    out
}

/// Chain A in gray, chain B in color, each pair joined by a segment.
pub fn paired_scatter(a: &[Vec<f64>], b: &[Vec<f64>], title: &str) -> String {
    let frame = Frame::fit(a.iter().chain(b).map(|p| xy(p)));
    let mut out = String::new();
    header(&mut out, title);
    let mut path = String::new();
    for (p, q) in a.iter().zip(b) {
        let (pa, pb) = (xy(p), xy(q));
        if let (Some((x0, y0)), Some((x1, y1))) = (frame.map(pa.0, pa.1), frame.map(pb.0, pb.1)) {
            let _ = write!(path, "M{x0:.1} {y0:.1}L{x1:.1} {y1:.1}");
        }
    }
    let _ = writeln!(
        out,
        r##"<path d="{path}" stroke="#bbbbbb" stroke-width="0.4" fill="none"/>"##
    );
    dots(&mut out, &frame, a, "#808080");
    dots(&mut out, &frame, b, "#d62728");
    out.push_str("</svg>\n");
    out
}

/// Two series over a shared x axis, each scaled to its own range.
pub fn two_curves(x: &[f64], first: (&str, &[f64]), second: (&str, &[f64]), title: &str) -> String {
    let mut out = String::new();
    header(&mut out, title);
    for (k, ((label, ys), color)) in [first, second].into_iter().zip(["#1f77b4", "#d62728"]).enumerate() {
        let frame = Frame::fit(x.iter().copied().zip(ys.iter().copied()));
        let pts: Vec<String> = x
            .iter()
            .zip(ys)
            .filter_map(|(a, b)| frame.map(*a, *b))
            .map(|(px, py)| format!("{px:.1},{py:.1}"))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            WIDTH - 220.0,
            24.0 + 14.0 * k as f64,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_non_finite_points() {
        let svg = scatter(&[vec![0.0, 0.0], vec![f64::NAN, 1.0], vec![1.0, 1.0]], "a < b");
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn size_bound_for_large_paired_plot() {
        let a: Vec<Vec<f64>> = (0..8192).map(|i| vec![(i as f64).sin() * 3.0, (i as f64).cos()]).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|p| vec![p[0] + 0.5, p[1] - 0.25]).collect();
        assert!(paired_scatter(&a, &b, "pairs").len() < 2 * 1024 * 1024);
    }
}
