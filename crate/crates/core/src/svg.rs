//! Minimal self-contained SVG line and scatter plots.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit<'a>(pts: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let mut x = (f64::INFINITY, f64::NEG_INFINITY);
        let mut y = x;
        for &(a, b) in pts.filter(|p| p.0.is_finite() && p.1.is_finite()) {
            x = (x.0.min(a), x.1.max(a));
            y = (y.0.min(b), y.1.max(b));
        }
        let widen = |r: (f64, f64)| {
            if !r.0.is_finite() {
                (0.0, 1.0)
            } else if r.1 - r.0 < 1e-12 {
                (r.0 - 0.5, r.1 + 0.5)
            } else {
                r
            }
        };
        Frame {
            x: widen(x),
            y: widen(y),
        }
    }

    fn map(&self, (a, b): (f64, f64)) -> (f64, f64) {
        let px = PAD + (a - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD);
        let py = H - PAD - (b - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD);
        (px, py)
    }
}

fn open(out: &mut String, title: &str, x_label: &str, y_label: &str, f: &Frame) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (v, (x, y), anchor) in [
        (f.x.0, (PAD, H - PAD + 14.0), "start"),
        (f.x.1, (W - PAD, H - PAD + 14.0), "end"),
        (f.y.0, (PAD - 4.0, H - PAD), "end"),
        (f.y.1, (PAD - 4.0, PAD + 4.0), "end"),
    ] {
        let _ = writeln!(out, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.3}</text>"#);
    }
}

pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let f = Frame::fit(series.iter().flat_map(|s| &s.points));
    let mut out = String::new();
    open(&mut out, title, x_label, y_label, &f);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let (x, y) = f.map(p);
                format!("{}{x:.2} {y:.2}", if j == 0 { "M" } else { "L" })
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD + 4.0 - 80.0,
            PAD + 14.0 * i as f64,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter with marker area proportional to `weights` (all equal if empty).
pub fn scatter_plot(title: &str, points: &[(f64, f64)], weights: &[f64]) -> String {
    let f = Frame::fit(points.iter());
    let mut out = String::new();
    open(&mut out, title, "component 1", "component 2", &f);
    let top = weights.iter().copied().fold(0.0, f64::max);
    for (i, &p) in points.iter().enumerate() {
        let (x, y) = f.map(p);
        let w = weights.get(i).copied().unwrap_or(top);
        let r = if top > 0.0 { 1.5 + 6.0 * (w / top).sqrt() } else { 2.5 };
        let _ = writeln!(
            out,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="#1f77b4" fill-opacity="0.5"/>"##
        );
    }
    out.push_str("</svg>\n");
    out
}
