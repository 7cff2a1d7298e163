//! Minimal static SVG line plots.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: String,
    pub dashed: bool,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>, index: usize) -> Self {
        Series {
            label: label.into(),
            points,
            color: PALETTE[index % PALETTE.len()].to_string(),
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Figure {
    pub title: String,
    pub xlabel: String,
    pub ylabel: String,
    pub series: Vec<Series>,
    pub circles: Vec<Circle>,
    /// Horizontal reference lines.
    pub hlines: Vec<f64>,
    /// Same scale on both axes (for trajectory plots).
    pub equal_aspect: bool,
}

pub fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Step from {1, 2, 5} x 10^k giving about `target` intervals over `span`.
fn nice_step(span: f64, target: usize) -> f64 {
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let m = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let s = format!("{:.*}", decimals, v);
    if s == "-0" || s.chars().all(|c| c == '-' || c == '0' || c == '.') && s.starts_with('-') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

fn widen(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (-1.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { 0.5 * lo.abs() } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

impl Figure {
    fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for &(x, y) in &s.points {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
        for c in &self.circles {
            x0 = x0.min(c.cx - c.r);
            x1 = x1.max(c.cx + c.r);
            y0 = y0.min(c.cy - c.r);
            y1 = y1.max(c.cy + c.r);
        }
        for &h in &self.hlines {
            y0 = y0.min(h);
            y1 = y1.max(h);
        }
        let (mut xr, mut yr) = (widen(x0, x1), widen(y0, y1));
        if self.equal_aspect {
            let pw = WIDTH - LEFT - RIGHT;
            let ph = HEIGHT - TOP - BOTTOM;
            let scale = ((xr.1 - xr.0) / pw).max((yr.1 - yr.0) / ph);
            let (cx, cy) = (0.5 * (xr.0 + xr.1), 0.5 * (yr.0 + yr.1));
            xr = (cx - 0.5 * scale * pw, cx + 0.5 * scale * pw);
            yr = (cy - 0.5 * scale * ph, cy + 0.5 * scale * ph);
        }
        (xr, yr)
    }

    pub fn render(&self) -> String {
        let ((x0, x1), (y0, y1)) = self.bounds();
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        // Axes and ticks.
        let _ = writeln!(
            out,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let xs = nice_step(x1 - x0, 6);
        let mut v = (x0 / xs).ceil() * xs;
        while v <= x1 + 1e-9 * xs {
            let px = sx(v);
            let _ = writeln!(
                out,
                r##"<line x1="{px:.2}" y1="{TOP}" x2="{px:.2}" y2="{:.2}" stroke="#e0e0e0"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                TOP + ph,
                TOP + ph + 16.0,
                fmt_tick(v, xs)
            );
            v += xs;
        }
        let ys = nice_step(y1 - y0, 6);
        let mut v = (y0 / ys).ceil() * ys;
        while v <= y1 + 1e-9 * ys {
            let py = sy(v);
            let _ = writeln!(
                out,
                r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                LEFT + pw,
                LEFT - 6.0,
                py + 4.0,
                fmt_tick(v, ys)
            );
            v += ys;
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.xlabel)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.ylabel)
        );
        for &h in &self.hlines {
            let py = sy(h);
            let _ = writeln!(
                out,
                r#"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="black" stroke-dasharray="6 3"/>"#,
                LEFT + pw
            );
        }
        for c in &self.circles {
            let rx = c.r / (x1 - x0) * pw;
            let ry = c.r / (y1 - y0) * ph;
            let _ = writeln!(
                out,
                r##"<ellipse cx="{:.2}" cy="{:.2}" rx="{rx:.2}" ry="{ry:.2}" fill="#999999" fill-opacity="0.35" stroke="#555555"/>"##,
                sx(c.cx),
                sy(c.cy)
            );
        }
        for s in &self.series {
            if s.points.is_empty() {
                continue;
            }
            let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let dash = if s.dashed { r#" stroke-dasharray="5 3""# } else { "" };
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.4"{dash} points="{}"/>"#,
                s.color,
                pts.join(" ")
            );
        }
        // Legend.
        for (k, s) in self.series.iter().enumerate() {
            let y = TOP + 12.0 + 18.0 * k as f64;
            let x = LEFT + pw + 12.0;
            let dash = if s.dashed { r#" stroke-dasharray="5 3""# } else { "" };
            let _ = writeln!(
                out,
                r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}">{}</text>"#,
                x + 24.0,
                s.color,
                x + 30.0,
                y + 4.0,
                escape(&s.label)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nice_steps() {
        assert_eq!(nice_step(10.0, 5), 2.0);
        assert_eq!(nice_step(30.0, 6), 5.0);
        assert!((nice_step(0.7, 6) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn flat_series_still_renders() {
        let fig = Figure {
            title: "a < b & c".into(),
            series: vec![Series::new("zero", vec![(0.0, 0.0), (1.0, 0.0)], 0)],
            ..Figure::default()
        };
        let svg = fig.render();
        assert!(svg.contains("a &lt; b &amp; c"));
        assert!(!svg.contains("NaN"));
    }
}
