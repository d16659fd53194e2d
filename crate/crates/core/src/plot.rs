//! Minimal static SVG charts: line curves, grouped bars and 2D scatter.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let pad = |a: f64, b: f64| if (b - a).abs() < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn open(out: &mut String, title: &str, meta: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, "<desc>{}</desc>", escape(meta));
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = (PAD, W - PAD, PAD, H - PAD);
    let _ = writeln!(out, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#);
    for k in 0..=4 {
        let v = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
        let y = f.py(v);
        let _ = writeln!(out, r##"<line x1="{}" y1="{y:.1}" x2="{l}" y2="{y:.1}" stroke="#999"/>"##, l - 4.0);
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, l - 6.0, y + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, escape(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = PAD + 4.0 + 16.0 * i as f64;
        let _ = writeln!(out, r#"<rect x="{}" y="{y}" width="10" height="10" fill="{}"/>"#, W - PAD - 150.0, color(i));
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, W - PAD - 134.0, y + 9.0, escape(n));
    }
}

/// One polyline per series against the step index.
pub fn line_chart(title: &str, meta: &str, ylabel: &str, series: &[(&str, &[f64])]) -> String {
    let n = series.iter().map(|(_, s)| s.len()).max().unwrap_or(0);
    let finite = series.iter().flat_map(|(_, s)| s.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let f = Frame::new(0.0, n.saturating_sub(1).max(1) as f64, lo.min(0.0), if hi.is_finite() { hi } else { 1.0 });
    let mut out = String::new();
    open(&mut out, title, meta);
    axes(&mut out, &f, "step", ylabel);
    for (i, (_, s)) in series.iter().enumerate() {
        // Thin long curves so the file stays small.
        let stride = (s.len() / 800).max(1);
        let pts: Vec<String> = s
            .iter()
            .enumerate()
            .step_by(stride)
            .filter(|(_, v)| v.is_finite())
            .map(|(x, v)| format!("{:.1},{:.1}", f.px(x as f64), f.py(*v)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#, color(i), pts.join(" "));
    }
    legend(&mut out, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, meta: &str, ylabel: &str, categories: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let vals = series.iter().flat_map(|(_, v)| v.iter().copied());
    let (lo, hi) = vals.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let f = Frame::new(0.0, categories.len().max(1) as f64, lo * 1.1, hi * 1.1);
    let mut out = String::new();
    open(&mut out, title, meta);
    axes(&mut out, &f, "base:novel unlabeled ratio", ylabel);
    let group = (W - 2.0 * PAD) / categories.len().max(1) as f64;
    let bar = group * 0.8 / series.len().max(1) as f64;
    let zero = f.py(0.0);
    for (c, name) in categories.iter().enumerate() {
        let gx = PAD + group * c as f64 + group * 0.1;
        for (i, (_, v)) in series.iter().enumerate() {
            let y = f.py(v[c]);
            let (top, h) = if y < zero { (y, zero - y) } else { (zero, y - zero) };
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{top:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
                gx + bar * i as f64,
                bar * 0.95,
                color(i)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            gx + group * 0.4,
            H - PAD + 16.0,
            escape(name)
        );
    }
    let _ = writeln!(out, r##"<line x1="{PAD}" y1="{zero:.1}" x2="{}" y2="{zero:.1}" stroke="#333"/>"##, W - PAD);
    legend(&mut out, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Marker {
    Dot,
    Square,
    Diamond,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub group: usize,
    pub marker: Marker,
}

pub fn scatter(title: &str, meta: &str, points: &[ScatterPoint], group_names: &[&str]) -> String {
    let (x0, x1) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.x), b.max(p.x)));
    let (y0, y1) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.y), b.max(p.y)));
    let f = if points.is_empty() { Frame::new(0.0, 1.0, 0.0, 1.0) } else { Frame::new(x0, x1, y0, y1) };
    let mut out = String::new();
    open(&mut out, title, meta);
    axes(&mut out, &f, "component 1", "component 2");
    for p in points {
        let (x, y, c) = (f.px(p.x), f.py(p.y), color(p.group));
        let _ = match p.marker {
            Marker::Dot => writeln!(out, r#"<circle cx="{x:.1}" cy="{y:.1}" r="2.5" fill="{c}" fill-opacity="0.6"/>"#),
            Marker::Square => writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="9" height="9" fill="none" stroke="{c}" stroke-width="2"/>"#,
                x - 4.5,
                y - 4.5
            ),
            Marker::Diamond => writeln!(
                out,
                r#"<path d="M{x:.1} {:.1} L{:.1} {y:.1} L{x:.1} {:.1} L{:.1} {y:.1} Z" fill="{c}" stroke="black"/>"#,
                y - 7.0,
                x + 7.0,
                y + 7.0,
                x - 7.0
            ),
        };
    }
    legend(&mut out, group_names);
    out.push_str("</svg>\n");
    out
}

/// Top-two principal directions of the rows of `x` by power iteration with
/// deflation. Returns `(mean, d x 2 basis)`.
pub fn principal_plane(x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let d = x.ncols();
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
    let centered = x - &mean;
    let mut cov = centered.t().dot(&centered);
    let mut basis = Array2::zeros((d, 2));
    for k in 0..2 {
        let mut v = Array1::from_shape_fn(d, |i| 1.0 + (i as f64 * 0.37 + k as f64).sin());
        for _ in 0..200 {
            let next = cov.dot(&v);
            let n = next.dot(&next).sqrt();
            if n < 1e-300 {
                break;
            }
            v = next / n;
        }
        let lambda = v.dot(&cov.dot(&v));
        let outer = v.view().insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
        cov = cov - lambda * outer;
        basis.column_mut(k).assign(&v);
    }
    (mean, basis)
}
