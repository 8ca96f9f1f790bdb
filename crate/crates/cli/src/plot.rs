//! Minimal SVG output for trajectories and loss-fraction histograms.

use std::fmt::Write;

use convexity_lab::trajectory::Sample;

const WIDTH: f64 = 720.0;
const PANEL: f64 = 200.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const GAP: f64 = 50.0;

struct Axis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Self { lo, hi, px_lo, px_hi }
    }

    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(svg: &mut String, x: &Axis, y: &Axis, label: &str) {
    let (x0, x1) = (x.px_lo, x.px_hi);
    let (y0, y1) = (y.px_lo, y.px_hi);
    writeln!(svg, r#"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1).unwrap();
    writeln!(svg, r#"<text x="{x0:.2}" y="{:.2}" font-size="13">{}</text>"#, y1 - 8.0, escape(label)).unwrap();
    for (v, py) in [(y.lo, y0), (y.hi, y1)] {
        writeln!(svg, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{v:.3e}</text>"#, x0 - 4.0, py + 4.0).unwrap();
    }
    for (v, px) in [(x.lo, x0), (x.hi, x1)] {
        writeln!(svg, r#"<text x="{px:.2}" y="{:.2}" font-size="11" text-anchor="middle">{v}</text>"#, y0 + 14.0).unwrap();
    }
}

fn polyline(svg: &mut String, id: &str, points: &[(f64, f64)], color: &str) {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    writeln!(svg, r#"<polyline id="{id}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")).unwrap();
}

pub struct SeriesPlot {
    pub svg: String,
    /// Normalized values drawn at the ceiling.
    pub clipped: usize,
    /// Largest normalized value actually drawn.
    pub max_plotted: Option<f64>,
}

/// Normalized values as drawn: capped at `clip`, absent values dropped.
pub fn clipped_normalized(samples: &[Sample], clip: f64) -> Vec<(f64, f64)> {
    samples.iter().filter_map(|s| s.normalized.map(|v| (s.t, v.min(clip)))).collect()
}

/// Loss (top) and normalized second derivative (bottom) against time, with the
/// onset `t0` marked.
pub fn timeseries(samples: &[Sample], t0: Option<f64>, clip: f64, title: &str) -> SeriesPlot {
    let height = TOP + 2.0 * PANEL + GAP + 30.0;
    let t_lo = samples.first().map_or(0.0, |s| s.t);
    let t_hi = samples.last().map_or(1.0, |s| s.t);
    let x = Axis::new(t_lo, t_hi, LEFT, WIDTH - RIGHT);

    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#).unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<text x="{:.2}" y="18" font-size="14" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();

    let loss_lo = samples.iter().map(|s| s.loss).fold(f64::INFINITY, f64::min);
    let loss_hi = samples.iter().map(|s| s.loss).fold(f64::NEG_INFINITY, f64::max);
    let top_base = TOP + PANEL;
    let y_loss = Axis::new(loss_lo, loss_hi, top_base, TOP + 10.0);
    frame(&mut svg, &x, &y_loss, "loss");
    let pts: Vec<(f64, f64)> = samples.iter().map(|s| (x.map(s.t), y_loss.map(s.loss))).collect();
    polyline(&mut svg, "loss", &pts, "#1f77b4");

    let norm = clipped_normalized(samples, clip);
    let clipped = samples.iter().filter(|s| s.normalized.is_some_and(|v| v > clip)).count();
    let n_lo = norm.iter().map(|p| p.1).fold(0.0f64, f64::min);
    let n_hi = norm.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).max(n_lo);
    let bottom_base = top_base + GAP + PANEL;
    let y_norm = Axis::new(n_lo, n_hi, bottom_base, top_base + GAP + 10.0);
    frame(&mut svg, &x, &y_norm, &format!("normalized second derivative (clipped at {clip})"));
    if n_lo < 0.0 {
        let zy = y_norm.map(0.0);
        writeln!(svg, r##"<line x1="{:.2}" y1="{zy:.2}" x2="{:.2}" y2="{zy:.2}" stroke="#999" stroke-dasharray="2,2"/>"##, x.px_lo, x.px_hi).unwrap();
    }
    let pts: Vec<(f64, f64)> = norm.iter().map(|&(t, v)| (x.map(t), y_norm.map(v))).collect();
    polyline(&mut svg, "normalized", &pts, "#d62728");

    if let Some(t0) = t0 {
        let px = x.map(t0);
        writeln!(svg, r##"<line id="t0" x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{bottom_base:.2}" stroke="#2ca02c" stroke-dasharray="5,3"/>"##, TOP + 10.0).unwrap();
        writeln!(svg, r##"<text x="{:.2}" y="{:.2}" font-size="11" fill="#2ca02c">t0 = {t0}</text>"##, px + 3.0, TOP + 22.0).unwrap();
    }
    svg.push_str("</svg>\n");
    SeriesPlot {
        svg,
        clipped,
        max_plotted: norm.iter().map(|p| p.1).reduce(f64::max),
    }
}

/// Bin counts over `[0, 1]`; values outside are counted in the end bins.
pub fn bin_counts(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins.max(1)];
    let n = counts.len();
    for &v in values {
        let k = ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
        counts[k] += 1;
    }
    counts
}

pub fn histogram(values: &[f64], bins: usize, title: &str) -> String {
    let height = TOP + PANEL + 40.0;
    let counts = bin_counts(values, bins);
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    let x = Axis::new(0.0, 1.0, LEFT, WIDTH - RIGHT);
    let y = Axis::new(0.0, max as f64, TOP + PANEL, TOP + 10.0);
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#).unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<text x="{:.2}" y="18" font-size="14" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
    frame(&mut svg, &x, &y, &format!("loss change fraction, {} trials", values.len()));
    writeln!(svg, r#"<g id="bars">"#).unwrap();
    let w = (x.px_hi - x.px_lo) / counts.len() as f64;
    for (k, &c) in counts.iter().enumerate() {
        let top = y.map(c as f64);
        writeln!(
            svg,
            r##"<rect data-count="{c}" x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4" stroke="white"/>"##,
            x.px_lo + k as f64 * w,
            w,
            y.px_lo - top
        )
        .unwrap();
    }
    svg.push_str("</g>\n</svg>\n");
    svg
}
