//! Minimal static SVG charts: loss/IoU curves and sweep bars. No external
//! renderer; the output is a self-contained SVG file.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

const SERIES_COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let w = WIDTH - MARGIN_L - MARGIN_R;
        MARGIN_L + (v - self.x_min) / (self.x_max - self.x_min).max(1e-12) * w
    }

    fn y(&self, v: f64) -> f64 {
        let h = HEIGHT - MARGIN_T - MARGIN_B;
        HEIGHT - MARGIN_B - (v - self.y_min) / (self.y_max - self.y_min).max(1e-12) * h
    }
}

fn svg_header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">
<rect width="100%" height="100%" fill="white"/>
<text x="{x}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{title}</text>
"#,
        x = WIDTH / 2.0,
    );
}

fn axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let x0 = MARGIN_L;
    let x1 = WIDTH - MARGIN_R;
    let y0 = HEIGHT - MARGIN_B;
    let y1 = MARGIN_T;
    let _ = write!(
        out,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>
<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>
<text x="{cx}" y="{by}" text-anchor="middle" font-family="sans-serif" font-size="13">{x_label}</text>
<text x="18" y="{cy}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {cy})">{y_label}</text>
"#,
        cx = (x0 + x1) / 2.0,
        by = HEIGHT - 12.0,
        cy = (y0 + y1) / 2.0,
    );
    for i in 0..=5 {
        let fx = frame.x_min + (frame.x_max - frame.x_min) * i as f64 / 5.0;
        let fy = frame.y_min + (frame.y_max - frame.y_min) * i as f64 / 5.0;
        let px = frame.x(fx);
        let py = frame.y(fy);
        let _ = write!(
            out,
            r#"<line x1="{px}" y1="{y0}" x2="{px}" y2="{t}" stroke="black"/>
<text x="{px}" y="{ly}" text-anchor="middle" font-family="sans-serif" font-size="11">{fx:.3}</text>
<line x1="{x0}" y1="{py}" x2="{r}" y2="{py}" stroke="black"/>
<text x="{lx}" y="{tyy}" text-anchor="end" font-family="sans-serif" font-size="11">{fy:.3}</text>
"#,
            t = y0 + 5.0,
            ly = y0 + 20.0,
            r = x0 - 5.0,
            lx = x0 - 8.0,
            tyy = py + 4.0,
        );
    }
}

/// Multi-series line chart. Each series is `(name, points)`.
pub fn line_chart(
    path: &Path,
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
    x_label: &str,
    y_label: &str,
) -> io::Result<()> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    if all.is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "nothing to plot"));
    }
    let x_min = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let mut y_min = all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let mut y_max = all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if (y_max - y_min).abs() < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let frame = Frame { x_min, x_max, y_min, y_max };
    let mut out = String::new();
    svg_header(&mut out, title);
    axes(&mut out, &frame, x_label, y_label);
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.x(x), frame.y(y)))
            .collect();
        let _ = write!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>
"#,
            coords.join(" ")
        );
        let ly = MARGIN_T + 16.0 * si as f64;
        let _ = write!(
            out,
            r#"<rect x="{bx}" y="{ry}" width="12" height="3" fill="{color}"/>
<text x="{tx}" y="{ty}" font-family="sans-serif" font-size="12">{name}</text>
"#,
            bx = WIDTH - MARGIN_R - 150.0,
            ry = ly - 4.0,
            tx = WIDTH - MARGIN_R - 132.0,
            ty = ly,
        );
    }
    out.push_str("</svg>\n");
    std::fs::write(path, out)
}

/// Labeled bar chart (sweep tables).
pub fn bar_chart(
    path: &Path,
    title: &str,
    bars: &[(String, f64)],
    y_label: &str,
) -> io::Result<()> {
    if bars.is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "nothing to plot"));
    }
    let y_max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-9);
    let frame = Frame {
        x_min: 0.0,
        x_max: bars.len() as f64,
        y_min: 0.0,
        y_max,
    };
    let mut out = String::new();
    svg_header(&mut out, title);
    axes(&mut out, &frame, "", y_label);
    let slot = (WIDTH - MARGIN_L - MARGIN_R) / bars.len() as f64;
    for (i, (label, value)) in bars.iter().enumerate() {
        let x = MARGIN_L + slot * i as f64 + slot * 0.15;
        let w = slot * 0.7;
        let y = frame.y(*value);
        let h = HEIGHT - MARGIN_B - y;
        let _ = write!(
            out,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="#1f77b4"/>
<text x="{cx:.2}" y="{ly}" text-anchor="middle" font-family="sans-serif" font-size="12">{label}</text>
<text x="{cx:.2}" y="{vy:.2}" text-anchor="middle" font-family="sans-serif" font-size="11">{value:.3}</text>
"##,
            cx = x + w / 2.0,
            ly = HEIGHT - MARGIN_B + 20.0,
            vy = y - 6.0,
        );
    }
    out.push_str("</svg>\n");
    std::fs::write(path, out)
}
