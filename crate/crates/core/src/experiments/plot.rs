//! Hand-written SVG line charts and heatmaps.

use std::fmt::Write;
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Series {
        Series { name: name.into(), points }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Vec<Vec<f64>>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

pub enum Plot<'a> {
    Line { series: &'a [Series], x_label: &'a str, y_label: &'a str },
    Heatmap(&'a Heatmap),
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 420.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in v.filter(|x| x.is_finite()) {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

pub fn line_svg(title: &str, series: &[Series], x_label: &str, y_label: &str) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Data(format!("plot `{title}` has no points")));
    }
    let (l, r, t, b) = (70.0, 150.0, 40.0, 50.0);
    let (pw, ph) = (W - l - r, H - t - b);
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| l + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| t + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    header(&mut s, title);
    let _ = writeln!(s, r##"<rect x="{l}" y="{t}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let (px, py) = (sx(fx), sy(fy));
        let _ = writeln!(
            s,
            r##"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="#333"/><text x="{px:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"##,
            t + ph,
            t + ph + 5.0,
            t + ph + 18.0,
            fmt_tick(fx)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{py:.1}" x2="{l}" y2="{py:.1}" stroke="#333"/><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"##,
            l - 5.0,
            l - 8.0,
            py + 4.0,
            fmt_tick(fy)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#,
        l + pw / 2.0,
        H - 12.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        t + ph / 2.0,
        t + ph / 2.0,
        esc(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = t + 10.0 + 18.0 * i as f64;
        let lx = l + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            esc(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn header(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r##"<rect width="{W}" height="{H}" fill="#fff"/>"##);
    let _ = writeln!(s, r#"<text x="{:.1}" y="24" font-size="15" text-anchor="middle">{}</text>"#, W / 2.0, esc(title));
}

/// White-to-blue ramp over `[0,1]`.
fn ramp(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

pub fn heatmap_svg(title: &str, h: &Heatmap) -> Result<String> {
    let rows = h.values.len();
    let cols = h.values.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 || h.values.iter().any(|r| r.len() != cols) {
        return Err(Error::Data(format!("heatmap `{title}` needs a non-empty rectangular matrix")));
    }
    if h.row_labels.len() != rows || h.col_labels.len() != cols {
        return Err(Error::Data(format!("heatmap `{title}` labels do not match its {rows}×{cols} matrix")));
    }
    let (lo, hi) = range(h.values.iter().flatten().copied());
    let (l, t) = (90.0, 50.0);
    let cell = ((W - l - 110.0) / cols as f64).min((H - t - 60.0) / rows as f64);
    let mut s = String::new();
    header(&mut s, title);
    for (i, row) in h.values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let x = l + j as f64 * cell;
            let y = t + i as f64 * cell;
            let _ = writeln!(
                s,
                r##"<rect class="cell" x="{x:.1}" y="{y:.1}" width="{cell:.1}" height="{cell:.1}" fill="{}" stroke="#fff"><title>{} / {}: {}</title></rect>"##,
                ramp((v - lo) / (hi - lo)),
                esc(&h.row_labels[i]),
                esc(&h.col_labels[j]),
                fmt_tick(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"#,
            l - 6.0,
            t + (i as f64 + 0.5) * cell + 4.0,
            esc(&h.row_labels[i])
        );
    }
    for (j, lab) in h.col_labels.iter().enumerate() {
        let x = l + (j as f64 + 0.5) * cell;
        let y = t + rows as f64 * cell + 14.0;
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="11" text-anchor="end" transform="rotate(-45 {x:.1} {y:.1})">{}</text>"#,
            esc(lab)
        );
    }
    let lx = l + cols as f64 * cell + 20.0;
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let y = t + (1.0 - f) * 120.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{y:.1}" width="14" height="30" fill="{}"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            ramp(f),
            lx + 20.0,
            y + 12.0,
            fmt_tick(lo + (hi - lo) * f)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Render and write a plot.
pub fn emit_plot(title: &str, plot: Plot<'_>, path: &Path) -> Result<()> {
    let svg = match plot {
        Plot::Line { series, x_label, y_label } => line_svg(title, series, x_label, y_label)?,
        Plot::Heatmap(h) => heatmap_svg(title, h)?,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
