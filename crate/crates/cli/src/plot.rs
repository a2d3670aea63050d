//! Scatter and data-efficiency figures, rendered to SVG and PNG from one
//! description, with a JSON sidecar holding fit parameters and mark positions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::Serialize;
use serde_json::json;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{CliError, Result};
use crate::font::{self, GLYPH_H, GLYPH_W};

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 480;
const MARGIN_LEFT: f64 = 78.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 44.0;
const MARGIN_BOTTOM: f64 = 60.0;
/// Raster text is drawn at this multiple of the 5×7 glyph size.
const TEXT_SCALE: i64 = 2;
/// Two-sided coverage of the band around a fitted line.
pub const CONFIDENCE: f64 = 0.90;

pub type Color = [u8; 3];
const BLACK: Color = [0, 0, 0];
const GRID: Color = [225, 225, 225];
const BLUE: Color = [31, 99, 180];
const ORANGE: Color = [230, 120, 20];
const GRAY: Color = [130, 130, 130];
const RED: Color = [200, 30, 30];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub log: bool,
}

impl Axis {
    pub fn linear(min: f64, max: f64) -> Self {
        Self { min, max, log: false }
    }

    fn t(&self, v: f64) -> f64 {
        if self.log {
            v.log10()
        } else {
            v
        }
    }

    /// Position of `v` along the axis, 0 at `min` and 1 at `max`.
    pub fn frac(&self, v: f64) -> f64 {
        (self.t(v) - self.t(self.min)) / (self.t(self.max) - self.t(self.min))
    }

    pub fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (lo, hi) = (self.min.log10().ceil() as i32, self.max.log10().floor() as i32);
            return (lo..=hi).map(|k| 10f64.powi(k)).collect();
        }
        let step = nice_step((self.max - self.min) / 5.0);
        let first = (self.min / step).ceil() as i64;
        let last = (self.max / step).floor() as i64;
        (first..=last).map(|k| k as f64 * step).collect()
    }

    fn label(&self, v: f64) -> String {
        if self.log {
            return format!("1e{}", v.log10().round() as i32);
        }
        let step = nice_step((self.max - self.min) / 5.0);
        let digits = (-step.log10().floor()).max(0.0) as usize;
        let s = format!("{v:.digits$}");
        if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
            s[1..].to_string()
        } else {
            s
        }
    }
}

fn nice_step(raw: f64) -> f64 {
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    let m = if r <= 1.0 {
        1.0
    } else if r <= 2.0 {
        2.0
    } else if r <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

/// Linear range covering `values` with a little padding, snapped to ticks.
fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { lo.abs().max(1.0) };
    let step = nice_step(span / 5.0);
    (((lo - 0.05 * span) / step).floor() * step, ((hi + 0.05 * span) / step).ceil() * step)
}

#[derive(Debug, Clone, PartialEq)]
enum Mark {
    Points {
        pts: Vec<(f64, f64)>,
        color: Color,
        radius: f64,
    },
    Line {
        pts: Vec<(f64, f64)>,
        color: Color,
        width: f64,
        dashed: bool,
    },
    /// Filled region between two curves sampled at the same x positions.
    Band {
        xs: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        color: Color,
        alpha: f64,
    },
    Label {
        at: (f64, f64),
        text: String,
    },
}

/// A 2-D chart in data coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_axis: Axis,
    pub y_axis: Axis,
    marks: Vec<Mark>,
    /// Free text stacked in the top-left corner of the plot area.
    notes: Vec<(String, Color)>,
}

impl Figure {
    pub fn new(title: &str, x_label: &str, y_label: &str, x_axis: Axis, y_axis: Axis) -> Self {
        Self { title: title.into(), x_label: x_label.into(), y_label: y_label.into(), x_axis, y_axis, marks: vec![], notes: vec![] }
    }

    /// Pixel position of a data point.
    pub fn pixel(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let w = WIDTH as f64 - MARGIN_LEFT - MARGIN_RIGHT;
        let h = HEIGHT as f64 - MARGIN_TOP - MARGIN_BOTTOM;
        (MARGIN_LEFT + self.x_axis.frac(x) * w, MARGIN_TOP + (1.0 - self.y_axis.frac(y)) * h)
    }

    fn plot_area(&self) -> (f64, f64, f64, f64) {
        (MARGIN_LEFT, MARGIN_TOP, WIDTH as f64 - MARGIN_RIGHT, HEIGHT as f64 - MARGIN_BOTTOM)
    }

    pub fn to_svg(&self) -> String {
        let mut s = String::new();
        let (x0, y0, x1, y1) = self.plot_area();
        let rgb = |c: Color| format!("rgb({},{},{})", c[0], c[1], c[2]);
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<defs><clipPath id="area"><rect x="{x0}" y="{y0}" width="{}" height="{}"/></clipPath></defs>"#,
            x1 - x0,
            y1 - y0
        );
        for v in self.x_axis.ticks() {
            let (px, _) = self.pixel((v, self.y_axis.min));
            let _ = writeln!(s, r#"<line x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{y1}" stroke="{}"/>"#, rgb(GRID));
            let _ = writeln!(
                s,
                r#"<text x="{px:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
                y1 + 18.0,
                esc(&self.x_axis.label(v))
            );
        }
        for v in self.y_axis.ticks() {
            let (_, py) = self.pixel((self.x_axis.min, v));
            let _ = writeln!(s, r#"<line x1="{x0}" y1="{py:.2}" x2="{x1}" y2="{py:.2}" stroke="{}"/>"#, rgb(GRID));
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{}</text>"#,
                x0 - 6.0,
                py + 4.0,
                esc(&self.y_axis.label(v))
            );
        }
        let _ = writeln!(s, r#"<g clip-path="url(#area)">"#);
        for mark in &self.marks {
            match mark {
                Mark::Band { xs, lower, upper, color, alpha } => {
                    let mut pts: Vec<(f64, f64)> = xs.iter().zip(upper).map(|(&x, &y)| self.pixel((x, y))).collect();
                    pts.extend(xs.iter().zip(lower).rev().map(|(&x, &y)| self.pixel((x, y))));
                    let _ = writeln!(s, r#"<polygon points="{}" fill="{}" fill-opacity="{alpha}"/>"#, svg_points(&pts), rgb(*color));
                }
                Mark::Line { pts, color, width, dashed } => {
                    let px: Vec<_> = pts.iter().map(|&p| self.pixel(p)).collect();
                    let dash = if *dashed { r#" stroke-dasharray="6 4""# } else { "" };
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{width}"{dash}/>"#,
                        svg_points(&px),
                        rgb(*color)
                    );
                }
                Mark::Points { pts, color, radius } => {
                    for &p in pts {
                        let (px, py) = self.pixel(p);
                        let _ =
                            writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="{radius}" fill="{}" fill-opacity="0.8"/>"#, rgb(*color));
                    }
                }
                Mark::Label { at, text } => {
                    let (px, py) = self.pixel(*at);
                    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12">{}</text>"#, px + 7.0, py - 7.0, esc(text));
                }
            }
        }
        let _ = writeln!(s, "</g>");
        let _ = writeln!(s, r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y1 - y0);
        for (i, (note, color)) in self.notes.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-size="12" fill="{}">{}</text>"#,
                x0 + 8.0,
                y0 + 18.0 + 16.0 * i as f64,
                rgb(*color),
                esc(note)
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="26" font-size="16" text-anchor="middle">{}</text>"#, WIDTH / 2, esc(&self.title));
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" font-size="13" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 14,
            esc(&self.x_label)
        );
        let cy = (y0 + y1) / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="18" y="{cy:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 18 {cy:.2})">{}</text>"#,
            esc(&self.y_label)
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn to_png(&self) -> RgbImage {
        let mut c = Canvas::new();
        let (x0, y0, x1, y1) = self.plot_area();
        for v in self.x_axis.ticks() {
            let (px, _) = self.pixel((v, self.y_axis.min));
            c.line((px, y0), (px, y1), GRID, 1.0);
            c.text_centered(&self.x_axis.label(v), px, y1 + 8.0, BLACK);
        }
        for v in self.y_axis.ticks() {
            let (_, py) = self.pixel((self.x_axis.min, v));
            c.line((x0, py), (x1, py), GRID, 1.0);
            let label = self.y_axis.label(v);
            c.text(&label, x0 - 6.0 - text_width(&label), py - (GLYPH_H as i64 * TEXT_SCALE) as f64 / 2.0, BLACK);
        }
        c.clip = Some((x0, y0, x1, y1));
        for mark in &self.marks {
            match mark {
                Mark::Band { xs, lower, upper, color, alpha } => {
                    for w in 0..xs.len().saturating_sub(1) {
                        let a = (self.pixel((xs[w], upper[w])), self.pixel((xs[w], lower[w])));
                        let b = (self.pixel((xs[w + 1], upper[w + 1])), self.pixel((xs[w + 1], lower[w + 1])));
                        c.band_segment(a, b, *color, *alpha);
                    }
                }
                Mark::Line { pts, color, width, dashed } => {
                    for seg in pts.windows(2) {
                        let (a, b) = (self.pixel(seg[0]), self.pixel(seg[1]));
                        if *dashed {
                            c.dashed_line(a, b, *color, *width);
                        } else {
                            c.line(a, b, *color, *width);
                        }
                    }
                }
                Mark::Points { pts, color, radius } => {
                    for &p in pts {
                        c.disc(self.pixel(p), *radius, *color, 0.8);
                    }
                }
                Mark::Label { at, text } => {
                    let (px, py) = self.pixel(*at);
                    c.text(text, px + 7.0, py - 7.0 - (GLYPH_H as i64 * TEXT_SCALE) as f64, BLACK);
                }
            }
        }
        c.clip = None;
        c.rect_outline(x0, y0, x1, y1, BLACK);
        for (i, (note, color)) in self.notes.iter().enumerate() {
            c.text(note, x0 + 8.0, y0 + 8.0 + 18.0 * i as f64, *color);
        }
        c.text_centered(&self.title, WIDTH as f64 / 2.0, 12.0, BLACK);
        c.text_centered(&self.x_label, (x0 + x1) / 2.0, HEIGHT as f64 - 26.0, BLACK);
        c.text_vertical(&self.y_label, 10.0, (y0 + y1) / 2.0 + text_width(&self.y_label) / 2.0, BLACK);
        c.img
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_points(pts: &[(f64, f64)]) -> String {
    pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect::<Vec<_>>().join(" ")
}

fn text_width(s: &str) -> f64 {
    (s.chars().count() as i64 * (GLYPH_W as i64 + 1) * TEXT_SCALE) as f64
}

struct Canvas {
    img: RgbImage,
    clip: Option<(f64, f64, f64, f64)>,
}

impl Canvas {
    fn new() -> Self {
        Self { img: RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255])), clip: None }
    }

    fn blend(&mut self, x: i64, y: i64, color: Color, alpha: f64) {
        if let Some((x0, y0, x1, y1)) = self.clip {
            if (x as f64) < x0 || (x as f64) > x1 || (y as f64) < y0 || (y as f64) > y1 {
                return;
            }
        }
        if x < 0 || y < 0 || x >= WIDTH as i64 || y >= HEIGHT as i64 {
            return;
        }
        let px = self.img.get_pixel_mut(x as u32, y as u32);
        for (dst, src) in px.0.iter_mut().zip(color) {
            *dst = (f64::from(*dst) * (1.0 - alpha) + f64::from(src) * alpha).round() as u8;
        }
    }

    fn disc(&mut self, (cx, cy): (f64, f64), r: f64, color: Color, alpha: f64) {
        let (lo_x, hi_x) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
        let (lo_y, hi_y) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.blend(x, y, color, alpha);
                }
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: Color, width: f64) {
        self.line_pattern(a, b, color, width, None);
    }

    fn dashed_line(&mut self, a: (f64, f64), b: (f64, f64), color: Color, width: f64) {
        self.line_pattern(a, b, color, width, Some((6.0, 4.0)));
    }

    /// Pixels within `width / 2` of the segment, optionally dashed.
    fn line_pattern(&mut self, a: (f64, f64), b: (f64, f64), color: Color, width: f64, dash: Option<(f64, f64)>) {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let half = (width / 2.0).max(0.5);
        let (lo_x, hi_x) = ((a.0.min(b.0) - half).floor() as i64, (a.0.max(b.0) + half).ceil() as i64);
        let (lo_y, hi_y) = ((a.1.min(b.1) - half).floor() as i64, (a.1.max(b.1) + half).ceil() as i64);
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
                if qx * qx + qy * qy > half * half {
                    continue;
                }
                if let Some((on, off)) = dash {
                    if (t * len2.sqrt()) % (on + off) >= on {
                        continue;
                    }
                }
                self.blend(x, y, color, 1.0);
            }
        }
    }

    /// Fills the quadrilateral between two vertical spans `a` and `b`, each
    /// given as (top, bottom) pixel points.
    fn band_segment(&mut self, a: ((f64, f64), (f64, f64)), b: ((f64, f64), (f64, f64)), color: Color, alpha: f64) {
        let (xa, xb) = (a.0 .0, b.0 .0);
        if xb <= xa {
            return;
        }
        for x in xa.floor() as i64..xb.ceil() as i64 {
            let cx = x as f64 + 0.5;
            if cx < xa || cx >= xb {
                continue;
            }
            let t = (cx - xa) / (xb - xa);
            let top = a.0 .1 + t * (b.0 .1 - a.0 .1);
            let bottom = a.1 .1 + t * (b.1 .1 - a.1 .1);
            for y in top.min(bottom).round() as i64..=top.max(bottom).round() as i64 {
                self.blend(x, y, color, alpha);
            }
        }
    }

    fn rect_outline(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: Color) {
        self.line((x0, y0), (x1, y0), color, 1.0);
        self.line((x1, y0), (x1, y1), color, 1.0);
        self.line((x1, y1), (x0, y1), color, 1.0);
        self.line((x0, y1), (x0, y0), color, 1.0);
    }

    fn glyph_cells(&mut self, text: &str, mut cell: impl FnMut(usize, usize, usize) -> (i64, i64), color: Color) {
        for (i, ch) in text.chars().enumerate() {
            let Some(rows) = font::glyph(ch) else { continue };
            for (gy, row) in rows.iter().enumerate() {
                for (gx, bit) in row.chars().enumerate() {
                    if bit != '#' {
                        continue;
                    }
                    let (x, y) = cell(i, gx, gy);
                    for sy in 0..TEXT_SCALE {
                        for sx in 0..TEXT_SCALE {
                            self.blend(x + sx, y + sy, color, 1.0);
                        }
                    }
                }
            }
        }
    }

    /// Text with its top-left corner at (x, y).
    fn text(&mut self, text: &str, x: f64, y: f64, color: Color) {
        let (x, y) = (x.round() as i64, y.round() as i64);
        let advance = (GLYPH_W as i64 + 1) * TEXT_SCALE;
        self.glyph_cells(text, |i, gx, gy| (x + i as i64 * advance + gx as i64 * TEXT_SCALE, y + gy as i64 * TEXT_SCALE), color);
    }

    fn text_centered(&mut self, text: &str, cx: f64, y: f64, color: Color) {
        self.text(text, cx - text_width(text) / 2.0, y, color);
    }

    /// Text reading bottom to top, starting at (x, y).
    fn text_vertical(&mut self, text: &str, x: f64, y: f64, color: Color) {
        let (x, y) = (x.round() as i64, y.round() as i64);
        let advance = (GLYPH_W as i64 + 1) * TEXT_SCALE;
        self.glyph_cells(text, |i, gx, gy| (x + gy as i64 * TEXT_SCALE, y - i as i64 * advance - gx as i64 * TEXT_SCALE), color);
    }
}

/// Ordinary least squares `y = slope·x + intercept` with the pieces needed
/// for a confidence band on the mean response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
    pub x_mean: f64,
    /// Σ (x − x̄)².
    pub sxx: f64,
    /// Residual standard error with n − 2 degrees of freedom (`None` for n = 2).
    pub residual_std: Option<f64>,
    /// Two-sided Student-t quantile for [`CONFIDENCE`] (`None` for n = 2).
    pub t_quantile: Option<f64>,
}

impl LinearFit {
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() || x.len() < 2 {
            return Err(CliError::Plot(format!("need at least 2 paired values, got {} and {}", x.len(), y.len())));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(CliError::Plot("non-finite value".into()));
        }
        let n = x.len();
        let nf = n as f64;
        let x_mean = x.iter().sum::<f64>() / nf;
        let y_mean = y.iter().sum::<f64>() / nf;
        let sxx: f64 = x.iter().map(|v| (v - x_mean).powi(2)).sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - x_mean) * (b - y_mean)).sum();
        if sxx <= f64::EPSILON * nf * x_mean.abs().max(1.0).powi(2) {
            return Err(cardio_ssl::Error::DegenerateVariance("ground truth is constant".into()).into());
        }
        let slope = sxy / sxx;
        let intercept = y_mean - slope * x_mean;
        let (residual_std, t_quantile) = if n > 2 {
            let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
            let t = StudentsT::new(0.0, 1.0, (n - 2) as f64).map_err(|e| CliError::Plot(e.to_string()))?;
            (Some((sse / (nf - 2.0)).sqrt()), Some(t.inverse_cdf(0.5 + CONFIDENCE / 2.0)))
        } else {
            (None, None)
        };
        Ok(Self { slope, intercept, n, x_mean, sxx, residual_std, t_quantile })
    }

    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    /// Half-width of the confidence band on the fitted mean at `x`.
    pub fn band_half_width(&self, x: f64) -> Option<f64> {
        let (s, t) = (self.residual_std?, self.t_quantile?);
        Some(t * s * (1.0 / self.n as f64 + (x - self.x_mean).powi(2) / self.sxx).sqrt())
    }
}

/// A rendered figure plus machine-readable metadata.
#[derive(Debug, Clone)]
pub struct Plot {
    pub figure: Figure,
    pub metadata: serde_json::Value,
}

impl Plot {
    /// Writes `<stem>.svg`, `<stem>.png` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let paths = ["svg", "png", "json"].map(|ext| dir.join(format!("{stem}.{ext}")));
        std::fs::write(&paths[0], self.figure.to_svg())?;
        self.figure.to_png().save(&paths[1])?;
        std::fs::write(&paths[2], serde_json::to_string_pretty(&self.metadata)?)?;
        Ok(paths.to_vec())
    }
}

/// Predicted against ground-truth cardiac output with a least-squares line and
/// its confidence band. Constant ground truth leaves out the fit and says so
/// on the figure.
pub fn plot_scatter(title: &str, truth: &[f64], pred: &[f64]) -> Result<Plot> {
    if truth.len() != pred.len() || truth.len() < 2 {
        return Err(CliError::Plot(format!("need at least 2 prediction pairs, got {} and {}", truth.len(), pred.len())));
    }
    if truth.iter().chain(pred).any(|v| !v.is_finite()) {
        return Err(CliError::Plot("non-finite prediction or label".into()));
    }
    let (lo, hi) = padded_range(truth.iter().chain(pred).copied());
    let axis = Axis::linear(lo, hi);
    let mut fig = Figure::new(title, "Ground-truth CO (L/min)", "Predicted CO (L/min)", axis, axis);
    fig.marks.push(Mark::Line { pts: vec![(lo, lo), (hi, hi)], color: GRAY, width: 1.0, dashed: true });

    let (fit, warning) = match LinearFit::fit(truth, pred) {
        Ok(f) => (Some(f), None),
        Err(CliError::Core(cardio_ssl::Error::DegenerateVariance(msg))) => (None, Some(format!("no fit: {msg}"))),
        Err(e) => return Err(e),
    };
    if let Some(f) = &fit {
        let xs: Vec<f64> = (0..=64).map(|i| lo + (hi - lo) * i as f64 / 64.0).collect();
        if f.residual_std.is_some() {
            let half: Vec<f64> = xs.iter().map(|&x| f.band_half_width(x).unwrap_or(0.0)).collect();
            fig.marks.push(Mark::Band {
                lower: xs.iter().zip(&half).map(|(&x, h)| f.predict(x) - h).collect(),
                upper: xs.iter().zip(&half).map(|(&x, h)| f.predict(x) + h).collect(),
                xs: xs.clone(),
                color: ORANGE,
                alpha: 0.25,
            });
        }
        fig.marks.push(Mark::Line { pts: vec![(lo, f.predict(lo)), (hi, f.predict(hi))], color: ORANGE, width: 2.0, dashed: false });
        fig.notes.push((format!("fit: y = {:.3} x + {:.3}", f.slope, f.intercept), BLACK));
    }
    if let Some(w) = &warning {
        fig.notes.push((w.clone(), RED));
    }
    let pts: Vec<(f64, f64)> = truth.iter().copied().zip(pred.iter().copied()).collect();
    fig.marks.push(Mark::Points { pts: pts.clone(), color: BLUE, radius: 3.5 });

    let metadata = json!({
        "kind": "scatter",
        "title": title,
        "n": truth.len(),
        "confidence": CONFIDENCE,
        "fit": fit,
        "warning": warning,
        "x_axis": fig.x_axis,
        "y_axis": fig.y_axis,
        "points": pts.iter().map(|&(t, p)| {
            let (px, py) = fig.pixel((t, p));
            json!({ "truth": t, "prediction": p, "px": px, "py": py })
        }).collect::<Vec<_>>(),
    });
    Ok(Plot { figure: fig, metadata })
}

/// One point of the data-efficiency figure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyPoint {
    /// Number of pretraining videos.
    pub size: f64,
    pub pearson: f64,
    pub label: String,
}

/// Test Pearson against pretraining set size on a log axis.
pub fn plot_data_efficiency(title: &str, points: &[EfficiencyPoint]) -> Result<Plot> {
    if points.is_empty() {
        return Err(CliError::Plot("no points".into()));
    }
    if let Some(p) = points.iter().find(|p| !(p.size > 0.0 && p.size.is_finite())) {
        return Err(cardio_ssl::Error::InvalidInput(format!("pretraining size must be positive, got {} for {:?}", p.size, p.label)).into());
    }
    if points.iter().any(|p| !p.pearson.is_finite()) {
        return Err(CliError::Plot("non-finite Pearson value".into()));
    }
    let (min, max) = points.iter().fold((f64::INFINITY, 0f64), |(a, b), p| (a.min(p.size), b.max(p.size)));
    let (mut lo, mut hi) = (min.log10().floor(), max.log10().ceil());
    if hi <= lo {
        hi = lo + 1.0;
    }
    if max.log10() >= hi {
        hi += 1.0;
    }
    if min.log10() <= lo && lo > 0.0 {
        lo -= 1.0;
    }
    let x_axis = Axis { min: 10f64.powf(lo), max: 10f64.powf(hi), log: true };
    let (ylo, yhi) = padded_range(points.iter().map(|p| p.pearson).chain([0.0]));
    let mut fig = Figure::new(title, "Pretraining videos (log scale)", "Test Pearson", x_axis, Axis::linear(ylo, yhi));
    fig.marks.push(Mark::Points { pts: points.iter().map(|p| (p.size, p.pearson)).collect(), color: BLUE, radius: 5.0 });
    for p in points {
        fig.marks.push(Mark::Label { at: (p.size, p.pearson), text: p.label.clone() });
    }
    let metadata = json!({
        "kind": "data_efficiency",
        "title": title,
        "x_axis": fig.x_axis,
        "y_axis": fig.y_axis,
        "points": points.iter().map(|p| {
            let (px, py) = fig.pixel((p.size, p.pearson));
            json!({ "size": p.size, "pearson": p.pearson, "label": p.label, "px": px, "py": py })
        }).collect::<Vec<_>>(),
    });
    Ok(Plot { figure: fig, metadata })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        // small LCG so the tests need no RNG crate
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 * 8.0 + 2.0
            })
            .collect()
    }

    /// Normal equations solved via the 2×2 inverse.
    fn oracle_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let det = n * sxx - sx * sx;
        ((n * sxy - sx * sy) / det, (sxx * sy - sx * sxy) / det)
    }

    #[test]
    fn perfect_predictions_fit_the_identity() {
        let y = [2.0, 3.5, 5.0, 7.25, 9.0];
        let plot = plot_scatter("t", &y, &y).unwrap();
        let fit: LinearFit = LinearFit::fit(&y, &y).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12 && fit.intercept.abs() < 1e-12);
        assert!(fit.band_half_width(4.0).unwrap() < 1e-9);
        assert_eq!(plot.metadata["fit"]["slope"].as_f64().unwrap(), fit.slope);
    }

    #[test]
    fn constant_predictions_give_a_flat_fit() {
        let y = [2.0, 4.0, 6.0, 8.0];
        let plot = plot_scatter("t", &y, &[5.0; 4]).unwrap();
        assert_eq!(plot.metadata["fit"]["slope"].as_f64().unwrap(), 0.0);
        assert_eq!(plot.metadata["fit"]["intercept"].as_f64().unwrap(), 5.0);
        assert!(plot.metadata["warning"].is_null());
    }

    #[test]
    fn fit_matches_normal_equations() {
        for seed in 0..50 {
            let x = pseudo(30, seed);
            let y: Vec<f64> = x.iter().zip(pseudo(30, seed + 1000)).map(|(a, e)| 0.7 * a + 0.3 * e).collect();
            let f = LinearFit::fit(&x, &y).unwrap();
            let (slope, intercept) = oracle_fit(&x, &y);
            assert!((f.slope - slope).abs() < 1e-9, "{} vs {slope}", f.slope);
            assert!((f.intercept - intercept).abs() < 1e-9);
        }
    }

    #[test]
    fn band_uses_the_t_quantile() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.1, 1.9, 3.2, 3.8, 5.1];
        let f = LinearFit::fit(&x, &y).unwrap();
        // t(0.95, 3 dof)
        assert!((f.t_quantile.unwrap() - 2.353363434801823).abs() < 1e-9);
        let h = f.band_half_width(3.0).unwrap();
        assert!((h - f.t_quantile.unwrap() * f.residual_std.unwrap() / 5f64.sqrt()).abs() < 1e-12);
        assert!(f.band_half_width(5.0).unwrap() > h);
    }

    #[test]
    fn degenerate_truth_omits_the_fit_with_a_warning() {
        let plot = plot_scatter("t", &[4.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(plot.metadata["fit"].is_null());
        assert!(plot.metadata["warning"].as_str().unwrap().contains("no fit"));
        assert!(plot.figure.to_svg().contains("no fit"));
    }

    #[test]
    fn scatter_rejects_too_few_pairs() {
        assert!(plot_scatter("t", &[1.0], &[1.0]).is_err());
        assert!(plot_scatter("t", &[1.0, 2.0], &[1.0]).is_err());
        assert!(plot_scatter("t", &[1.0, 2.0], &[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn efficiency_x_is_linear_in_log_size() {
        let pts: Vec<EfficiencyPoint> = [201.0, 2_000.0, 1.2e6]
            .iter()
            .zip([0.41, 0.3, 0.13])
            .map(|(&size, pearson)| EfficiencyPoint { size, pearson, label: format!("n={size}") })
            .collect();
        let plot = plot_data_efficiency("t", &pts).unwrap();
        let meta = plot.metadata["points"].as_array().unwrap();
        let px: Vec<f64> = meta.iter().map(|p| p["px"].as_f64().unwrap()).collect();
        let lx: Vec<f64> = pts.iter().map(|p| p.size.log10()).collect();
        let scale = (px[1] - px[0]) / (lx[1] - lx[0]);
        assert!(((px[2] - px[0]) / (lx[2] - lx[0]) - scale).abs() < 1e-9);
        assert!(plot.figure.x_axis.log);
        assert!(px.iter().all(|&x| x > MARGIN_LEFT && x < WIDTH as f64 - MARGIN_RIGHT));
    }

    #[test]
    fn efficiency_single_point_and_errors() {
        let one = [EfficiencyPoint { size: 201.0, pearson: 0.41, label: "ssl".into() }];
        let plot = plot_data_efficiency("t", &one).unwrap();
        assert_eq!(plot.metadata["points"].as_array().unwrap().len(), 1);
        assert!(plot.figure.to_svg().matches("<circle").count() == 1);
        let bad = [EfficiencyPoint { size: 0.0, pearson: 0.1, label: "x".into() }];
        assert!(matches!(plot_data_efficiency("t", &bad), Err(CliError::Core(cardio_ssl::Error::InvalidInput(_)))));
    }

    #[test]
    fn rendering_is_deterministic() {
        let x = pseudo(24, 3);
        let y = pseudo(24, 4);
        let a = plot_scatter("Test set", &x, &y).unwrap();
        let b = plot_scatter("Test set", &x, &y).unwrap();
        assert_eq!(a.figure.to_svg(), b.figure.to_svg());
        assert_eq!(a.figure.to_png().as_raw(), b.figure.to_png().as_raw());
        // something besides the background was drawn
        assert!(a.figure.to_png().pixels().filter(|p| p.0[2] > p.0[0].saturating_add(60)).count() > 100);
    }

    #[test]
    fn write_emits_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let plot = plot_scatter("t", &[1.0, 2.0, 3.0], &[1.5, 2.0, 2.5]).unwrap();
        let paths = plot.write(dir.path(), "scatter").unwrap();
        assert_eq!(paths.len(), 3);
        let png = image::open(&paths[1]).unwrap();
        assert_eq!((png.width(), png.height()), (WIDTH, HEIGHT));
        assert!(std::fs::read_to_string(&paths[0]).unwrap().starts_with("<svg"));
    }

    #[test]
    fn ticks_are_round_numbers() {
        assert_eq!(Axis::linear(0.0, 10.0).ticks(), vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        assert_eq!(Axis { min: 100.0, max: 1e4, log: true }.ticks(), vec![100.0, 1000.0, 10000.0]);
        assert_eq!(Axis::linear(-1.0, 1.0).label(0.0), "0.0");
    }
}
