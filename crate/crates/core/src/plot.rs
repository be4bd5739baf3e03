//! Minimal PNG rendering: colour-mapped grids and line/bar charts.
//!
//! Charts carry numeric axis extremes only; series names go into the CSV
//! written next to each figure, in legend order.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GREY: Rgb<u8> = Rgb([200, 200, 200]);

/// Distinct line colours, cycled.
pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Viridis-like ramp for `v ∈ [0, 1]`; values outside are clamped.
pub fn colormap(v: f32) -> Rgb<u8> {
    const STOPS: [[f32; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let pos = v * (STOPS.len() - 1) as f32;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - i as f32;
    let c = |k: usize| (STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// One colour-mapped map with its display range.
#[derive(Clone, Debug)]
pub struct Panel {
    pub map: Array2<f32>,
    pub vmin: f32,
    pub vmax: f32,
}

impl Panel {
    /// Range taken from the data (`[0, max]`, or `[0, 1]` for an all-zero map).
    pub fn auto(map: Array2<f32>) -> Self {
        let vmax = map.iter().cloned().fold(0.0f32, f32::max);
        Self {
            map,
            vmin: 0.0,
            vmax: if vmax > 0.0 { vmax } else { 1.0 },
        }
    }
}

/// Lays panels out row-major, `cols` per row; `None` leaves a blank cell.
pub fn compose_grid(panels: &[Option<Panel>], cols: usize, scale: u32, pad: u32) -> Result<RgbImage> {
    if cols == 0 || scale == 0 || panels.is_empty() {
        return Err(Error::Argument("grid needs panels, columns and a positive scale".into()));
    }
    let (ch, cw) = panels
        .iter()
        .flatten()
        .map(|p| p.map.dim())
        .fold((0, 0), |(a, b), (h, w)| (a.max(h), b.max(w)));
    let (ch, cw) = (ch as u32 * scale, cw as u32 * scale);
    let rows = panels.len().div_ceil(cols) as u32;
    let mut img = RgbImage::from_pixel(cols as u32 * (cw + pad) + pad, rows * (ch + pad) + pad, WHITE);
    for (i, p) in panels.iter().enumerate() {
        let Some(p) = p else { continue };
        let (ox, oy) = (pad + (i % cols) as u32 * (cw + pad), pad + (i / cols) as u32 * (ch + pad));
        let span = (p.vmax - p.vmin).max(f32::MIN_POSITIVE);
        for ((r, c), &v) in p.map.indexed_iter() {
            let colour = colormap((v - p.vmin) / span);
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(ox + c as u32 * scale + dx, oy + r as u32 * scale + dy, colour);
                }
            }
        }
    }
    Ok(img)
}

// 3×5 glyphs, one row per u8 (low 3 bits, left = bit 2)
fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '+' => [0, 2, 7, 2, 0],
        'e' => [0, 7, 7, 4, 7],
        _ => return None,
    })
}

/// Draws `text` with the built-in digit font; unsupported characters become gaps.
pub fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, size: u32, colour: Rgb<u8>) {
    for (k, ch) in text.chars().enumerate() {
        let Some(rows) = glyph(ch) else { continue };
        let gx = x + k as u32 * 4 * size;
        for (r, bits) in rows.iter().enumerate() {
            for c in 0..3u32 {
                if bits & (4 >> c) != 0 {
                    for dy in 0..size {
                        for dx in 0..size {
                            let (px, py) = (gx + c * size + dx, y + r as u32 * size + dy);
                            if px < img.width() && py < img.height() {
                                img.put_pixel(px, py, colour);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn label(v: f64) -> String {
    if v == 0.0 || (1e-2..1e4).contains(&v.abs()) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), colour: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, colour);
            }
        }
    }
}

const W: u32 = 640;
const H: u32 = 400;
const LEFT: f64 = 90.0;
const BOTTOM: f64 = 40.0;
const TOP: f64 = 40.0;
const RIGHT: f64 = 20.0;

struct Frame {
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn new(values: impl Iterator<Item = f64>, from_zero: bool) -> Self {
        let (mut lo, mut hi) = values
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if from_zero {
            lo = lo.min(0.0);
        }
        if hi - lo < 1e-300 {
            hi = lo + 1.0;
        }
        Self { ymin: lo, ymax: hi }
    }

    fn y(&self, v: f64) -> f64 {
        let plot_h = H as f64 - TOP - BOTTOM;
        TOP + plot_h * (1.0 - (v - self.ymin) / (self.ymax - self.ymin))
    }

    fn canvas(&self, n_series: usize) -> RgbImage {
        let mut img = RgbImage::from_pixel(W, H, WHITE);
        let (x0, x1) = (LEFT, W as f64 - RIGHT);
        let (y0, y1) = (TOP, H as f64 - BOTTOM);
        for k in 1..4 {
            let y = y0 + (y1 - y0) * k as f64 / 4.0;
            line(&mut img, (x0, y), (x1, y), GREY);
        }
        line(&mut img, (x0, y0), (x0, y1), BLACK);
        line(&mut img, (x0, y1), (x1, y1), BLACK);
        draw_text(&mut img, 4, y0 as u32 - 5, &label(self.ymax), 2, BLACK);
        draw_text(&mut img, 4, y1 as u32 - 5, &label(self.ymin), 2, BLACK);
        for s in 0..n_series {
            let c = Rgb(PALETTE[s % PALETTE.len()]);
            for dy in 0..10 {
                for dx in 0..20 {
                    img.put_pixel(LEFT as u32 + s as u32 * 30 + dx, 12 + dy, c);
                }
            }
        }
        img
    }
}

fn check_series(series: &[(String, Vec<f64>)]) -> Result<usize> {
    let n = series.first().map(|s| s.1.len()).unwrap_or(0);
    if n == 0 || series.iter().any(|s| s.1.len() != n) {
        return Err(Error::Argument("chart series must be non-empty and of equal length".into()));
    }
    Ok(n)
}

/// Line chart of equally spaced points, one polyline per series; x labels show `x_first`, `x_last`.
pub fn line_chart(series: &[(String, Vec<f64>)], x_first: f64, x_last: f64, log_y: bool) -> Result<RgbImage> {
    let n = check_series(series)?;
    let tf = |v: f64| if log_y { v.max(1e-300).log10() } else { v };
    let frame = Frame::new(series.iter().flat_map(|s| s.1.iter().map(|&v| tf(v))), !log_y);
    let mut img = frame.canvas(series.len());
    let plot_w = W as f64 - LEFT - RIGHT;
    let x = |i: usize| LEFT + if n == 1 { plot_w / 2.0 } else { plot_w * i as f64 / (n - 1) as f64 };
    for (s, (_, ys)) in series.iter().enumerate() {
        let c = Rgb(PALETTE[s % PALETTE.len()]);
        for i in 1..n {
            if ys[i - 1].is_finite() && ys[i].is_finite() {
                line(&mut img, (x(i - 1), frame.y(tf(ys[i - 1]))), (x(i), frame.y(tf(ys[i]))), c);
            }
        }
        if n == 1 && ys[0].is_finite() {
            line(&mut img, (x(0) - 3.0, frame.y(tf(ys[0]))), (x(0) + 3.0, frame.y(tf(ys[0]))), c);
        }
    }
    draw_text(&mut img, LEFT as u32, H - BOTTOM as u32 + 10, &label(x_first), 2, BLACK);
    let last = label(x_last);
    draw_text(&mut img, W - RIGHT as u32 - 8 * last.len() as u32, H - BOTTOM as u32 + 10, &last, 2, BLACK);
    Ok(img)
}

/// Grouped bars: `series[s].1[g]` is the bar of series `s` in group `g`.
pub fn bar_chart(series: &[(String, Vec<f64>)]) -> Result<RgbImage> {
    let groups = check_series(series)?;
    let frame = Frame::new(series.iter().flat_map(|s| s.1.iter().copied()), true);
    let mut img = frame.canvas(series.len());
    let plot_w = W as f64 - LEFT - RIGHT;
    let slot = plot_w / groups as f64;
    let bar = slot * 0.8 / series.len() as f64;
    let base = frame.y(0.0);
    for (s, (_, ys)) in series.iter().enumerate() {
        let c = Rgb(PALETTE[s % PALETTE.len()]);
        for (g, &v) in ys.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let x0 = LEFT + g as f64 * slot + slot * 0.1 + s as f64 * bar;
            let (ya, yb) = (frame.y(v).min(base), frame.y(v).max(base));
            for px in x0.round() as u32..(x0 + bar - 1.0).round() as u32 {
                for py in ya.round() as u32..=yb.round() as u32 {
                    if px < W && py < H {
                        img.put_pixel(px, py, c);
                    }
                }
            }
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes `series` as columns (`index`, then one per series) next to a chart.
pub fn write_series_csv(series: &[(String, Vec<f64>)], index: &[String], path: impl AsRef<Path>) -> Result<()> {
    let n = check_series(series)?;
    if index.len() != n {
        return Err(Error::Argument(format!("{} index labels for {n} points", index.len())));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["index".to_string()];
    header.extend(series.iter().map(|s| s.0.clone()));
    w.write_record(&header)?;
    for (i, idx) in index.iter().enumerate() {
        let mut row = vec![idx.clone()];
        row.extend(series.iter().map(|s| s.1[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
