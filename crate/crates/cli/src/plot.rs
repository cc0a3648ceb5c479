//! Minimal line-plot renderer (PNG): axes, ticks, numeric labels from an
//! embedded 3x5 digit font, one polyline per series, legend swatches.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 420;
const MARGIN_L: u32 = 56;
const MARGIN_R: u32 = 16;
const MARGIN_T: u32 = 18;
const MARGIN_B: u32 = 40;

const SERIES_COLORS: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// One named series of (x, y) points.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Renders series into a PNG with y fixed to `[0, 1]` (success rates).
pub fn line_plot(series: &[Series], x_label: &str, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));

    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    let (x_min, x_max) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };

    let plot_w = (WIDTH - MARGIN_L - MARGIN_R) as f64;
    let plot_h = (HEIGHT - MARGIN_T - MARGIN_B) as f64;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = MARGIN_L as f64 + (x - x_min) / x_span * plot_w;
        let py = MARGIN_T as f64 + (1.0 - y.clamp(0.0, 1.0)) * plot_h;
        (px.round() as i64, py.round() as i64)
    };

    // Frame and y gridlines at 0, 0.25, 0.5, 0.75, 1.
    let axis = Rgb([40, 40, 40]);
    let grid = Rgb([225, 225, 225]);
    for k in 0..=4 {
        let y = k as f64 * 0.25;
        let (x0, py) = to_px(x_min, y);
        let (x1, _) = to_px(x_max, y);
        draw_line(&mut img, x0, py, x1, py, if k == 0 { axis } else { grid });
        draw_number(&mut img, 8, py - 3, y * 100.0, axis);
    }
    let (fx0, fy0) = to_px(x_min, 0.0);
    let (_, fy1) = to_px(x_min, 1.0);
    draw_line(&mut img, fx0, fy0, fx0, fy1, axis);

    // X ticks at each distinct x value.
    let mut tick_xs = xs.clone();
    tick_xs.sort_by(f64::total_cmp);
    tick_xs.dedup();
    for &x in &tick_xs {
        let (px, py) = to_px(x, 0.0);
        draw_line(&mut img, px, py, px, py + 4, axis);
        draw_number(&mut img, px - 8, py + 8, x, axis);
    }
    draw_text(
        &mut img,
        (WIDTH / 2 - 3 * x_label.len() as u32) as i64,
        (HEIGHT - 10) as i64,
        x_label,
        axis,
    );

    for (si, s) in series.iter().enumerate() {
        let color = Rgb(SERIES_COLORS[si % SERIES_COLORS.len()]);
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in &s.points {
            let p = to_px(x, y);
            if let Some(q) = prev {
                draw_line(&mut img, q.0, q.1, p.0, p.1, color);
            }
            draw_marker(&mut img, p.0, p.1, color);
            prev = Some(p);
        }
        // Legend swatch + label, stacked top-left inside the frame.
        let ly = MARGIN_T as i64 + 6 + 10 * si as i64;
        let lx = MARGIN_L as i64 + 8;
        draw_line(&mut img, lx, ly, lx + 12, ly, color);
        draw_text(&mut img, lx + 18, ly - 3, &s.label, axis);
    }

    img.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_marker(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(img, x + dx, y + dy, color);
        }
    }
}

/// 3x5 bitmap glyphs for digits, dot, minus, percent, and letters used in
/// axis labels; unknown characters render as a 3x5 box.
fn glyph(ch: char) -> [u8; 5] {
    match ch.to_ascii_lowercase() {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '_' => [0b000, 0b000, 0b000, 0b000, 0b111],
        '%' => [0b101, 0b001, 0b010, 0b100, 0b101],
        ' ' => [0; 5],
        'a' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'b' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'c' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'd' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'e' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'f' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'g' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'h' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'i' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'k' => [0b101, 0b110, 0b100, 0b110, 0b101],
        'l' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'm' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'n' => [0b101, 0b111, 0b111, 0b111, 0b101],
        'o' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'p' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'r' => [0b110, 0b101, 0b110, 0b110, 0b101],
        's' => [0b011, 0b100, 0b010, 0b001, 0b110],
        't' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'u' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'v' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'w' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'x' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        _ => [0b111, 0b101, 0b101, 0b101, 0b111],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..3 {
                if bits & (0b100 >> rx) != 0 {
                    put(img, cx + rx as i64, y + ry as i64, color);
                }
            }
        }
        cx += 4;
    }
}

/// Draws a number with one decimal when fractional, as an integer otherwise.
fn draw_number(img: &mut RgbImage, x: i64, y: i64, value: f64, color: Rgb<u8>) {
    let text = if (value.fract()).abs() < 1e-9 {
        format!("{}", value.round() as i64)
    } else {
        format!("{value:.2}")
    };
    draw_text(img, x, y, &text, color);
}
