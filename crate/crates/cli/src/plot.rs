//! Minimal line charts rendered straight to PNG.
//!
//! No text: a light frame, horizontal grid lines at quarter heights and one
//! polyline (with dot markers) per series.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{ensure, Context, Result};

pub const WIDTH: usize = 480;
pub const HEIGHT: usize = 320;
const MARGIN: usize = 24;

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [90, 90, 90],
];

pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

pub struct Canvas {
    pixels: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            pixels: vec![255; WIDTH * HEIGHT * 3],
        }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x >= WIDTH as i64 || y >= HEIGHT as i64 {
            return;
        }
        let i = (y as usize * WIDTH + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
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

    fn dot(&mut self, (x, y): (i64, i64), c: [u8; 3]) {
        for dy in -2..=2 {
            for dx in -2..=2 {
                self.put(x + dx, y + dy, c);
            }
        }
    }

    pub fn rgb(&self) -> &[u8] {
        &self.pixels
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if hi - lo > 1e-12 {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Draws all series on shared axes scaled to their joint range.
pub fn render(series: &[Series]) -> Result<Canvas> {
    let finite = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    ensure!(finite.clone().next().is_some(), "nothing to plot");
    let (x_lo, x_hi) = bounds(finite.clone().map(|p| p.0));
    let (y_lo, y_hi) = bounds(finite.map(|p| p.1));

    let (w, h) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    let to_px = |(x, y): (f64, f64)| {
        (
            (MARGIN as f64 + (x - x_lo) / (x_hi - x_lo) * w).round() as i64,
            (MARGIN as f64 + (y_hi - y) / (y_hi - y_lo) * h).round() as i64,
        )
    };

    let mut canvas = Canvas::new();
    let (l, r) = (MARGIN as i64, (WIDTH - MARGIN) as i64);
    let (t, b) = (MARGIN as i64, (HEIGHT - MARGIN) as i64);
    for q in 1..4 {
        let y = t + (b - t) * q / 4;
        canvas.line((l, y), (r, y), [225, 225, 225]);
    }
    let frame = [120, 120, 120];
    canvas.line((l, t), (l, b), frame);
    canvas.line((l, b), (r, b), frame);

    for s in series {
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&p| to_px(p))
            .collect();
        for pair in pts.windows(2) {
            canvas.line(pair[0], pair[1], s.color);
        }
        if pts.len() <= 32 {
            for &p in &pts {
                canvas.dot(p, s.color);
            }
        }
    }
    Ok(canvas)
}

pub fn save(path: &Path, series: &[Series]) -> Result<()> {
    let canvas = render(series)?;
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), WIDTH as u32, HEIGHT as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(canvas.rgb())?;
    Ok(())
}
