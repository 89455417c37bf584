//! Minimal deterministic PNG line plots for ablation curves.
//!
//! Renders mean curves with optional vertical error bars on a fixed canvas.
//! No text is drawn; the CSV the plot was built from is the labeled,
//! machine-readable artifact. Output bytes depend only on the input data.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [127, 127, 127],
];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub color: [u8; 3],
    pub points: Vec<(f64, f64)>,
    /// Optional symmetric error (one std) per point.
    pub err: Option<Vec<f64>>,
    /// Draw as a horizontal dashed baseline at the mean of the y values.
    pub baseline: bool,
}

const MARGIN: u32 = 48;

struct Canvas {
    img: RgbImage,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Canvas {
    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let w = (self.img.width() - 2 * MARGIN) as f64;
        let h = (self.img.height() - 2 * MARGIN) as f64;
        let fx = if self.x1 > self.x0 {
            (x - self.x0) / (self.x1 - self.x0)
        } else {
            0.5
        };
        let fy = if self.y1 > self.y0 {
            (y - self.y0) / (self.y1 - self.y0)
        } else {
            0.5
        };
        (
            (MARGIN as f64 + fx * w).round() as i64,
            (MARGIN as f64 + (1.0 - fy) * h).round() as i64,
        )
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    fn line(&mut self, a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
        // Bresenham.
        let (mut x0, mut y0) = a;
        let (x1, y1) = b;
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, color);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }
}

/// Renders `series` to a PNG. Errors on empty input.
pub fn line_plot(series: &[Series], width: u32, height: u32, path: impl AsRef<Path>) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::EmptyInput("nothing to plot".into()));
    }
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for (i, &(x, y)) in s.points.iter().enumerate() {
            xs.push(x);
            let e = s.err.as_ref().map_or(0.0, |e| e[i]);
            ys.push(y - e);
            ys.push(y + e);
        }
    }
    let fmin = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let fmax = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1) = (fmin(&xs), fmax(&xs));
    let (mut y0, mut y1) = (fmin(&ys), fmax(&ys));
    let pad = 0.05 * (y1 - y0).max(1e-9);
    y0 -= pad;
    y1 += pad;

    let mut canvas = Canvas {
        img: RgbImage::from_pixel(width, height, Rgb([255, 255, 255])),
        x0,
        x1,
        y0,
        y1,
    };

    // Axes.
    let black = [0u8, 0, 0];
    let bl = (MARGIN as i64, (height - MARGIN) as i64);
    canvas.line((MARGIN as i64, MARGIN as i64), bl, black);
    canvas.line(bl, ((width - MARGIN) as i64, (height - MARGIN) as i64), black);
    // Tick marks at quartiles of each axis.
    for k in 0..=4 {
        let fx = MARGIN as i64 + ((width - 2 * MARGIN) as i64 * k) / 4;
        canvas.line((fx, (height - MARGIN) as i64), (fx, (height - MARGIN + 4) as i64), black);
        let fy = MARGIN as i64 + ((height - 2 * MARGIN) as i64 * k) / 4;
        canvas.line((MARGIN as i64, fy), ((MARGIN - 4) as i64, fy), black);
    }

    for s in series {
        if s.points.is_empty() {
            continue;
        }
        if s.baseline {
            let mean = s.points.iter().map(|p| p.1).sum::<f64>() / s.points.len() as f64;
            let (px0, py) = canvas.to_px(x0, mean);
            let (px1, _) = canvas.to_px(x1, mean);
            let mut x = px0;
            while x < px1 {
                canvas.line((x, py), ((x + 4).min(px1), py), s.color);
                x += 8;
            }
            continue;
        }
        let mut prev: Option<(i64, i64)> = None;
        for (i, &(x, y)) in s.points.iter().enumerate() {
            let p = canvas.to_px(x, y);
            if let Some(q) = prev {
                canvas.line(q, p, s.color);
            }
            prev = Some(p);
            if let Some(errs) = &s.err {
                let (ex, ey0) = canvas.to_px(x, y - errs[i]);
                let (_, ey1) = canvas.to_px(x, y + errs[i]);
                canvas.line((ex, ey0), (ex, ey1), s.color);
                canvas.line((ex - 2, ey0), (ex + 2, ey0), s.color);
                canvas.line((ex - 2, ey1), (ex + 2, ey1), s.color);
            }
        }
    }

    canvas.img.save(path.as_ref())?;
    Ok(())
}
