//! PNG rendering for attention heat maps and stacked confusion bars.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

use speakerlm::eval::ConfusionMatrix;

const CELL: u32 = 8;

/// Piecewise-linear dark-blue to yellow ramp over `t` in `[0, 1]`.
fn ramp(t: f32) -> Rgb<u8> {
    const STOPS: [[f32; 3]; 4] = [[20.0, 24.0, 82.0], [33.0, 145.0, 140.0], [122.0, 209.0, 81.0], [253.0, 231.0, 37.0]];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f32;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f32;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Square heat map of a row-major `size x size` matrix, scaled to its own
/// maximum.
pub fn heatmap(values: &[f32], size: usize, path: &Path) -> Result<()> {
    let max = values.iter().cloned().fold(f32::MIN_POSITIVE, f32::max);
    let side = size as u32 * CELL;
    let img = RgbImage::from_fn(side, side, |x, y| {
        let (r, c) = ((y / CELL) as usize, (x / CELL) as usize);
        ramp(values[r * size + c] / max)
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [188, 189, 34],
    [23, 190, 207],
    [127, 127, 127],
];

/// One bar per gold class, split into predicted-class segments in
/// proportion to the row counts. The last column (unparseable) is grey.
pub fn stacked_bars(matrix: &ConfusionMatrix, path: &Path) -> Result<()> {
    let (bar_w, gap, height) = (40u32, 16u32, 200u32);
    let rows = matrix.labels.len() as u32;
    let width = gap + rows * (bar_w + gap);
    let mut img = RgbImage::from_pixel(width, height + 2 * gap, Rgb([255, 255, 255]));
    let cols = matrix.columns.len();
    for (r, counts) in matrix.counts.iter().enumerate() {
        let total: usize = counts.iter().sum();
        if total == 0 {
            continue;
        }
        let x0 = gap + r as u32 * (bar_w + gap);
        let mut y = height + gap;
        for (c, &n) in counts.iter().enumerate() {
            let h = (n as f64 / total as f64 * height as f64).round() as u32;
            let colour = if c + 1 == cols {
                Rgb([200, 200, 200])
            } else {
                Rgb(PALETTE[c % PALETTE.len()])
            };
            for yy in y.saturating_sub(h).max(gap)..y {
                for xx in x0..x0 + bar_w {
                    img.put_pixel(xx, yy, colour);
                }
            }
            y = y.saturating_sub(h);
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
