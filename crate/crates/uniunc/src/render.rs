//! PNG heatmaps of two-dimensional grid CSVs.
//!
//! Variance channels (`var_*`) are drawn as standard deviations. One pixel
//! per grid point, first axis left to right and second axis bottom to top.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{CliError, Result};
use crate::grid::GridTable;
use crate::io::create_dir;

const VIRIDIS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Maps `t ∈ [0, 1]` onto a viridis-like ramp.
pub fn colormap(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let s = t * (VIRIDIS.len() - 1) as f64;
    let i = (s.floor() as usize).min(VIRIDIS.len() - 2);
    let f = s - i as f64;
    let c = |k: usize| (VIRIDIS[i][k] + f * (VIRIDIS[i + 1][k] - VIRIDIS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Channel values as drawn: standard deviation for variance channels.
pub fn channel_values(table: &GridTable, channel: &str) -> Option<Vec<f64>> {
    let v = table.column(channel)?;
    Some(if channel.starts_with("var_") {
        v.into_iter().map(|x| x.max(0.0).sqrt()).collect()
    } else {
        v
    })
}

pub fn value_range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
}

/// Writes a heatmap of `channel`. `range` fixes the colour normalization
/// (defaults to the channel's own range); `overlay` marks labelled points,
/// class 0 in white and every other class in black.
pub fn render_heatmap(
    table: &GridTable,
    channel: &str,
    range: Option<(f64, f64)>,
    overlay: &[([f64; 2], usize)],
    path: &Path,
) -> Result<()> {
    let missing = |what: &str| CliError::format(path, format!("grid has no `{what}` column"));
    let values = channel_values(table, channel).ok_or_else(|| missing(channel))?;
    let xs = table.axis("x1").ok_or_else(|| missing("x1"))?;
    let ys = table.axis("x2").ok_or_else(|| missing("x2"))?;
    let (w, h) = (xs.len(), ys.len());
    if w * h != values.len() {
        return Err(CliError::format(path, "grid is not a full rectangle"));
    }
    let (lo, hi) = range.unwrap_or_else(|| value_range(&values));
    let span = hi - lo;
    let mut img = RgbImage::new(w as u32, h as u32);
    for (k, v) in values.iter().enumerate() {
        let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
        let (i, j) = (k % w, k / w);
        img.put_pixel(i as u32, (h - 1 - j) as u32, colormap(t));
    }
    let (x0, x1) = value_range(&xs);
    let (y0, y1) = value_range(&ys);
    for (p, class) in overlay {
        let fx = (p[0] - x0) / (x1 - x0) * (w - 1) as f64;
        let fy = (p[1] - y0) / (y1 - y0) * (h - 1) as f64;
        if !(0.0..=(w - 1) as f64).contains(&fx.round()) || !(0.0..=(h - 1) as f64).contains(&fy.round()) {
            continue;
        }
        let colour = if *class == 0 { Rgb([255, 255, 255]) } else { Rgb([0, 0, 0]) };
        img.put_pixel(fx.round() as u32, (h - 1) as u32 - fy.round() as u32, colour);
    }
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => CliError::io(path, io),
        other => CliError::format(path, other),
    })
}
