// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary greyscale (P5) images.

use std::path::Path;

use crate::error::{Error, Result};

/// P5 encoding of `pixels`, row-major `rows × cols`, maxval 255.
pub fn pgm_bytes(rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if rows * cols != pixels.len() || rows == 0 || cols == 0 {
        return Err(Error::InvalidInput(format!(
            "{} pixels do not form a {rows}x{cols} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let bytes = pgm_bytes(rows, cols, pixels)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Min-max scales to 0..=255; a constant map is all black.
pub fn heatmap_pixels(values: &[f64]) -> Vec<u8> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - min) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn mask_pixels(mask: &[bool]) -> Vec<u8> {
    mask.iter().map(|&m| if m { 255 } else { 0 }).collect()
}
