// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};

/// Row-major grid size as `(rows, cols)`.
pub type Size = (usize, usize);

fn check(len: usize, from: Size, to: Size) -> Result<()> {
    if from.0 * from.1 != len || from.0 == 0 || from.1 == 0 || to.0 == 0 || to.1 == 0 {
        return Err(Error::InvalidInput(format!(
            "cannot resample {len} values as {from:?} to {to:?}"
        )));
    }
    Ok(())
}

/// Corner-aligned source coordinate: output ends map onto input ends.
fn corner_aligned(dst: usize, input: usize, output: usize) -> f64 {
    if output == 1 {
        0.0
    } else {
        dst as f64 * (input - 1) as f64 / (output - 1) as f64
    }
}

/// Bilinear interpolation with corner-aligned sampling.
pub fn bilinear(src: &[f64], from: Size, to: Size) -> Result<Vec<f64>> {
    check(src.len(), from, to)?;
    let (h, w) = from;
    let axis = |dst, input, output| {
        let x = corner_aligned(dst, input, output);
        let i0 = (x.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(to.0 * to.1);
    for r in 0..to.0 {
        let (r0, r1, fr) = axis(r, h, to.0);
        for c in 0..to.1 {
            let (c0, c1, fc) = axis(c, w, to.1);
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bottom = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    Ok(out)
}

/// Nearest-neighbour resampling with `src = floor(dst · in / out)`.
pub fn nearest<T: Copy>(src: &[T], from: Size, to: Size) -> Result<Vec<T>> {
    check(src.len(), from, to)?;
    let (h, w) = from;
    let mut out = Vec::with_capacity(to.0 * to.1);
    for r in 0..to.0 {
        let sr = r * h / to.0;
        for c in 0..to.1 {
            out.push(src[sr * w + c * w / to.1]);
        }
    }
    Ok(out)
}
