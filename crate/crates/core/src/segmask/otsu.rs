// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};

pub const OTSU_BINS: usize = 256;

/// Binarization of one heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct OtsuMask {
    pub mask: Vec<bool>,
    /// `None` for a degenerate (constant) heatmap.
    pub threshold: Option<f64>,
    pub degenerate: bool,
}

fn bin_of(v: f64, min: f64, span: f64) -> usize {
    (((v - min) / span * OTSU_BINS as f64).floor() as usize).min(OTSU_BINS - 1)
}

fn check(heatmap: &[f64]) -> Result<(f64, f64)> {
    if heatmap.is_empty() {
        return Err(Error::InvalidInput("otsu needs a non-empty heatmap".into()));
    }
    if heatmap.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("otsu heatmap contains non-finite values".into()));
    }
    let min = heatmap.iter().copied().fold(f64::INFINITY, f64::min);
    let max = heatmap.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((min, max))
}

/// Threshold maximizing the between-class variance over a 256-bin histogram
/// of `[min, max]`; the foreground is `v > threshold`.
///
/// Class means use the exact values falling in each bin. The returned
/// threshold is the midpoint between the largest background value and the
/// smallest foreground value. Ties keep the lowest split.
pub fn otsu(heatmap: &[f64]) -> Result<f64> {
    let (min, max) = check(heatmap)?;
    let span = max - min;
    if span <= 0.0 {
        return Err(Error::Degenerate("otsu on a constant heatmap".into()));
    }
    let mut count = [0usize; OTSU_BINS];
    let mut sum = [0.0f64; OTSU_BINS];
    let mut lo = [f64::INFINITY; OTSU_BINS];
    let mut hi = [f64::NEG_INFINITY; OTSU_BINS];
    for &v in heatmap {
        let b = bin_of(v, min, span);
        count[b] += 1;
        sum[b] += v;
        lo[b] = lo[b].min(v);
        hi[b] = hi[b].max(v);
    }
    let n = heatmap.len() as f64;
    let total: f64 = sum.iter().sum();
    let (mut n0, mut s0) = (0usize, 0.0);
    let mut best: Option<(f64, usize)> = None;
    for k in 0..OTSU_BINS - 1 {
        n0 += count[k];
        s0 += sum[k];
        let n1 = heatmap.len() - n0;
        if n0 == 0 || n1 == 0 || count[k] == 0 {
            continue;
        }
        let (w0, w1) = (n0 as f64 / n, n1 as f64 / n);
        let mu0 = s0 / n0 as f64;
        let mu1 = (total - s0) / n1 as f64;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(b, _)| var > b) {
            best = Some((var, k));
        }
    }
    // span > 0 puts min in bin 0 and max in bin 255, so some split exists
    let (_, k) = best.expect("non-constant heatmap has a split");
    let below = hi[..=k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let above = lo[k + 1..].iter().copied().fold(f64::INFINITY, f64::min);
    Ok(below + (above - below) / 2.0)
}

/// Otsu foreground mask; a constant heatmap yields an all-background mask
/// flagged as degenerate instead of an error.
pub fn otsu_mask(heatmap: &[f64]) -> Result<OtsuMask> {
    match otsu(heatmap) {
        Ok(t) => Ok(OtsuMask {
            mask: heatmap.iter().map(|&v| v > t).collect(),
            threshold: Some(t),
            degenerate: false,
        }),
        Err(Error::Degenerate(_)) => Ok(OtsuMask {
            mask: vec![false; heatmap.len()],
            threshold: None,
            degenerate: true,
        }),
        Err(e) => Err(e),
    }
}
