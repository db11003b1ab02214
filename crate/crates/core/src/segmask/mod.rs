// SPDX-License-Identifier: MIT OR Apache-2.0

//! Segmentation masks from per-query relevancy rows, and their scoring
//! against ground-truth object masks.
//!
//! A query is kept when its most likely object class (the trailing
//! no-object class excluded) has probability above one half. Its relevancy
//! row is binarized with Otsu's threshold on the token grid, upsampled
//! bilinearly to the target mask size, kept where the sigmoid exceeds one
//! half, and finally upsampled by nearest neighbour to the image size.

mod metrics;
mod otsu;
pub mod pgm;
mod resample;

use serde::{Deserialize, Serialize};

pub use metrics::{ap_ar, ground_truth, iou, mean_object_iou, ApArReport, ApSettings, BucketMetrics, GtMask};
pub use otsu::{otsu, otsu_mask, OtsuMask, OTSU_BINS};
pub use resample::{bilinear, nearest, Size};

use crate::baselines::{explain, MethodId};
use crate::error::{Error, Result};
use crate::models::{argmax, DetectionSample, Model, SyntheticSample, Target};
use crate::numeric::Tensor;
use crate::parallel::ordered_map;
use crate::relevancy::{extract_query, AblationVariant};

/// Probability a kept query's class must exceed.
pub const KEEP_PROBABILITY: f64 = 0.5;

/// Default target mask size as a multiple of the token grid.
pub const DEFAULT_TARGET_SCALE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskGeometry {
    /// Token grid the relevancy row is reshaped to.
    pub grid: Size,
    /// Size after bilinear upsampling.
    pub target: Size,
    /// Image size masks are finally reported at.
    pub original: Size,
}

impl MaskGeometry {
    pub fn for_sample(sample: &DetectionSample, target_scale: usize) -> Self {
        let g = sample.grid;
        let o = sample.original_size();
        MaskGeometry {
            grid: (g, g),
            target: (g * target_scale, g * target_scale),
            original: (o, o),
        }
    }

    /// Original-resolution pixels covered by one grid cell.
    pub fn cell_area(&self) -> f64 {
        (self.original.0 * self.original.1) as f64 / (self.grid.0 * self.grid.1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMask {
    pub query: usize,
    pub class: usize,
    pub probability: f64,
    /// Row-major at the original image size.
    pub mask: Vec<bool>,
    /// Set when the relevancy row was constant and Otsu found no split.
    pub degenerate: bool,
}

impl QueryMask {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Masks of the kept queries of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMaskSet {
    pub method: String,
    pub geometry: MaskGeometry,
    pub masks: Vec<QueryMask>,
}

/// `(query, class, probability)` of every query whose best object class has
/// probability above [`KEEP_PROBABILITY`]. The last logit column is the
/// no-object class and never counts.
pub fn kept_queries(logits: &Tensor) -> Result<Vec<(usize, usize, f64)>> {
    if logits.rank() != 2 || logits.cols() < 2 {
        return Err(Error::InvalidInput(format!(
            "detection logits must be [queries x classes+1], got {:?}",
            logits.shape()
        )));
    }
    let probs = logits.softmax_rows()?;
    let objects = logits.cols() - 1;
    Ok((0..probs.rows())
        .filter_map(|q| {
            let row = &probs.row(q)[..objects];
            let class = argmax(row);
            (row[class] > KEEP_PROBABILITY).then_some((q, class, row[class]))
        })
        .collect())
}

/// Turns relevancy rows `[queries × grid cells]` into masks for the kept
/// queries.
pub fn build_masks(rde: &Tensor, logits: &Tensor, geometry: MaskGeometry, method: &str) -> Result<SegMaskSet> {
    if rde.rank() != 2 || rde.rows() != logits.rows() {
        return Err(Error::shape("build_masks", rde.shape(), logits.shape()));
    }
    if rde.cols() != geometry.grid.0 * geometry.grid.1 {
        return Err(Error::InvalidInput(format!(
            "relevancy rows of {} tokens do not fill a {:?} grid",
            rde.cols(),
            geometry.grid
        )));
    }
    let mut masks = Vec::new();
    for (query, class, probability) in kept_queries(logits)? {
        let binary = otsu_mask(rde.row(query))?;
        if binary.degenerate {
            log::warn!("{method}: constant relevancy for query {query}; mask left empty");
        }
        let levels: Vec<f64> = binary.mask.iter().map(|&m| f64::from(u8::from(m))).collect();
        let smooth = bilinear(&levels, geometry.grid, geometry.target)?;
        // sigmoid(x) > 0.5 exactly when x > 0
        let kept: Vec<bool> = smooth.iter().map(|&x| x > 0.0).collect();
        let mask = nearest(&kept, geometry.target, geometry.original)?;
        masks.push(QueryMask {
            query,
            class,
            probability,
            mask,
            degenerate: binary.degenerate,
        });
    }
    Ok(SegMaskSet {
        method: method.to_string(),
        geometry,
        masks,
    })
}

/// Relevancy of every encoder token to every decoder query, `[queries ×
/// tokens]`. Row `j` is explained with respect to query `j`'s most likely
/// object class.
pub fn query_relevancy(
    model: &Model,
    sample: &DetectionSample,
    method: MethodId,
    variant: AblationVariant,
) -> Result<Tensor> {
    let input = SyntheticSample::Detection(sample.clone());
    if !method.needs_gradients() {
        let state = explain(method, &model.forward(&input)?, variant)?;
        let queries = model.config().queries;
        let rows = (0..queries).map(|j| extract_query(&state, j)).collect::<Result<Vec<_>>>()?;
        return Ok(Tensor::from_rows(&rows));
    }
    let logits = model.predict(&input)?;
    let objects = logits.cols() - 1;
    let rows = (0..logits.rows())
        .map(|j| {
            let class = argmax(&logits.row(j)[..objects]);
            let trace = model.trace_for(&input, Target::Query { query: j, class })?;
            extract_query(&explain(method, &trace, variant)?, j)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_rows(&rows))
}

/// Masks for every detection sample in `data`, in order.
pub fn segment_dataset(
    model: &Model,
    data: &[SyntheticSample],
    method: MethodId,
    variant: AblationVariant,
    target_scale: usize,
    workers: usize,
) -> Result<Vec<SegMaskSet>> {
    if target_scale == 0 {
        return Err(Error::Config("target mask scale must be positive".into()));
    }
    let name = if variant == AblationVariant::Full {
        method.to_string()
    } else {
        format!("{method}/{variant}")
    };
    ordered_map(workers, data, |s| {
        let d = s
            .as_detection()
            .ok_or_else(|| Error::InvalidInput("segmentation needs detection samples".into()))?;
        let rde = query_relevancy(model, d, method, variant)?;
        let logits = model.predict(s)?;
        build_masks(&rde, &logits, MaskGeometry::for_sample(d, target_scale), &name)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(grid: usize, target: usize, original: usize) -> MaskGeometry {
        MaskGeometry {
            grid: (grid, grid),
            target: (target, target),
            original: (original, original),
        }
    }

    fn confident(queries: usize) -> Tensor {
        // class q for query q with probability well above one half
        let rows: Vec<Vec<f64>> = (0..queries)
            .map(|q| (0..queries + 1).map(|c| if c == q { 5.0 } else { 0.0 }).collect())
            .collect();
        Tensor::from_rows(&rows)
    }

    #[test]
    fn hand_traced_two_by_two() {
        let rde = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]);
        let set = build_masks(&rde, &confident(1), geometry(2, 4, 8), "m").unwrap();
        assert_eq!(set.masks.len(), 1);
        let m = &set.masks[0].mask;
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(m[r * 8 + c], r < 6 && c < 6, "({r},{c})");
            }
        }
    }

    #[test]
    fn unconfident_queries_are_dropped() {
        let logits = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 9.0]]);
        let rde = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]);
        let set = build_masks(&rde, &logits, geometry(2, 4, 8), "m").unwrap();
        assert!(set.masks.is_empty());
    }

    #[test]
    fn no_object_class_never_keeps_a_query() {
        let logits = Tensor::from_rows(&[vec![0.0, 3.0]]);
        assert!(kept_queries(&logits).unwrap().is_empty());
        let logits = Tensor::from_rows(&[vec![3.0, 0.0]]);
        assert_eq!(kept_queries(&logits).unwrap()[0].1, 0);
    }

    #[test]
    fn constant_row_gives_empty_flagged_mask() {
        let rde = Tensor::from_rows(&[vec![0.0; 4]]);
        let set = build_masks(&rde, &confident(1), geometry(2, 4, 8), "m").unwrap();
        assert!(set.masks[0].degenerate);
        assert_eq!(set.masks[0].area(), 0);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let rde = Tensor::from_rows(&[vec![0.0; 5]]);
        assert!(build_masks(&rde, &confident(1), geometry(2, 4, 8), "m").is_err());
        let rde = Tensor::from_rows(&[vec![0.0; 4], vec![0.0; 4]]);
        assert!(build_masks(&rde, &confident(1), geometry(2, 4, 8), "m").is_err());
    }

    #[test]
    fn masks_ignore_positive_rescaling() {
        let row = vec![0.1, 0.7, 0.05, 0.6, 0.0, 0.2, 0.9, 0.3, 0.4];
        let scaled: Vec<f64> = row.iter().map(|v| v * 3.0).collect();
        let g = geometry(3, 12, 12);
        let a = build_masks(&Tensor::from_rows(&[row]), &confident(1), g, "m").unwrap();
        let b = build_masks(&Tensor::from_rows(&[scaled]), &confident(1), g, "m").unwrap();
        assert_eq!(a.masks[0].mask, b.masks[0].mask);
    }
}
