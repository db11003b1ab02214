// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::SegMaskSet;
use crate::error::{Error, Result};
use crate::models::DetectionSample;

/// `|a ∩ b| / |a ∪ b|`, zero when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("iou", &[a.len()], &[b.len()]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Ground-truth object mask at the original image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtMask {
    pub class: usize,
    pub mask: Vec<bool>,
    pub area_cells: usize,
}

pub fn ground_truth(sample: &DetectionSample) -> Vec<GtMask> {
    sample
        .objects
        .iter()
        .map(|o| GtMask {
            class: o.class,
            mask: sample.object_mask(o),
            area_cells: o.area_cells(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSettings {
    /// Minimum IoU for a prediction to match an object.
    pub iou_threshold: f64,
    /// Medium objects cover `[medium_min, large_min)` grid cells.
    pub medium_min: f64,
    pub large_min: f64,
}

impl Default for ApSettings {
    fn default() -> Self {
        ApSettings {
            iou_threshold: 0.2,
            medium_min: 8.0,
            large_min: 32.0,
        }
    }
}

/// Class-averaged precision and recall; `None` when no object falls in the
/// bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub ap: Option<f64>,
    pub ar: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApArReport {
    pub all: BucketMetrics,
    pub medium: BucketMetrics,
    pub large: BucketMetrics,
}

struct Det {
    image: usize,
    index: usize,
    probability: f64,
    area: f64,
}

/// `(ap, ar)` of one class in one area range, or `None` without objects.
fn class_metrics(
    preds: &[SegMaskSet],
    gts: &[Vec<GtMask>],
    class: usize,
    range: (f64, f64),
    threshold: f64,
) -> Result<Option<(f64, f64)>> {
    let in_range = |a: f64| a >= range.0 && a < range.1;
    let ignored: Vec<Vec<bool>> = gts
        .iter()
        .map(|g| g.iter().map(|o| o.class != class || !in_range(o.area_cells as f64)).collect())
        .collect();
    let positives = gts
        .iter()
        .zip(&ignored)
        .flat_map(|(g, ig)| g.iter().zip(ig))
        .filter(|(o, &ig)| o.class == class && !ig)
        .count();
    if positives == 0 {
        return Ok(None);
    }
    let mut dets: Vec<Det> = preds
        .iter()
        .enumerate()
        .flat_map(|(image, set)| {
            let cell = set.geometry.cell_area();
            set.masks
                .iter()
                .enumerate()
                .filter(|(_, m)| m.class == class)
                .map(move |(index, m)| Det {
                    image,
                    index,
                    probability: m.probability,
                    area: m.area() as f64 / cell,
                })
        })
        .collect();
    // descending probability; image then query order breaks ties
    dets.sort_by(|a, b| b.probability.total_cmp(&a.probability).then(a.image.cmp(&b.image)).then(a.index.cmp(&b.index)));

    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points: Vec<(f64, f64)> = Vec::new();
    for d in &dets {
        let mask = &preds[d.image].masks[d.index].mask;
        // best unmatched object; in-range objects win over ignored ones
        let mut best: Option<(bool, f64, usize)> = None;
        for (g, obj) in gts[d.image].iter().enumerate() {
            if obj.class != class || taken[d.image][g] {
                continue;
            }
            let v = iou(mask, &obj.mask)?;
            if v < threshold {
                continue;
            }
            let key = (!ignored[d.image][g], v, g);
            if best.is_none_or(|b| (key.0, key.1) > (b.0, b.1)) {
                best = Some(key);
            }
        }
        match best {
            Some((counted, _, g)) => {
                taken[d.image][g] = true;
                if !counted {
                    continue;
                }
                tp += 1;
            }
            None if !in_range(d.area) => continue,
            None => fp += 1,
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }
    // all-point interpolated precision
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..points.len() {
        let (recall, _) = points[k];
        if recall > prev_recall {
            let p = points[k..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
            ap += (recall - prev_recall) * p;
            prev_recall = recall;
        }
    }
    Ok(Some((ap, tp as f64 / positives as f64)))
}

fn bucket(preds: &[SegMaskSet], gts: &[Vec<GtMask>], range: (f64, f64), threshold: f64) -> Result<BucketMetrics> {
    let classes: BTreeSet<usize> = gts.iter().flatten().map(|o| o.class).collect();
    let mut per_class = Vec::new();
    for c in classes {
        if let Some(m) = class_metrics(preds, gts, c, range, threshold)? {
            per_class.push(m);
        }
    }
    if per_class.is_empty() {
        return Ok(BucketMetrics { ap: None, ar: None });
    }
    let n = per_class.len() as f64;
    Ok(BucketMetrics {
        ap: Some(per_class.iter().map(|m| m.0).sum::<f64>() / n),
        ar: Some(per_class.iter().map(|m| m.1).sum::<f64>() / n),
    })
}

/// Greedy matching by descending probability, scored per class and
/// averaged, overall and per object-size bucket.
///
/// Objects outside a bucket are ignored: a prediction matching one counts
/// neither way, and an unmatched prediction outside the bucket's area range
/// is dropped.
pub fn ap_ar(preds: &[SegMaskSet], gts: &[Vec<GtMask>], settings: &ApSettings) -> Result<ApArReport> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} prediction sets for {} images",
            preds.len(),
            gts.len()
        )));
    }
    if !(settings.medium_min < settings.large_min) {
        return Err(Error::Config("medium bucket must start below the large bucket".into()));
    }
    for (set, g) in preds.iter().zip(gts) {
        let pixels = set.geometry.original.0 * set.geometry.original.1;
        if set.masks.iter().any(|m| m.mask.len() != pixels) || g.iter().any(|o| o.mask.len() != pixels) {
            return Err(Error::InvalidInput("mask sizes differ from the image size".into()));
        }
    }
    let t = settings.iou_threshold;
    Ok(ApArReport {
        all: bucket(preds, gts, (0.0, f64::INFINITY), t)?,
        medium: bucket(preds, gts, (settings.medium_min, settings.large_min), t)?,
        large: bucket(preds, gts, (settings.large_min, f64::INFINITY), t)?,
    })
}

/// Mean over ground-truth objects of the best IoU with a same-class
/// prediction of the same image (zero if there is none).
pub fn mean_object_iou(preds: &[SegMaskSet], gts: &[Vec<GtMask>]) -> Result<Option<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} prediction sets for {} images",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (set, g) in preds.iter().zip(gts) {
        for obj in g {
            let mut best = 0.0f64;
            for m in set.masks.iter().filter(|m| m.class == obj.class) {
                best = best.max(iou(&m.mask, &obj.mask)?);
            }
            total += best;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}
