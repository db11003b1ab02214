// SPDX-License-Identifier: MIT OR Apache-2.0

//! Comparison attribution methods over the same traces as [`crate::relevancy`].
//!
//! Every method returns a [`RelevancyState`] laid out like a propagated one,
//! so extraction and evaluation treat all methods alike.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ForwardTrace, RecordKind};
use crate::numeric::Tensor;
use crate::relevancy::{
    counts_of, head_average, init_state, propagate, record_domains, AblationVariant, Domain, RelevancyState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    /// Gradient-weighted propagation through every attention module.
    Ours,
    RawAttention,
    Rollout,
    GradCam,
    /// Self-attention propagation without the cross rules.
    TransAttrNoLrp,
}

impl MethodId {
    pub const ALL: [MethodId; 5] = [
        MethodId::Ours,
        MethodId::RawAttention,
        MethodId::Rollout,
        MethodId::GradCam,
        MethodId::TransAttrNoLrp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Ours => "ours",
            MethodId::RawAttention => "raw_attention",
            MethodId::Rollout => "rollout",
            MethodId::GradCam => "grad_cam",
            MethodId::TransAttrNoLrp => "trans_attr_no_lrp",
        }
    }

    pub fn needs_gradients(self) -> bool {
        !matches!(self, MethodId::RawAttention | MethodId::Rollout)
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method `{s}`")))
    }
}

/// Runs `method` on a trace; `variant` only affects [`MethodId::Ours`].
pub fn explain(method: MethodId, trace: &ForwardTrace, variant: AblationVariant) -> Result<RelevancyState> {
    match method {
        MethodId::Ours => propagate(trace, variant),
        MethodId::RawAttention => raw_attention_state(trace),
        MethodId::Rollout => rollout(trace),
        MethodId::GradCam => gradcam_state(trace),
        MethodId::TransAttrNoLrp => trans_attr(trace),
    }
}

fn last_record(trace: &ForwardTrace, kind: RecordKind) -> Result<&crate::models::AttentionRecord> {
    trace
        .last_of(kind)
        .ok_or_else(|| Error::Trace(format!("trace has no {kind:?} record")))
}

/// Uniform mean over the heads axis of `[h × s × q]`.
fn head_mean(attention: &Tensor) -> Tensor {
    let (h, s, q) = attention.dims3();
    let mut out = vec![0.0; s * q];
    for head in attention.data().chunks(s * q) {
        for (o, x) in out.iter_mut().zip(head) {
            *o += x;
        }
    }
    Tensor::from_vec(vec![s, q], out.into_iter().map(|x| x / h as f64).collect()).expect("sized")
}

/// Head-mean attention of the last record of `kind`.
pub fn raw_attention(trace: &ForwardTrace, kind: RecordKind) -> Result<Tensor> {
    Ok(head_mean(&last_record(trace, kind)?.attention))
}

/// Grad-CAM over heads of the last record of `kind`: each head weighted by
/// the mean of its gradient, summed, then clamped at zero.
pub fn gradcam_attention(trace: &ForwardTrace, kind: RecordKind) -> Result<Tensor> {
    let rec = last_record(trace, kind)?;
    let grad = rec.grad()?;
    let (h, s, q) = rec.attention.dims3();
    let mut out = vec![0.0; s * q];
    for head in 0..h {
        let range = head * s * q..(head + 1) * s * q;
        let g = &grad.data()[range.clone()];
        let weight = g.iter().sum::<f64>() / (s * q) as f64;
        for (o, a) in out.iter_mut().zip(&rec.attention.data()[range]) {
            *o += weight * a;
        }
    }
    Tensor::from_vec(vec![s, q], out.into_iter().map(|x| x.max(0.0)).collect())
}

/// Record kind whose attention fills map `(s, q)`.
fn kind_for(trace: &ForwardTrace, s: Domain, q: Domain) -> Option<RecordKind> {
    trace
        .records
        .iter()
        .map(|r| r.kind)
        .find(|&k| record_domains(k) == (s, q))
}

/// Fills each map from the last record with matching domains; maps with no
/// such record keep their initial value.
fn per_map_state(
    trace: &ForwardTrace,
    f: impl Fn(&ForwardTrace, RecordKind) -> Result<Tensor>,
) -> Result<RelevancyState> {
    let init = init_state(trace.architecture, counts_of(trace)?)?;
    let mut maps = BTreeMap::new();
    for (s, q) in init.map_keys() {
        let m = match kind_for(trace, s, q) {
            Some(kind) => f(trace, kind)?,
            None => init.get(s, q).expect("key from init").clone(),
        };
        maps.insert((s, q), m);
    }
    Ok(init.with_maps(maps))
}

/// Raw attention for every map of the architecture.
pub fn raw_attention_state(trace: &ForwardTrace) -> Result<RelevancyState> {
    per_map_state(trace, raw_attention)
}

/// Grad-CAM for every map of the architecture.
pub fn gradcam_state(trace: &ForwardTrace) -> Result<RelevancyState> {
    per_map_state(trace, gradcam_attention)
}

fn row_normalize(mut m: Tensor) -> Tensor {
    let cols = m.cols();
    for row in m.data_mut().chunks_mut(cols) {
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|x| *x /= sum);
        }
    }
    m
}

/// Attention rollout: self maps multiply the row-normalized `Ā + I` of each
/// self layer (newest on the left); each cross map is `(R^ss)ᵀ·Ā·R^qq` with
/// `Ā` the head-mean of the last cross layer. Gradients are never read.
pub fn rollout(trace: &ForwardTrace) -> Result<RelevancyState> {
    let init = init_state(trace.architecture, counts_of(trace)?)?;
    let mut selfs: BTreeMap<Domain, Tensor> = BTreeMap::new();
    for (s, q) in init.map_keys().filter(|(s, q)| s == q) {
        selfs.insert(s, init.get(s, q).expect("key from init").clone());
    }
    for rec in trace.records.iter().filter(|r| !r.kind.is_cross()) {
        let (s, _) = record_domains(rec.kind);
        let r = selfs
            .get_mut(&s)
            .ok_or_else(|| Error::Trace(format!("{:?} record in a {} trace", rec.kind, trace.architecture)))?;
        let n = r.rows();
        let step = row_normalize(head_mean(&rec.attention).add(&Tensor::eye(n))?);
        *r = step.matmul(r)?;
    }
    let mut maps = BTreeMap::new();
    for (s, q) in init.map_keys() {
        let m = if s == q {
            selfs[&s].clone()
        } else {
            match kind_for(trace, s, q) {
                Some(kind) => selfs[&s]
                    .transpose()
                    .matmul(&raw_attention(trace, kind)?)?
                    .matmul(&selfs[&q])?,
                None => init.get(s, q).expect("key from init").clone(),
            }
        };
        maps.insert((s, q), m);
    }
    Ok(init.with_maps(maps))
}

/// Gradient-weighted self-attention recursion `R^ss += Ā·R^ss`; every cross
/// map is the gradient-weighted head average of its last layer.
pub fn trans_attr(trace: &ForwardTrace) -> Result<RelevancyState> {
    let init = init_state(trace.architecture, counts_of(trace)?)?;
    let mut maps: BTreeMap<(Domain, Domain), Tensor> =
        init.map_keys().map(|k| (k, init.get(k.0, k.1).expect("key from init").clone())).collect();
    for rec in &trace.records {
        let (s, q) = record_domains(rec.kind);
        let abar = head_average(&rec.attention, rec.grad.as_ref())?;
        let slot = maps
            .get_mut(&(s, q))
            .ok_or_else(|| Error::Trace(format!("{:?} record in a {} trace", rec.kind, trace.architecture)))?;
        if rec.kind.is_cross() {
            if slot.shape() != abar.shape() {
                return Err(Error::shape("trans_attr", slot.shape(), abar.shape()));
            }
            *slot = abar;
        } else {
            let update = abar.matmul(slot)?;
            *slot = slot.add(&update)?;
        }
    }
    Ok(init.with_maps(maps))
}
