// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::Architecture;
use crate::error::{Error, Result};
use crate::numeric::{GradTape, Tensor, Var};

/// Which attention module produced a record.
///
/// Cross kinds are named `<query side>From<key side>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    SelfText,
    SelfImage,
    SelfJoint,
    CrossTextFromImage,
    CrossImageFromText,
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

impl RecordKind {
    pub fn is_cross(self) -> bool {
        matches!(
            self,
            RecordKind::CrossTextFromImage | RecordKind::CrossImageFromText | RecordKind::DecoderCross
        )
    }

    pub fn belongs_to(self, arch: Architecture) -> bool {
        use RecordKind::*;
        match arch {
            Architecture::PureSelf => self == SelfJoint,
            Architecture::SelfPlusCo => {
                matches!(self, SelfText | SelfImage | CrossTextFromImage | CrossImageFromText)
            }
            Architecture::EncoderDecoder => matches!(self, EncoderSelf | DecoderSelf | DecoderCross),
        }
    }
}

/// Attention map of one module, `[heads × queries × keys]`, with its gradient
/// once [`Model::backward_fill`](super::Model::backward_fill) ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub kind: RecordKind,
    pub layer_index: usize,
    pub attention: Tensor,
    pub grad: Option<Tensor>,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.attention.dims3().0
    }

    /// `(rows, cols)` of each head's map.
    pub fn map_dims(&self) -> (usize, usize) {
        let (_, s, q) = self.attention.dims3();
        (s, q)
    }

    pub fn grad(&self) -> Result<&Tensor> {
        self.grad.as_ref().ok_or_else(|| {
            Error::PropagationOrder(format!(
                "{:?} record of layer {} has no gradient; run backward_fill first",
                self.kind, self.layer_index
            ))
        })
    }
}

/// Output whose gradient drives head averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Logit of a class, for classifiers.
    Class(usize),
    /// Logit of `class` on decoder query `query`.
    Query { query: usize, class: usize },
}

impl Target {
    pub(crate) fn logit_index(self) -> (usize, usize) {
        match self {
            Target::Class(c) => (0, c),
            Target::Query { query, class } => (query, class),
        }
    }
}

#[derive(Debug)]
pub(crate) struct Recorded {
    pub tape: GradTape,
    pub logits: Var,
    pub heads: Vec<Vec<Var>>,
}

/// Everything one forward pass exposes to the attribution methods.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub architecture: Architecture,
    /// In execution order.
    pub records: Vec<AttentionRecord>,
    /// `[1 × classes]` for classifiers, `[queries × classes]` for detection.
    pub logits: Tensor,
    /// Normalized `[x0, y0, x1, y1]` per decoder query.
    pub boxes: Option<Tensor>,
    /// Leading text tokens of a classifier's input; splits joint maps.
    #[serde(default)]
    pub text_tokens: Option<usize>,
    pub target: Option<Target>,
    #[serde(skip)]
    pub(crate) recorded: Option<Arc<Recorded>>,
}

impl ForwardTrace {
    /// Class with the largest logit in a classifier trace.
    pub fn predicted_class(&self) -> usize {
        argmax(self.logits.row(0))
    }

    pub fn records_of(&self, kind: RecordKind) -> impl Iterator<Item = &AttentionRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn last_of(&self, kind: RecordKind) -> Option<&AttentionRecord> {
        self.records.iter().rev().find(|r| r.kind == kind)
    }

    /// Drops gradients and the tape, keeping only forward values.
    pub fn without_gradients(&self) -> ForwardTrace {
        let mut t = self.clone();
        t.recorded = None;
        t.target = None;
        for r in &mut t.records {
            r.grad = None;
        }
        t
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = k;
        }
    }
    best
}
