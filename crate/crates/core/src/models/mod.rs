// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference micro-transformers, their traces, synthetic tasks and training.

mod checkpoint;
mod config;
mod tasks;
mod trace;
mod train;
mod transformer;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{Architecture, ModelConfig};
pub use tasks::{
    gen_detection_task, gen_vqa_task, permute_distractors, read_jsonl, vqa_label_from_tokens, write_jsonl,
    DetectionSample, DetectionTask, GroundTruthObject, SyntheticSample, VqaSample, VqaTask, IMAGE_MASK, TEXT_CLS,
    TEXT_MASK, TEXT_SEP, VQA_CLASSES,
};
pub use trace::{AttentionRecord, ForwardTrace, RecordKind, Target};
pub use train::{accuracy, detection_targets, train, TrainConfig, TrainReport};
pub use transformer::{build_model, AttentionOverride, Model};

pub(crate) use trace::argmax;
