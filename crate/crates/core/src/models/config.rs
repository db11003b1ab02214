// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three attention wirings a model can use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Text and image tokens concatenated into one sequence; self-attention only.
    PureSelf,
    /// Per-modality self-attention interleaved with co-attention in both directions.
    SelfPlusCo,
    /// Encoder self-attention over image tokens, decoder queries with
    /// self-attention followed by cross-attention into the encoder.
    EncoderDecoder,
}

impl Architecture {
    pub fn is_classifier(self) -> bool {
        !matches!(self, Architecture::EncoderDecoder)
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::PureSelf => "pure_self",
            Architecture::SelfPlusCo => "self_plus_co",
            Architecture::EncoderDecoder => "encoder_decoder",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape and seed of a micro-transformer.
///
/// `layers` counts joint self-attention layers (pure-self), co-attention
/// layers (self-plus-co) or decoder layers (encoder-decoder).
/// `encoder_layers` is only read by the encoder-decoder wiring, which also
/// reads `image_tokens` as the encoder token count and ignores the text fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub layers: usize,
    #[serde(default)]
    pub encoder_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    #[serde(default)]
    pub text_tokens: usize,
    pub image_tokens: usize,
    #[serde(default)]
    pub queries: usize,
    pub classes: usize,
    #[serde(default)]
    pub text_vocab: usize,
    pub image_vocab: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.heads == 0 || self.head_dim == 0 {
            return fail("heads and head_dim must be at least 1".into());
        }
        if self.layers == 0 {
            return fail("at least one layer is required".into());
        }
        if self.image_tokens == 0 || self.image_vocab == 0 {
            return fail("image token count and vocabulary must be at least 1".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        match self.architecture {
            Architecture::PureSelf | Architecture::SelfPlusCo => {
                if self.text_tokens == 0 || self.text_vocab == 0 {
                    return fail(format!(
                        "{} needs text tokens and a text vocabulary",
                        self.architecture
                    ));
                }
                if self.encoder_layers != 0 || self.queries != 0 {
                    return fail(format!(
                        "{} has no encoder layers or decoder queries",
                        self.architecture
                    ));
                }
            }
            Architecture::EncoderDecoder => {
                if self.encoder_layers == 0 {
                    return fail("encoder_decoder needs at least one encoder layer".into());
                }
                if self.queries == 0 {
                    return fail("encoder_decoder needs at least one decoder query".into());
                }
                if self.text_tokens != 0 {
                    return fail("encoder_decoder takes no text tokens".into());
                }
            }
        }
        Ok(())
    }

    /// Default model for the synthetic question-answering task.
    pub fn vqa(architecture: Architecture, seed: u64) -> Self {
        let task = super::VqaTask::default();
        ModelConfig {
            architecture,
            layers: 2,
            encoder_layers: 0,
            heads: 2,
            head_dim: 8,
            text_tokens: task.text_tokens,
            image_tokens: task.image_tokens,
            queries: 0,
            classes: super::VQA_CLASSES,
            text_vocab: task.text_vocab(),
            image_vocab: task.image_vocab(),
            seed,
        }
    }

    /// Default encoder-decoder model for the synthetic detection task.
    pub fn detection(seed: u64) -> Self {
        let task = super::DetectionTask::default();
        ModelConfig {
            architecture: Architecture::EncoderDecoder,
            layers: 2,
            encoder_layers: 2,
            heads: 2,
            head_dim: 8,
            text_tokens: 0,
            image_tokens: task.grid * task.grid,
            queries: task.object_classes,
            classes: task.object_classes + 1,
            text_vocab: 0,
            image_vocab: task.image_vocab(),
            seed,
        }
    }
}
