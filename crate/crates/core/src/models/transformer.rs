// SPDX-License-Identifier: MIT OR Apache-2.0

//! The three reference micro-transformers.
//!
//! Every block is `x + Attention(x, context)` followed by `x + tanh(x·W + b)`.
//! Attention is `softmax(Q·Kᵀ/√d_h)·V` per head, heads concatenated and
//! projected back to the embedding width.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Architecture, ModelConfig};
use super::tasks::SyntheticSample;
use super::trace::{AttentionRecord, ForwardTrace, RecordKind, Recorded, Target};
use crate::error::{Error, Result};
use crate::numeric::{GradTape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
struct AttnParams {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct FfnParams {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct SelfBlock {
    attn: AttnParams,
    ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
struct CoLayer {
    text: SelfBlock,
    image: SelfBlock,
    text_cross: SelfBlock,
    image_cross: SelfBlock,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLayer {
    self_attn: AttnParams,
    cross: AttnParams,
    ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
enum Layout {
    PureSelf {
        blocks: Vec<SelfBlock>,
    },
    SelfPlusCo {
        layers: Vec<CoLayer>,
    },
    EncoderDecoder {
        queries: usize,
        encoder: Vec<SelfBlock>,
        decoder: Vec<DecoderLayer>,
        box_w: usize,
        box_b: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Embeddings {
    text: Option<(usize, usize)>,
    image: (usize, usize),
}

/// Replaces one head's attention map with a fixed matrix during a forward
/// pass. The replacement is a leaf, so gradients stop there.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOverride {
    /// Position of the attention module in execution order.
    pub record: usize,
    pub head: usize,
    pub value: Tensor,
}

/// A micro-transformer with a flat, named parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    embeddings: Embeddings,
    layout: Layout,
    head_w: usize,
    head_b: usize,
}

struct ParamBuilder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl ParamBuilder {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(name, Tensor::from_vec(vec![rows, cols], data).expect("shape"))
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.push(name, Tensor::zeros(&[rows, cols]))
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnParams {
        let std = 1.0 / (d as f64).sqrt();
        AttnParams {
            q: self.normal(format!("{prefix}.wq"), d, d, std),
            k: self.normal(format!("{prefix}.wk"), d, d, std),
            v: self.normal(format!("{prefix}.wv"), d, d, std),
            o: self.normal(format!("{prefix}.wo"), d, d, std),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize) -> FfnParams {
        FfnParams {
            w: self.normal(format!("{prefix}.w"), d, d, 1.0 / (d as f64).sqrt()),
            b: self.zeros(format!("{prefix}.b"), 1, d),
        }
    }

    fn block(&mut self, prefix: &str, d: usize) -> SelfBlock {
        SelfBlock {
            attn: self.attn(&format!("{prefix}.attn"), d),
            ffn: self.ffn(&format!("{prefix}.ffn"), d),
        }
    }
}

/// Builds a model with parameters drawn deterministically from `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    Model::new(config.clone())
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim();
        let mut b = ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            names: Vec::new(),
            params: Vec::new(),
        };
        let text = config.architecture.is_classifier().then(|| {
            (
                b.normal("text.embed".into(), config.text_vocab, d, 1.0),
                b.normal("text.pos".into(), config.text_tokens, d, 0.5),
            )
        });
        let image = (
            b.normal("image.embed".into(), config.image_vocab, d, 1.0),
            b.normal("image.pos".into(), config.image_tokens, d, 0.5),
        );
        let layout = match config.architecture {
            Architecture::PureSelf => Layout::PureSelf {
                blocks: (0..config.layers)
                    .map(|l| b.block(&format!("joint.{l}"), d))
                    .collect(),
            },
            Architecture::SelfPlusCo => Layout::SelfPlusCo {
                layers: (0..config.layers)
                    .map(|l| CoLayer {
                        text: b.block(&format!("co.{l}.text_self"), d),
                        image: b.block(&format!("co.{l}.image_self"), d),
                        text_cross: b.block(&format!("co.{l}.text_cross"), d),
                        image_cross: b.block(&format!("co.{l}.image_cross"), d),
                    })
                    .collect(),
            },
            Architecture::EncoderDecoder => {
                let queries = b.normal("decoder.queries".into(), config.queries, d, 1.0);
                let encoder = (0..config.encoder_layers)
                    .map(|l| b.block(&format!("encoder.{l}"), d))
                    .collect();
                let decoder = (0..config.layers)
                    .map(|l| DecoderLayer {
                        self_attn: b.attn(&format!("decoder.{l}.self"), d),
                        cross: b.attn(&format!("decoder.{l}.cross"), d),
                        ffn: b.ffn(&format!("decoder.{l}.ffn"), d),
                    })
                    .collect();
                let box_w = b.normal("head.box_w".into(), d, 4, 1.0 / (d as f64).sqrt());
                let box_b = b.zeros("head.box_b".into(), 1, 4);
                Layout::EncoderDecoder {
                    queries,
                    encoder,
                    decoder,
                    box_w,
                    box_b,
                }
            }
        };
        let head_w = b.normal("head.class_w".into(), d, config.classes, 1.0 / (d as f64).sqrt());
        let head_b = b.zeros("head.class_b".into(), 1, config.classes);
        Ok(Model {
            config,
            names: b.names,
            params: b.params,
            embeddings: Embeddings { text, image },
            layout,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Rebuilds the layout from `config` and loads a flat parameter vector.
    pub fn from_flat(config: ModelConfig, flat: &[f64]) -> Result<Self> {
        let mut model = Model::new(config)?;
        if flat.len() != model.num_parameters() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, the config needs {}",
                flat.len(),
                model.num_parameters()
            )));
        }
        let mut offset = 0;
        for p in &mut model.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(model)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Record kinds a forward pass emits, in execution order.
    pub fn record_plan(&self) -> Vec<(RecordKind, usize)> {
        let mut plan = Vec::new();
        match &self.layout {
            Layout::PureSelf { blocks } => {
                plan.extend((0..blocks.len()).map(|l| (RecordKind::SelfJoint, l)));
            }
            Layout::SelfPlusCo { layers } => {
                for l in 0..layers.len() {
                    plan.push((RecordKind::SelfText, l));
                    plan.push((RecordKind::SelfImage, l));
                    plan.push((RecordKind::CrossTextFromImage, l));
                    plan.push((RecordKind::CrossImageFromText, l));
                }
            }
            Layout::EncoderDecoder { encoder, decoder, .. } => {
                plan.extend((0..encoder.len()).map(|l| (RecordKind::EncoderSelf, l)));
                for l in 0..decoder.len() {
                    plan.push((RecordKind::DecoderSelf, l));
                    plan.push((RecordKind::DecoderCross, l));
                }
            }
        }
        plan
    }

    fn check_sample(&self, sample: &SyntheticSample) -> Result<()> {
        let cfg = &self.config;
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        match (cfg.architecture.is_classifier(), sample) {
            (true, SyntheticSample::Vqa(s)) => {
                if s.text.len() != cfg.text_tokens || s.image.len() != cfg.image_tokens {
                    return bad(format!(
                        "sample has {}+{} tokens, model expects {}+{}",
                        s.text.len(),
                        s.image.len(),
                        cfg.text_tokens,
                        cfg.image_tokens
                    ));
                }
                if s.text.iter().any(|&x| x >= cfg.text_vocab) || s.image.iter().any(|&x| x >= cfg.image_vocab) {
                    return bad("token id outside the model vocabulary".into());
                }
            }
            (false, SyntheticSample::Detection(s)) => {
                if s.image.len() != cfg.image_tokens {
                    return bad(format!(
                        "sample has {} image tokens, model expects {}",
                        s.image.len(),
                        cfg.image_tokens
                    ));
                }
                if s.image.iter().any(|&x| x >= cfg.image_vocab) {
                    return bad("token id outside the model vocabulary".into());
                }
            }
            _ => {
                return bad(format!(
                    "sample kind does not match a {} model",
                    cfg.architecture
                ))
            }
        }
        Ok(())
    }

    /// Forward pass recording attention maps; gradients are not yet filled.
    pub fn forward(&self, sample: &SyntheticSample) -> Result<ForwardTrace> {
        self.forward_with_overrides(sample, &[])
    }

    pub fn forward_with_overrides(
        &self,
        sample: &SyntheticSample,
        overrides: &[AttentionOverride],
    ) -> Result<ForwardTrace> {
        let pass = self.run(sample, overrides)?;
        let tape = &pass.tape;
        let records = pass
            .records
            .iter()
            .map(|(kind, layer, heads)| {
                let maps: Vec<Tensor> = heads.iter().map(|&v| tape.value(v).clone()).collect();
                Ok(AttentionRecord {
                    kind: *kind,
                    layer_index: *layer,
                    attention: Tensor::stack(&maps)?,
                    grad: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let logits = tape.value(pass.logits).clone();
        let boxes = pass.boxes.map(|b| tape.value(b).clone());
        let recorded = Recorded {
            logits: pass.logits,
            heads: pass.records.into_iter().map(|(_, _, h)| h).collect(),
            tape: pass.tape,
        };
        Ok(ForwardTrace {
            architecture: self.config.architecture,
            records,
            logits,
            boxes,
            text_tokens: (self.config.architecture != Architecture::EncoderDecoder)
                .then_some(self.config.text_tokens),
            target: None,
            recorded: Some(Arc::new(recorded)),
        })
    }

    /// Logits only.
    pub fn predict(&self, sample: &SyntheticSample) -> Result<Tensor> {
        let pass = self.run(sample, &[])?;
        Ok(pass.tape.value(pass.logits).clone())
    }

    /// Fills `grad` on every record with `∂ logit[target] / ∂A`.
    pub fn backward_fill(&self, trace: &ForwardTrace, target: Target) -> Result<ForwardTrace> {
        let recorded = trace.recorded.as_ref().ok_or_else(|| {
            Error::PropagationOrder("trace carries no tape; rerun forward".into())
        })?;
        let (rows, cols) = trace.logits.dims2();
        let (row, col) = target.logit_index();
        match (target, self.config.architecture.is_classifier()) {
            (Target::Class(_), true) | (Target::Query { .. }, false) => {}
            _ => {
                return Err(Error::InvalidInput(format!(
                    "target {target:?} does not apply to a {} model",
                    self.config.architecture
                )))
            }
        }
        if row >= rows || col >= cols {
            return Err(Error::InvalidInput(format!(
                "target {target:?} outside logits of shape {rows}x{cols}"
            )));
        }
        let all: Vec<Var> = recorded.heads.iter().flatten().copied().collect();
        let grads = recorded.tape.grad_of(recorded.logits, row, col, &all)?;
        let mut out = trace.clone();
        let mut it = grads.into_iter();
        for (rec, heads) in out.records.iter_mut().zip(&recorded.heads) {
            let per_head: Vec<Tensor> = it.by_ref().take(heads.len()).collect();
            rec.grad = Some(Tensor::stack(&per_head)?);
        }
        out.target = Some(target);
        Ok(out)
    }

    /// Forward plus backward for one target.
    pub fn trace_for(&self, sample: &SyntheticSample, target: Target) -> Result<ForwardTrace> {
        let trace = self.forward(sample)?;
        self.backward_fill(&trace, target)
    }

    pub(crate) fn run(&self, sample: &SyntheticSample, overrides: &[AttentionOverride]) -> Result<Pass> {
        self.check_sample(sample)?;
        let mut tape = GradTape::new();
        let p: Vec<Var> = self.params.iter().map(|t| tape.leaf(t.clone())).collect();
        let mut ctx = Ctx {
            tape,
            p,
            overrides,
            records: Vec::new(),
            heads: self.config.heads,
            head_dim: self.config.head_dim,
        };
        let (logits, boxes) = match (&self.layout, sample) {
            (Layout::PureSelf { blocks }, SyntheticSample::Vqa(s)) => {
                let text = self.embed_text(&mut ctx, &s.text);
                let image = self.embed_image(&mut ctx, &s.image);
                let mut x = ctx.tape.concat_rows(&[text, image]);
                for (l, block) in blocks.iter().enumerate() {
                    x = ctx.self_block(block, x, RecordKind::SelfJoint, l)?;
                }
                (self.classify(&mut ctx, x), None)
            }
            (Layout::SelfPlusCo { layers }, SyntheticSample::Vqa(s)) => {
                let mut text = self.embed_text(&mut ctx, &s.text);
                let mut image = self.embed_image(&mut ctx, &s.image);
                for (l, layer) in layers.iter().enumerate() {
                    text = ctx.self_block(&layer.text, text, RecordKind::SelfText, l)?;
                    image = ctx.self_block(&layer.image, image, RecordKind::SelfImage, l)?;
                    // both directions read the post-self embeddings
                    let t = ctx.attention(&layer.text_cross.attn, text, image, RecordKind::CrossTextFromImage, l)?;
                    let i = ctx.attention(&layer.image_cross.attn, image, text, RecordKind::CrossImageFromText, l)?;
                    text = ctx.ffn(&layer.text_cross.ffn, t);
                    image = ctx.ffn(&layer.image_cross.ffn, i);
                }
                (self.classify(&mut ctx, text), None)
            }
            (
                Layout::EncoderDecoder {
                    queries,
                    encoder,
                    decoder,
                    box_w,
                    box_b,
                },
                SyntheticSample::Detection(s),
            ) => {
                let mut enc = self.embed_image(&mut ctx, &s.image);
                for (l, block) in encoder.iter().enumerate() {
                    enc = ctx.self_block(block, enc, RecordKind::EncoderSelf, l)?;
                }
                let mut q = ctx.p[*queries];
                for (l, layer) in decoder.iter().enumerate() {
                    q = ctx.attention(&layer.self_attn, q, q, RecordKind::DecoderSelf, l)?;
                    q = ctx.attention(&layer.cross, q, enc, RecordKind::DecoderCross, l)?;
                    q = ctx.ffn(&layer.ffn, q);
                }
                let logits = ctx.tape.matmul(q, ctx.p[self.head_w]);
                let logits = ctx.tape.add_row(logits, ctx.p[self.head_b]);
                let boxes = ctx.tape.matmul(q, ctx.p[*box_w]);
                let boxes = ctx.tape.add_row(boxes, ctx.p[*box_b]);
                let boxes = ctx.tape.sigmoid(boxes);
                (logits, Some(boxes))
            }
            _ => unreachable!("check_sample rejects mismatched samples"),
        };
        Ok(Pass {
            tape: ctx.tape,
            params: ctx.p,
            logits,
            boxes,
            records: ctx.records,
        })
    }

    fn embed_text(&self, ctx: &mut Ctx<'_>, ids: &[usize]) -> Var {
        let (table, pos) = self.embeddings.text.expect("classifier has text embeddings");
        let e = ctx.tape.gather(ctx.p[table], ids);
        ctx.tape.add(e, ctx.p[pos])
    }

    fn embed_image(&self, ctx: &mut Ctx<'_>, ids: &[usize]) -> Var {
        let (table, pos) = self.embeddings.image;
        let e = ctx.tape.gather(ctx.p[table], ids);
        ctx.tape.add(e, ctx.p[pos])
    }

    /// Logits from the first row (the CLS slot).
    fn classify(&self, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let cls = ctx.tape.slice_rows(x, 0, 1);
        let logits = ctx.tape.matmul(cls, ctx.p[self.head_w]);
        ctx.tape.add_row(logits, ctx.p[self.head_b])
    }
}

pub(crate) struct Pass {
    pub tape: GradTape,
    pub params: Vec<Var>,
    pub logits: Var,
    pub boxes: Option<Var>,
    pub records: Vec<(RecordKind, usize, Vec<Var>)>,
}

struct Ctx<'a> {
    tape: GradTape,
    p: Vec<Var>,
    overrides: &'a [AttentionOverride],
    records: Vec<(RecordKind, usize, Vec<Var>)>,
    heads: usize,
    head_dim: usize,
}

impl Ctx<'_> {
    fn self_block(&mut self, block: &SelfBlock, x: Var, kind: RecordKind, layer: usize) -> Result<Var> {
        let x = self.attention(&block.attn, x, x, kind, layer)?;
        Ok(self.ffn(&block.ffn, x))
    }

    fn ffn(&mut self, ffn: &FfnParams, x: Var) -> Var {
        let h = self.tape.matmul(x, self.p[ffn.w]);
        let h = self.tape.add_row(h, self.p[ffn.b]);
        let h = self.tape.tanh(h);
        self.tape.add(x, h)
    }

    /// `x + (softmax(Q·Kᵀ/√d_h)·V)·W_o` with queries from `x`, keys and values from `context`.
    fn attention(&mut self, a: &AttnParams, x: Var, context: Var, kind: RecordKind, layer: usize) -> Result<Var> {
        let record = self.records.len();
        let q = self.tape.matmul(x, self.p[a.q]);
        let k = self.tape.matmul(context, self.p[a.k]);
        let v = self.tape.matmul(context, self.p[a.v]);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut head_maps = Vec::with_capacity(self.heads);
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = self.tape.slice_cols(q, start, self.head_dim);
            let kh = self.tape.slice_cols(k, start, self.head_dim);
            let vh = self.tape.slice_cols(v, start, self.head_dim);
            let scores = self.tape.matmul_t(qh, kh);
            let scores = self.tape.scale(scores, scale);
            let mut attn = self.tape.softmax_rows(scores);
            if let Some(o) = self.overrides.iter().find(|o| o.record == record && o.head == h) {
                let shape = self.tape.value(attn).shape().to_vec();
                if o.value.shape() != shape.as_slice() {
                    return Err(Error::shape("attention override", &shape, o.value.shape()));
                }
                attn = self.tape.leaf(o.value.clone());
            }
            head_maps.push(attn);
            outputs.push(self.tape.matmul(attn, vh));
        }
        self.records.push((kind, layer, head_maps));
        let o = if outputs.len() == 1 {
            outputs[0]
        } else {
            self.tape.concat_cols(&outputs)
        };
        let o = self.tape.matmul(o, self.p[a.o]);
        Ok(self.tape.add(x, o))
    }
}
