// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mini-batch gradient descent on the synthetic tasks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tasks::SyntheticSample;
use super::trace::argmax;
use super::transformer::Model;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global gradient-norm cap applied per batch; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Weight of the box-regression term for detection models.
    #[serde(default = "default_box_weight")]
    pub box_weight: f64,
    pub seed: u64,
}

fn default_box_weight() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            learning_rate: 0.1,
            batch_size: 16,
            clip_norm: Some(1.0),
            box_weight: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    /// Mean training loss of the last epoch; absent when no epoch ran.
    pub final_loss: Option<f64>,
    /// Classification accuracy on the training set after the last epoch;
    /// per-query for detection.
    pub train_accuracy: f64,
}

/// Per-query class targets for a detection sample: an object of class `k`
/// is owned by query `k`; every other query predicts the trailing
/// no-object class.
pub fn detection_targets(model: &Model, sample: &super::DetectionSample) -> (Vec<usize>, Tensor, Vec<f64>) {
    let cfg = model.config();
    let no_object = cfg.classes - 1;
    let mut classes = vec![no_object; cfg.queries];
    let mut boxes = Tensor::zeros(&[cfg.queries, 4]);
    let mut weights = vec![0.0; cfg.queries];
    for o in &sample.objects {
        if o.class < cfg.queries && o.class < no_object {
            classes[o.class] = o.class;
            for (c, v) in sample.normalized_box(o).into_iter().enumerate() {
                boxes.set(o.class, c, v);
            }
            weights[o.class] = 1.0;
        }
    }
    (classes, boxes, weights)
}

fn sample_loss(model: &Model, sample: &SyntheticSample, box_weight: f64) -> Result<(f64, Vec<Tensor>)> {
    let mut pass = model.run(sample, &[])?;
    let loss = match sample {
        SyntheticSample::Vqa(s) => pass.tape.cross_entropy(pass.logits, &[s.label]),
        SyntheticSample::Detection(s) => {
            let (classes, boxes, weights) = detection_targets(model, s);
            let ce = pass.tape.cross_entropy(pass.logits, &classes);
            let pred = pass.boxes.expect("detection pass has boxes");
            let se = pass.tape.squared_error(pred, boxes, weights);
            let se = pass.tape.scale(se, box_weight);
            pass.tape.add(ce, se)
        }
    };
    let value = pass.tape.value(loss).data()[0];
    let grads = pass.tape.gradients(loss)?;
    Ok((value, pass.params.iter().map(|&p| grads.wrt(p)).collect()))
}

/// Fraction of correct argmax predictions (per query for detection).
pub fn accuracy(model: &Model, data: &[SyntheticSample]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in data {
        let logits = model.predict(s)?;
        match s {
            SyntheticSample::Vqa(v) => {
                hits += usize::from(argmax(logits.row(0)) == v.label);
                total += 1;
            }
            SyntheticSample::Detection(d) => {
                let (classes, _, _) = detection_targets(model, d);
                for (q, &c) in classes.iter().enumerate() {
                    hits += usize::from(argmax(logits.row(q)) == c);
                    total += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Trains a copy of `model`; with zero epochs the copy is returned untouched.
pub fn train(model: &Model, data: &[SyntheticSample], cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut final_loss = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Option<Vec<Tensor>> = None;
            for &k in batch {
                let (loss, grads) = sample_loss(&model, &data[k], cfg.box_weight)?;
                epoch_loss += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let grads = sum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|x| (x * inv).powi(2))
                .sum::<f64>()
                .sqrt();
            let clip = match cfg.clip_norm {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            let step = cfg.learning_rate * inv * clip;
            for (p, g) in model.params_mut().iter_mut().zip(&grads) {
                for (x, y) in p.data_mut().iter_mut().zip(g.data()) {
                    *x -= step * y;
                }
            }
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Training(format!("loss diverged at epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: loss {mean:.5}");
        final_loss = Some(mean);
    }
    let train_accuracy = accuracy(&model, data)?;
    Ok((
        model,
        TrainReport {
            epochs: cfg.epochs,
            final_loss,
            train_accuracy,
        },
    ))
}
