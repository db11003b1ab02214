// SPDX-License-Identifier: MIT OR Apache-2.0

//! Perturbation curves, AUC and ground-truth hit rates on the synthetic
//! question-answering task.
//!
//! Relevance is computed once per sample on the unperturbed input; removing
//! a token replaces it with the modality's mask symbol.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baselines::{explain, MethodId};
use crate::error::{Error, Result};
use crate::models::{argmax, Model, SyntheticSample, Target, VqaSample, IMAGE_MASK, TEXT_CLS, TEXT_MASK, TEXT_SEP};
use crate::parallel::ordered_map;
use crate::relevancy::{extract_cls, AblationVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

/// `Positive` removes the most relevant tokens first, `Negative` the least.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn name(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

/// Class whose logit the explanation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSelector {
    #[default]
    Predicted,
    GroundTruth,
}

/// Per-token relevance for the classification row of a question-answering model.
pub trait Explainer: Sync {
    fn name(&self) -> String;

    /// `(text, image)` relevance of `sample` towards `class`.
    fn scores(&self, model: &Model, sample: &VqaSample, class: usize) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// A [`MethodId`] run through [`explain`], read off the cls row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodExplainer {
    pub method: MethodId,
    pub variant: AblationVariant,
}

impl MethodExplainer {
    pub fn new(method: MethodId) -> Self {
        MethodExplainer {
            method,
            variant: AblationVariant::Full,
        }
    }
}

impl Explainer for MethodExplainer {
    fn name(&self) -> String {
        if self.variant == AblationVariant::Full {
            self.method.to_string()
        } else {
            format!("{}/{}", self.method, self.variant)
        }
    }

    fn scores(&self, model: &Model, sample: &VqaSample, class: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let input = SyntheticSample::Vqa(sample.clone());
        let trace = if self.method.needs_gradients() {
            model.trace_for(&input, Target::Class(class))?
        } else {
            model.forward(&input)?
        };
        let state = explain(self.method, &trace, self.variant)?;
        extract_cls(&state, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Strictly increasing, starting at 0 and inside `[0, 1]`.
    pub fractions: Vec<f64>,
    pub target: TargetSelector,
    pub workers: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            fractions: (0..=10).map(|k| k as f64 / 10.0).collect(),
            target: TargetSelector::Predicted,
            workers: 1,
        }
    }
}

impl EvalSettings {
    fn validate(&self) -> Result<()> {
        let f = &self.fractions;
        if f.len() < 2 {
            return Err(Error::Config("a perturbation curve needs at least two fractions".into()));
        }
        if f[0] != 0.0 || f.windows(2).any(|w| w[1] <= w[0]) || f[f.len() - 1] > 1.0 {
            return Err(Error::Config(
                "fractions must start at 0, increase strictly and stay within [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub method: String,
    pub modality: Modality,
    pub polarity: Polarity,
    pub fractions: Vec<f64>,
    pub accuracies: Vec<f64>,
}

/// Trapezoidal area under accuracy over fraction removed.
pub fn auc(curve: &PerturbationCurve) -> Result<f64> {
    let (f, a) = (&curve.fractions, &curve.accuracies);
    if f.len() < 2 || f.len() != a.len() {
        return Err(Error::InvalidInput(format!(
            "auc needs at least two aligned points, got {} fractions and {} accuracies",
            f.len(),
            a.len()
        )));
    }
    Ok(f.windows(2)
        .zip(a.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum())
}

/// Number of tokens removed at fraction `f` of `n` candidates: `⌈f·n⌉`.
pub fn removal_count(f: f64, n: usize) -> usize {
    // Guards against 0.3 * 10 landing just above 3.
    ((f * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Token positions that may be ranked and removed.
pub fn candidates(sample: &VqaSample, modality: Modality) -> Vec<usize> {
    match modality {
        Modality::Text => sample
            .text
            .iter()
            .enumerate()
            .filter(|(_, &s)| s != TEXT_CLS && s != TEXT_SEP)
            .map(|(k, _)| k)
            .collect(),
        Modality::Image => (0..sample.image.len()).collect(),
    }
}

/// Candidates ordered for removal; equal relevance keeps lower indices first.
pub fn removal_order(scores: &[f64], candidates: &[usize], polarity: Polarity) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| {
        let by_score = match polarity {
            Polarity::Positive => scores[b].total_cmp(&scores[a]),
            Polarity::Negative => scores[a].total_cmp(&scores[b]),
        };
        by_score.then(a.cmp(&b))
    });
    order
}

/// Copy of `sample` with `tokens` of `modality` replaced by the mask symbol.
pub fn mask_tokens(sample: &VqaSample, modality: Modality, tokens: &[usize]) -> VqaSample {
    let mut out = sample.clone();
    let (seq, mask) = match modality {
        Modality::Text => (&mut out.text, TEXT_MASK),
        Modality::Image => (&mut out.image, IMAGE_MASK),
    };
    for &k in tokens {
        seq[k] = mask;
    }
    out
}

fn vqa_samples(data: &[SyntheticSample]) -> Result<Vec<&VqaSample>> {
    data.iter()
        .map(|s| {
            s.as_vqa()
                .ok_or_else(|| Error::InvalidInput("perturbation needs text and image modalities".into()))
        })
        .collect()
}

struct Scored<'a> {
    sample: &'a VqaSample,
    text: Vec<f64>,
    image: Vec<f64>,
}

impl Scored<'_> {
    fn of(&self, modality: Modality) -> &[f64] {
        match modality {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }
}

fn score_all<'a>(
    model: &Model,
    samples: &[&'a VqaSample],
    explainer: &dyn Explainer,
    settings: &EvalSettings,
) -> Result<Vec<Scored<'a>>> {
    ordered_map(settings.workers, samples, |&s| {
        let class = match settings.target {
            TargetSelector::GroundTruth => s.label,
            TargetSelector::Predicted => argmax(model.predict(&SyntheticSample::Vqa(s.clone()))?.row(0)),
        };
        let (text, image) = explainer.scores(model, s, class)?;
        if text.len() != s.text.len() || image.len() != s.image.len() {
            return Err(Error::InvalidInput(format!(
                "explainer `{}` returned {}+{} scores for {}+{} tokens",
                explainer.name(),
                text.len(),
                image.len(),
                s.text.len(),
                s.image.len()
            )));
        }
        Ok(Scored { sample: s, text, image })
    })
}

fn curve_from_scores(
    model: &Model,
    scored: &[Scored<'_>],
    method: String,
    modality: Modality,
    polarity: Polarity,
    settings: &EvalSettings,
) -> Result<PerturbationCurve> {
    let hits = ordered_map(settings.workers, scored, |sc| {
        let cands = candidates(sc.sample, modality);
        let order = removal_order(sc.of(modality), &cands, polarity);
        settings
            .fractions
            .iter()
            .map(|&f| {
                let removed = &order[..removal_count(f, cands.len())];
                let perturbed = mask_tokens(sc.sample, modality, removed);
                let logits = model.predict(&SyntheticSample::Vqa(perturbed))?;
                Ok(argmax(logits.row(0)) == sc.sample.label)
            })
            .collect::<Result<Vec<bool>>>()
    })?;
    let n = scored.len() as f64;
    let accuracies = (0..settings.fractions.len())
        .map(|k| hits.iter().filter(|h| h[k]).count() as f64 / n)
        .collect();
    Ok(PerturbationCurve {
        method,
        modality,
        polarity,
        fractions: settings.fractions.clone(),
        accuracies,
    })
}

fn hit_rate_from_scores(scored: &[Scored<'_>], modality: Modality) -> f64 {
    let hits = scored
        .iter()
        .filter(|sc| {
            let cands = candidates(sc.sample, modality);
            let top = removal_order(sc.of(modality), &cands, Polarity::Positive).first().copied();
            let truth = match modality {
                Modality::Text => sc.sample.relevant_text,
                Modality::Image => sc.sample.relevant_image,
            };
            top == Some(truth)
        })
        .count();
    hits as f64 / scored.len() as f64
}

/// Accuracy as the `modality` tokens are removed in relevance order.
pub fn perturb_curve(
    model: &Model,
    data: &[SyntheticSample],
    explainer: &dyn Explainer,
    modality: Modality,
    polarity: Polarity,
    settings: &EvalSettings,
) -> Result<PerturbationCurve> {
    settings.validate()?;
    let samples = non_empty(vqa_samples(data)?)?;
    let scored = score_all(model, &samples, explainer, settings)?;
    curve_from_scores(model, &scored, explainer.name(), modality, polarity, settings)
}

/// Fraction of samples whose designated `modality` token is ranked first.
pub fn ground_truth_rank(
    model: &Model,
    data: &[SyntheticSample],
    explainer: &dyn Explainer,
    modality: Modality,
    settings: &EvalSettings,
) -> Result<f64> {
    let samples = non_empty(vqa_samples(data)?)?;
    let scored = score_all(model, &samples, explainer, settings)?;
    Ok(hit_rate_from_scores(&scored, modality))
}

fn non_empty<T>(v: Vec<T>) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("evaluation needs at least one sample".into()));
    }
    Ok(v)
}

/// AUCs of the four perturbation settings plus hit rates for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub neg_img: f64,
    pub pos_img: f64,
    pub neg_text: f64,
    pub pos_text: f64,
    /// Mean of the text and image hit rates.
    pub hit_rate: f64,
    pub hit_rate_text: f64,
    pub hit_rate_img: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub samples: usize,
    pub target: TargetSelector,
    /// Accuracy of the unperturbed model on the evaluated samples.
    pub accuracy: f64,
    pub methods: BTreeMap<String, MethodRow>,
    pub curves: Vec<PerturbationCurve>,
}

impl CompareReport {
    /// One `method,modality,polarity,fraction,accuracy` line per curve point.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("method,modality,polarity,fraction,accuracy\n");
        for c in &self.curves {
            for (f, a) in c.fractions.iter().zip(&c.accuracies) {
                writeln!(out, "{},{},{},{f},{a}", c.method, c.modality.name(), c.polarity.name())
                    .expect("write to string");
            }
        }
        out
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<32} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "method", "neg_img", "pos_img", "neg_text", "pos_text", "hit_rate"
        )?;
        for (name, r) in &self.methods {
            writeln!(
                f,
                "{name:<32} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                r.neg_img, r.pos_img, r.neg_text, r.pos_text, r.hit_rate
            )?;
        }
        Ok(())
    }
}

/// Runs the four perturbation settings and both hit rates for every explainer.
pub fn compare_report(
    model: &Model,
    data: &[SyntheticSample],
    explainers: &[&dyn Explainer],
    settings: &EvalSettings,
) -> Result<CompareReport> {
    settings.validate()?;
    let samples = non_empty(vqa_samples(data)?)?;
    let correct = ordered_map(settings.workers, &samples, |&s| {
        Ok(argmax(model.predict(&SyntheticSample::Vqa(s.clone()))?.row(0)) == s.label)
    })?;
    let mut report = CompareReport {
        samples: samples.len(),
        target: settings.target,
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / samples.len() as f64,
        methods: BTreeMap::new(),
        curves: Vec::new(),
    };
    for ex in explainers {
        let name = ex.name();
        if report.methods.contains_key(&name) {
            return Err(Error::Config(format!("method `{name}` listed twice")));
        }
        let scored = score_all(model, &samples, *ex, settings)?;
        let mut area = BTreeMap::new();
        for modality in [Modality::Image, Modality::Text] {
            for polarity in [Polarity::Negative, Polarity::Positive] {
                let curve = curve_from_scores(model, &scored, name.clone(), modality, polarity, settings)?;
                area.insert((modality, polarity), auc(&curve)?);
                report.curves.push(curve);
            }
        }
        let hit_rate_text = hit_rate_from_scores(&scored, Modality::Text);
        let hit_rate_img = hit_rate_from_scores(&scored, Modality::Image);
        log::info!("{name}: evaluated {} samples", samples.len());
        report.methods.insert(
            name,
            MethodRow {
                neg_img: area[&(Modality::Image, Polarity::Negative)],
                pos_img: area[&(Modality::Image, Polarity::Positive)],
                neg_text: area[&(Modality::Text, Polarity::Negative)],
                pos_text: area[&(Modality::Text, Polarity::Positive)],
                hit_rate: (hit_rate_text + hit_rate_img) / 2.0,
                hit_rate_text,
                hit_rate_img,
            },
        );
    }
    Ok(report)
}
