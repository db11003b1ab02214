// SPDX-License-Identifier: MIT OR Apache-2.0

//! Test-only helpers: an independent propagation oracle written with plain
//! nested vectors, random small models, and trained fixtures.

#![allow(dead_code)]

use std::collections::BTreeMap;

use attn_relevance::models::{
    build_model, gen_vqa_task, train, Architecture, DetectionSample, ForwardTrace, Model, ModelConfig, RecordKind,
    SyntheticSample, Target, TrainConfig, VqaSample,
};
use attn_relevance::numeric::Tensor;
use attn_relevance::relevancy::AblationVariant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

pub fn eye(n: usize) -> M {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

pub fn zeros(r: usize, c: usize) -> M {
    vec![vec![0.0; c]; r]
}

pub fn mm(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    assert_eq!(a[0].len(), k);
    let mut out = zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn tr(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn plus(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Mean over heads of the positive part of gradient times attention.
pub fn oracle_abar(attention: &Tensor, grad: &Tensor) -> M {
    let shape = attention.shape();
    let (h, s, q) = (shape[0], shape[1], shape[2]);
    let a = attention.data();
    let g = grad.data();
    let mut out = zeros(s, q);
    for i in 0..s {
        for j in 0..q {
            let mut acc = 0.0;
            for k in 0..h {
                let idx = k * s * q + i * q + j;
                let v = a[idx] * g[idx];
                if v > 0.0 {
                    acc += v;
                }
            }
            out[i][j] = acc / h as f64;
        }
    }
    out
}

/// Subtract the identity, scale rows to unit sum (near-zero rows vanish),
/// add the identity back.
pub fn oracle_normalize(r: &M) -> M {
    let n = r.len();
    let mut out = r.clone();
    for i in 0..n {
        out[i][i] -= 1.0;
        let sum: f64 = out[i].iter().sum();
        for j in 0..n {
            out[i][j] = if sum > 1e-12 { out[i][j] / sum } else { 0.0 };
        }
        out[i][i] += 1.0;
    }
    out
}

fn step(old: &M, delta: M, variant: AblationVariant) -> M {
    if variant == AblationVariant::NoAggregation {
        delta
    } else {
        plus(old, &delta)
    }
}

fn cross_delta(r_ss: &M, abar: &M, r_qq: &M, variant: AblationVariant) -> M {
    match variant {
        AblationVariant::NoSelfAttInCross => abar.clone(),
        AblationVariant::NoNormalization => mm(&mm(&tr(r_ss), abar), r_qq),
        _ => mm(&mm(&tr(&oracle_normalize(r_ss)), abar), &oracle_normalize(r_qq)),
    }
}

/// Straight-line propagation of a gradient-filled trace, keyed like
/// `RelevancyState::named_maps`.
pub fn oracle_propagate(trace: &ForwardTrace, variant: AblationVariant) -> BTreeMap<String, M> {
    let abars: Vec<(RecordKind, usize, M)> = trace
        .records
        .iter()
        .map(|r| (r.kind, r.layer_index, oracle_abar(&r.attention, r.grad.as_ref().expect("gradient"))))
        .collect();
    let mut out = BTreeMap::new();
    match trace.architecture {
        Architecture::PureSelf => {
            let n = abars[0].2.len();
            let mut r = eye(n);
            for (_, _, a) in &abars {
                r = step(&r, mm(a, &r), variant);
            }
            out.insert("R_jj".to_string(), r);
        }
        Architecture::SelfPlusCo => {
            let (t, i) = {
                let first_cross = abars.iter().find(|x| x.0 == RecordKind::CrossTextFromImage).unwrap();
                (first_cross.2.len(), first_cross.2[0].len())
            };
            let (mut tt, mut ii, mut ti, mut it) = (eye(t), eye(i), zeros(t, i), zeros(i, t));
            // both cross updates of a layer read the maps as they were before either
            let mut snap: Option<(usize, M, M, M, M)> = None;
            for (kind, layer, a) in &abars {
                match kind {
                    RecordKind::SelfText => {
                        let (d_tt, d_ti) = (mm(a, &tt), mm(a, &ti));
                        tt = step(&tt, d_tt, variant);
                        ti = step(&ti, d_ti, variant);
                    }
                    RecordKind::SelfImage => {
                        let (d_ii, d_it) = (mm(a, &ii), mm(a, &it));
                        ii = step(&ii, d_ii, variant);
                        it = step(&it, d_it, variant);
                    }
                    RecordKind::CrossTextFromImage | RecordKind::CrossImageFromText => {
                        if snap.as_ref().map(|s| s.0) != Some(*layer) {
                            snap = Some((*layer, tt.clone(), ii.clone(), ti.clone(), it.clone()));
                        }
                        let (_, s_tt, s_ii, s_ti, s_it) = snap.clone().unwrap();
                        if *kind == RecordKind::CrossTextFromImage {
                            ti = step(&ti, cross_delta(&s_tt, a, &s_ii, variant), variant);
                            tt = step(&tt, mm(a, &s_it), variant);
                        } else {
                            it = step(&it, cross_delta(&s_ii, a, &s_tt, variant), variant);
                            ii = step(&ii, mm(a, &s_ti), variant);
                        }
                    }
                    other => panic!("{other:?} in a co-attention trace"),
                }
            }
            out.insert("R_tt".to_string(), tt);
            out.insert("R_ii".to_string(), ii);
            out.insert("R_ti".to_string(), ti);
            out.insert("R_it".to_string(), it);
        }
        Architecture::EncoderDecoder => {
            let cross = abars.iter().find(|x| x.0 == RecordKind::DecoderCross).unwrap();
            let (d, e) = (cross.2.len(), cross.2[0].len());
            let (mut ee, mut dd, mut de) = (eye(e), eye(d), zeros(d, e));
            for (kind, _, a) in &abars {
                match kind {
                    RecordKind::EncoderSelf => ee = step(&ee, mm(a, &ee), variant),
                    RecordKind::DecoderSelf => {
                        let (d_dd, d_de) = (mm(a, &dd), mm(a, &de));
                        dd = step(&dd, d_dd, variant);
                        de = step(&de, d_de, variant);
                    }
                    RecordKind::DecoderCross => de = step(&de, cross_delta(&dd, a, &ee, variant), variant),
                    other => panic!("{other:?} in an encoder-decoder trace"),
                }
            }
            out.insert("R_ee".to_string(), ee);
            out.insert("R_dd".to_string(), dd);
            out.insert("R_de".to_string(), de);
        }
    }
    out
}

pub fn max_abs_diff(a: &M, b: &Tensor) -> f64 {
    let rows = b.to_rows();
    assert_eq!(a.len(), rows.len());
    a.iter()
        .flatten()
        .zip(rows.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Random small model: up to 4 tokens per side, 3 layers and 2 heads.
pub fn random_model(arch: Architecture, rng: &mut ChaCha8Rng) -> Model {
    let heads = rng.random_range(1..=2);
    let layers = rng.random_range(1..=3);
    let cfg = match arch {
        Architecture::EncoderDecoder => ModelConfig {
            architecture: arch,
            layers,
            encoder_layers: rng.random_range(1..=3),
            heads,
            head_dim: 3,
            text_tokens: 0,
            image_tokens: rng.random_range(2..=4),
            queries: rng.random_range(1..=4),
            classes: 3,
            text_vocab: 0,
            image_vocab: 5,
            seed: rng.random(),
        },
        _ => ModelConfig {
            architecture: arch,
            layers,
            encoder_layers: 0,
            heads,
            head_dim: 3,
            text_tokens: rng.random_range(1..=4),
            image_tokens: rng.random_range(1..=4),
            queries: 0,
            classes: 3,
            text_vocab: 5,
            image_vocab: 5,
            seed: rng.random(),
        },
    };
    build_model(&cfg).unwrap()
}

/// Random input and target for `model`.
pub fn random_input(model: &Model, rng: &mut ChaCha8Rng) -> (SyntheticSample, Target) {
    let cfg = model.config();
    let image: Vec<usize> = (0..cfg.image_tokens).map(|_| rng.random_range(0..cfg.image_vocab)).collect();
    if cfg.architecture.is_classifier() {
        let text = (0..cfg.text_tokens).map(|_| rng.random_range(0..cfg.text_vocab)).collect();
        let sample = SyntheticSample::Vqa(VqaSample {
            text,
            image,
            label: 0,
            relevant_text: 0,
            relevant_image: 0,
        });
        (sample, Target::Class(rng.random_range(0..cfg.classes)))
    } else {
        let sample = SyntheticSample::Detection(DetectionSample {
            grid: 0,
            cell_pixels: 1,
            image,
            objects: vec![],
        });
        let target = Target::Query {
            query: rng.random_range(0..cfg.queries),
            class: rng.random_range(0..cfg.classes),
        };
        (sample, target)
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The default co-attention model trained on 1000 synthetic samples.
pub fn trained_vqa(arch: Architecture) -> (Model, f64) {
    let data = gen_vqa_task(1, 1000).unwrap();
    let model = build_model(&ModelConfig::vqa(arch, 1)).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        seed: 1,
        ..TrainConfig::default()
    };
    let (model, report) = train(&model, &data, &cfg).unwrap();
    (model, report.train_accuracy)
}

/// Worst relative error between recorded attention gradients and central
/// differences of the target logit, over every entry of every head.
/// Entries where both magnitudes are below `floor` are compared against
/// `floor` instead, so rounding noise on vanishing gradients does not count.
pub fn gradient_check(model: &Model, sample: &SyntheticSample, target: Target, floor: f64) -> (f64, usize) {
    use attn_relevance::models::AttentionOverride;
    use attn_relevance::numeric::{finite_diff, DEFAULT_STEP};

    let trace = model.trace_for(sample, target).unwrap();
    let (row, col) = match target {
        Target::Class(c) => (0, c),
        Target::Query { query, class } => (query, class),
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (r, rec) in trace.records.iter().enumerate() {
        let heads = rec.attention.shape()[0];
        for h in 0..heads {
            let a = rec.attention.slab(h);
            let fd = finite_diff(
                |x: &Tensor| {
                    let ov = AttentionOverride {
                        record: r,
                        head: h,
                        value: x.clone(),
                    };
                    let t = model.forward_with_overrides(sample, &[ov])?;
                    Ok(t.logits.get(row, col))
                },
                &a,
                DEFAULT_STEP,
            )
            .unwrap();
            let g = rec.grad.as_ref().unwrap().slab(h);
            for (x, y) in g.data().iter().zip(fd.data()) {
                let scale = x.abs().max(y.abs()).max(floor);
                worst = worst.max((x - y).abs() / scale);
                checked += 1;
            }
        }
    }
    (worst, checked)
}

/// Runs the command-line binary and returns its exit status.
pub fn run_cli(args: &[&str]) -> i32 {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_attn-relevance"))
        .args(args)
        .output()
        .expect("spawn binary");
    out.status.code().unwrap_or(-1)
}

/// Every file under `dir`, keyed by path relative to it.
pub fn read_tree(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let key = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(key, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Generates data, trains a short co-attention model and runs explain,
/// eval-perturb and ablate into `dir`, with `workers` evaluation threads.
pub fn cli_pipeline(dir: &std::path::Path, workers: usize) {
    let p = |name: &str| dir.join(name).display().to_string();
    let config = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/vqa_co.json");
    let workers = workers.to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data", "--kind", "vqa", "--n", "120", "--seed", "3", "--out", &p("data.jsonl")],
        vec!["train", "--config", &config.display().to_string(), "--data", &p("data.jsonl"), "--out", &p("model.json"), "--seed", "5"],
        vec!["explain", "--ckpt", &p("model.json"), "--data", &p("data.jsonl"), "--sample", "4", "--out", &p("explain")],
        vec!["eval-perturb", "--ckpt", &p("model.json"), "--data", &p("data.jsonl"), "--workers", &workers, "--out", &p("perturb")],
        vec!["ablate", "--ckpt", &p("model.json"), "--data", &p("data.jsonl"), "--workers", &workers, "--out", &p("ablate")],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    for step in steps {
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        assert_eq!(run_cli(&args), 0, "{args:?}");
    }
}

/// Between-class variance of splitting `values` into `mask` and the rest.
pub fn between_class_variance(values: &[f64], mask: &[bool]) -> f64 {
    let n = values.len() as f64;
    let fg: Vec<f64> = values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let bg: Vec<f64> = values.iter().zip(mask).filter(|(_, &m)| !m).map(|(&v, _)| v).collect();
    if fg.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (w0, w1) = (bg.len() as f64 / n, fg.len() as f64 / n);
    w0 * w1 * (mean(&bg) - mean(&fg)).powi(2)
}

/// Tries every cut between consecutive distinct values.
pub fn exhaustive_otsu(values: &[f64]) -> (Vec<bool>, f64) {
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut best = (vec![false; values.len()], -1.0);
    for w in distinct.windows(2) {
        let cut = (w[0] + w[1]) / 2.0;
        let mask: Vec<bool> = values.iter().map(|&v| v > cut).collect();
        let var = between_class_variance(values, &mask);
        if var > best.1 {
            best = (mask, var);
        }
    }
    best
}
