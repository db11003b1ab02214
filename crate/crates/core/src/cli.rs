// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end: data generation, training, explanation and the
//! evaluation reports.
//!
//! Every artifact is a deterministic function of the flags, so reruns
//! produce identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{explain, MethodId};
use crate::error::{Error, Result};
use crate::eval::{compare_report, CompareReport, EvalSettings, Explainer, MethodExplainer, MethodRow, TargetSelector};
use crate::models::{
    argmax, build_model, gen_vqa_task, read_jsonl, train, write_jsonl, Architecture, Checkpoint, DetectionTask,
    Model, ModelConfig, SyntheticSample, Target, TrainConfig,
};
use crate::relevancy::{extract_cls, extract_query, AblationVariant, RelevancyDump};
use crate::segmask::pgm::{heatmap_pixels, mask_pixels, write_pgm};
use crate::segmask::{ap_ar, ground_truth, mean_object_iou, segment_dataset, ApArReport, ApSettings, DEFAULT_TARGET_SCALE};

/// Environment variable holding the log filter.
pub const LOG_ENV: &str = "ATTN_RELEVANCE_LOG";

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "attn-relevance", version, about = "Relevancy maps for attention models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as JSON lines.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Explain one sample: relevancy dump plus heatmaps.
    Explain(ExplainArgs),
    /// Perturbation AUCs and hit rates on a question-answering dataset.
    EvalPerturb(EvalArgs),
    /// Segmentation masks and their scores on a detection dataset.
    EvalSeg(EvalArgs),
    /// Evaluate every propagation variant.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Vqa,
    Detect,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: DataKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON file with `model` and `train` sections.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides both the initialization and the shuffling seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Index of the sample in the dataset.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[arg(long, default_value = "ours")]
    pub method: String,
    #[arg(long, default_value = "full")]
    pub variant: String,
    /// `predicted`, `truth`, `class:K`, `query:J` or `query:J:K`.
    #[arg(long, default_value = "predicted")]
    pub target: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated method names; empty for none.
    #[arg(long, default_value = "ours,raw_attention,rollout,grad_cam,trans_attr_no_lrp")]
    pub method: String,
    #[arg(long, default_value = "full")]
    pub variant: String,
    /// `predicted` or `truth`.
    #[arg(long, default_value = "predicted")]
    pub target: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

/// Contents of a training config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Stamped on every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the model config JSON.
    pub config_hash: String,
}

impl Provenance {
    fn new(command: &str, seed: u64, config: &ModelConfig) -> Result<Self> {
        Ok(Provenance {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config_hash: sha256_hex(&serde_json::to_vec(config)?),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Shape { .. } | Error::Oracle(_) | Error::Training(_) | Error::Degenerate(_) => EXIT_NUMERIC,
        Error::InvalidInput(_)
        | Error::Config(_)
        | Error::Trace(_)
        | Error::PropagationOrder(_)
        | Error::Json(_) => EXIT_CONFIG,
    }
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Explain(a) => cmd_explain(&a),
        Command::EvalPerturb(a) => cmd_eval_perturb(&a),
        Command::EvalSeg(a) => cmd_eval_seg(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_model(path: &Path) -> Result<Model> {
    read_json::<Checkpoint>(path)?.model()
}

/// Reads a dataset and checks every sample suits `arch`.
fn load_data(path: &Path, arch: Architecture) -> Result<Vec<SyntheticSample>> {
    let data = read_jsonl(path)?;
    if data.is_empty() {
        return Err(Error::Config(format!("{} holds no samples", path.display())));
    }
    if data.iter().any(|s| s.as_detection().is_some() == arch.is_classifier()) {
        return Err(Error::Config(format!(
            "{} does not hold samples for a {arch} model",
            path.display()
        )));
    }
    Ok(data)
}

fn parse_methods(list: &str) -> Result<Vec<MethodId>> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m: MethodId = name.parse()?;
        if out.contains(&m) {
            return Err(Error::Config(format!("method `{m}` listed twice")));
        }
        out.push(m);
    }
    Ok(out)
}

fn parse_selector(s: &str) -> Result<TargetSelector> {
    match s {
        "predicted" => Ok(TargetSelector::Predicted),
        "truth" => Ok(TargetSelector::GroundTruth),
        _ => Err(Error::Config(format!("target must be `predicted` or `truth`, got `{s}`"))),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let data = match a.kind {
        DataKind::Vqa => gen_vqa_task(a.seed, a.n)?,
        DataKind::Detect => DetectionTask::default().generate(a.seed, a.n)?,
    };
    write_jsonl(&a.out, &data)?;
    println!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = read_json(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    let data = load_data(&a.data, cfg.model.architecture)?;
    let model = build_model(&cfg.model)?;
    let (model, report) = train(&model, &data, &cfg.train)?;
    Checkpoint::new(&model, Some(cfg.train.clone()), Some(report.clone())).save(&a.out)?;
    println!("train accuracy: {:.4}", report.train_accuracy);
    Ok(())
}

/// Resolves the `--target` flag against the model's prediction.
fn resolve_target(spec: &str, model: &Model, sample: &SyntheticSample) -> Result<Target> {
    let logits = model.predict(sample)?;
    let bad = || Error::Config(format!("cannot use target `{spec}` with a {} model", model.architecture()));
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    match (model.architecture().is_classifier(), parts.as_slice()) {
        (true, ["predicted"]) => Ok(Target::Class(argmax(logits.row(0)))),
        (true, ["truth"]) => Ok(Target::Class(sample.as_vqa().ok_or_else(bad)?.label)),
        (true, ["class", k]) => Ok(Target::Class(num(k)?)),
        (false, ["query", j]) => {
            let j = num(j)?;
            if j >= logits.rows() {
                return Err(bad());
            }
            let objects = logits.cols() - 1;
            Ok(Target::Query {
                query: j,
                class: argmax(&logits.row(j)[..objects]),
            })
        }
        (false, ["query", j, k]) => Ok(Target::Query {
            query: num(j)?,
            class: num(k)?,
        }),
        (false, ["predicted"]) => Ok(Target::Query {
            query: 0,
            class: argmax(&logits.row(0)[..logits.cols() - 1]),
        }),
        _ => Err(bad()),
    }
}

#[derive(Serialize)]
struct ExplainOutput<'a> {
    provenance: Provenance,
    sample: usize,
    #[serde(flatten)]
    dump: &'a RelevancyDump,
    scores: BTreeMap<String, Vec<f64>>,
}

/// Side of the square grid holding `n` tokens, if any.
fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

fn write_heatmap(dir: &Path, name: &str, values: &[f64]) -> Result<()> {
    let (rows, cols) = match square_side(values.len()) {
        Some(s) if s > 1 => (s, s),
        _ => (1, values.len()),
    };
    write_pgm(&dir.join(format!("{name}.pgm")), rows, cols, &heatmap_pixels(values))
}

pub fn cmd_explain(a: &ExplainArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let arch = model.architecture();
    let data = load_data(&a.data, arch)?;
    let sample = data.get(a.sample).ok_or_else(|| {
        Error::Config(format!("sample {} outside a dataset of {}", a.sample, data.len()))
    })?;
    let method: MethodId = a.method.parse()?;
    let variant: AblationVariant = a.variant.parse()?;
    if variant != AblationVariant::Full && method != MethodId::Ours {
        return Err(Error::Config(format!("variant `{variant}` only applies to method `ours`, not `{method}`")));
    }
    let target = resolve_target(&a.target, &model, sample)?;
    let trace = model.trace_for(sample, target)?;
    let state = explain(method, &trace, variant)?;

    create_dir(&a.out)?;
    let mut scores = BTreeMap::new();
    match target {
        Target::Class(_) => {
            let (text, image) = extract_cls(&state, 0)?;
            write_heatmap(&a.out, "text", &text)?;
            write_heatmap(&a.out, "image", &image)?;
            scores.insert("text".to_string(), text);
            scores.insert("image".to_string(), image);
        }
        Target::Query { query, .. } => {
            let row = extract_query(&state, query)?;
            let name = format!("query_{query}");
            write_heatmap(&a.out, &name, &row)?;
            scores.insert(name, row);
        }
    }
    let dump = RelevancyDump::new(&state, method.name(), variant, Some(target));
    write_json(
        &a.out.join("relevance.json"),
        &ExplainOutput {
            provenance: Provenance::new("explain", a.seed, model.config())?,
            sample: a.sample,
            dump: &dump,
            scores,
        },
    )?;
    println!("wrote {} explanation to {}", method, a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct PerturbOutput<'a> {
    provenance: Provenance,
    samples: usize,
    target: TargetSelector,
    accuracy: f64,
    methods: &'a BTreeMap<String, MethodRow>,
}

fn perturb_report(
    model: &Model,
    data: &[SyntheticSample],
    explainers: &[MethodExplainer],
    settings: &EvalSettings,
) -> Result<CompareReport> {
    let refs: Vec<&dyn Explainer> = explainers.iter().map(|e| e as &dyn Explainer).collect();
    compare_report(model, data, &refs, settings)
}

fn write_perturb(out: &Path, provenance: Provenance, report: &CompareReport) -> Result<()> {
    create_dir(out)?;
    write_json(
        &out.join("report.json"),
        &PerturbOutput {
            provenance,
            samples: report.samples,
            target: report.target,
            accuracy: report.accuracy,
            methods: &report.methods,
        },
    )?;
    let csv = out.join("curves.csv");
    std::fs::write(&csv, report.curves_csv()).map_err(|e| Error::io(&csv, e))?;
    print!("{report}");
    Ok(())
}

fn classifier_only(model: &Model, command: &str) -> Result<()> {
    if !model.architecture().is_classifier() {
        return Err(Error::Config(format!(
            "{command} needs a question-answering model, got {}",
            model.architecture()
        )));
    }
    Ok(())
}

pub fn cmd_eval_perturb(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    classifier_only(&model, "eval-perturb")?;
    let data = load_data(&a.data, model.architecture())?;
    let variant: AblationVariant = a.variant.parse()?;
    let explainers: Vec<MethodExplainer> = parse_methods(&a.method)?
        .into_iter()
        .map(|method| MethodExplainer { method, variant: if method == MethodId::Ours { variant } else { AblationVariant::Full } })
        .collect();
    let settings = EvalSettings {
        target: parse_selector(&a.target)?,
        workers: a.workers,
        ..EvalSettings::default()
    };
    let report = perturb_report(&model, &data, &explainers, &settings)?;
    write_perturb(&a.out, Provenance::new("eval-perturb", a.seed, model.config())?, &report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegSummary {
    pub mean_iou: Option<f64>,
    pub kept_queries: usize,
    pub degenerate_masks: usize,
    pub metrics: ApArReport,
}

#[derive(Serialize)]
struct SegOutput {
    provenance: Provenance,
    samples: usize,
    settings: ApSettings,
    target_scale: usize,
    methods: BTreeMap<String, SegSummary>,
}

#[derive(Serialize)]
struct MaskIndexEntry {
    sample: usize,
    query: usize,
    class: usize,
    probability: f64,
    degenerate: bool,
    file: String,
}

fn seg_methods(
    model: &Model,
    data: &[SyntheticSample],
    runs: &[(MethodId, AblationVariant)],
    workers: usize,
    out: &Path,
) -> Result<BTreeMap<String, SegSummary>> {
    let gts: Vec<_> = data
        .iter()
        .map(|s| s.as_detection().map(ground_truth))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Config("segmentation needs detection samples".into()))?;
    let settings = ApSettings::default();
    let mut methods = BTreeMap::new();
    for &(method, variant) in runs {
        let sets = segment_dataset(model, data, method, variant, DEFAULT_TARGET_SCALE, workers)?;
        let name = sets.first().map(|s| s.method.clone()).unwrap_or_else(|| method.to_string());
        let dir = out.join("masks").join(name.replace('/', "-"));
        create_dir(&dir)?;
        let mut index = Vec::new();
        for (k, set) in sets.iter().enumerate() {
            let (rows, cols) = set.geometry.original;
            for m in &set.masks {
                let file = format!("s{k:04}_q{}.pgm", m.query);
                write_pgm(&dir.join(&file), rows, cols, &mask_pixels(&m.mask))?;
                index.push(MaskIndexEntry {
                    sample: k,
                    query: m.query,
                    class: m.class,
                    probability: m.probability,
                    degenerate: m.degenerate,
                    file,
                });
            }
        }
        write_json(&dir.join("index.json"), &index)?;
        let summary = SegSummary {
            mean_iou: mean_object_iou(&sets, &gts)?,
            kept_queries: sets.iter().map(|s| s.masks.len()).sum(),
            degenerate_masks: sets.iter().flat_map(|s| &s.masks).filter(|m| m.degenerate).count(),
            metrics: ap_ar(&sets, &gts, &settings)?,
        };
        methods.insert(name, summary);
    }
    Ok(methods)
}

fn write_seg(out: &Path, provenance: Provenance, samples: usize, methods: BTreeMap<String, SegSummary>) -> Result<()> {
    for (name, s) in &methods {
        println!(
            "{name:<32} iou {:>7.4}  ap {:>7.4}  ar {:>7.4}",
            s.mean_iou.unwrap_or(f64::NAN),
            s.metrics.all.ap.unwrap_or(f64::NAN),
            s.metrics.all.ar.unwrap_or(f64::NAN)
        );
    }
    write_json(
        &out.join("report.json"),
        &SegOutput {
            provenance,
            samples,
            settings: ApSettings::default(),
            target_scale: DEFAULT_TARGET_SCALE,
            methods,
        },
    )
}

pub fn cmd_eval_seg(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    if model.architecture() != Architecture::EncoderDecoder {
        return Err(Error::Config(format!(
            "eval-seg needs a detection model, got {}",
            model.architecture()
        )));
    }
    let data = load_data(&a.data, model.architecture())?;
    let variant: AblationVariant = a.variant.parse()?;
    let runs: Vec<_> = parse_methods(&a.method)?
        .into_iter()
        .map(|m| (m, if m == MethodId::Ours { variant } else { AblationVariant::Full }))
        .collect();
    create_dir(&a.out)?;
    let methods = seg_methods(&model, &data, &runs, a.workers, &a.out)?;
    write_seg(&a.out, Provenance::new("eval-seg", a.seed, model.config())?, data.len(), methods)
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let data = load_data(&a.data, model.architecture())?;
    let provenance = Provenance::new("ablate", a.seed, model.config())?;
    create_dir(&a.out)?;
    if model.architecture().is_classifier() {
        let explainers: Vec<MethodExplainer> = AblationVariant::ALL
            .into_iter()
            .map(|variant| MethodExplainer {
                method: MethodId::Ours,
                variant,
            })
            .collect();
        let settings = EvalSettings {
            workers: a.workers,
            ..EvalSettings::default()
        };
        let report = perturb_report(&model, &data, &explainers, &settings)?;
        write_perturb(&a.out, provenance, &report)
    } else {
        let runs: Vec<_> = AblationVariant::ALL.into_iter().map(|v| (MethodId::Ours, v)).collect();
        let methods = seg_methods(&model, &data, &runs, a.workers, &a.out)?;
        write_seg(&a.out, provenance, data.len(), methods)
    }
}
