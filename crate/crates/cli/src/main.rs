use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use reid_forge::data::{load_manifest, make_query_gallery_split, save_manifest, DatasetManifest};
use reid_forge::detection::{self, Detection};
use reid_forge::eval::{self, EvalReport, Protocol};
use reid_forge::synth::{generate_dataset, load_images, SynthConfig};
use reid_forge::tensor::Tensor;
use reid_forge::trainer::{
    self, evaluate_checkpoint, ground_truth_parts, loss_log_csv, parts_from_detections, Checkpoint, EvalOptions,
    FeatureKind, PartBoxes, PartSource, TrainConfig, Variant,
};

#[derive(Parser)]
#[command(
    name = "reid-forge",
    version,
    about = "Synthetic vehicle re-identification: data, training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-parts dataset.
    Generate(GenerateArgs),
    /// Tag test records as query or gallery.
    Split(SplitArgs),
    /// Train a model on the train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the query/gallery split.
    Evaluate(EvaluateArgs),
    /// Run or score part detections against ground-truth boxes.
    DetectEval(DetectEvalArgs),
    /// Build and score a two-alternative forced-choice benchmark.
    Afc(AfcArgs),
    /// Summarize evaluation reports as a table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON synthetic-data config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_identities: Option<usize>,
    #[arg(long)]
    images_per_identity: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    query_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    decay_start: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Pool over ground-truth part boxes (the default).
    #[arg(long, conflicts_with = "detector_parts")]
    gt_parts: bool,
    /// Pool over boxes from the baseline part detector.
    #[arg(long)]
    detector_parts: bool,
    /// Train one multi-task+dp model per swept γ and report each.
    #[arg(long)]
    gamma_sweep: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PartArgs {
    /// Use the manifest's ground-truth part boxes.
    #[arg(long, conflicts_with = "detections")]
    gt_parts: bool,
    /// Detections file (JSON lines) providing part boxes.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long, default_value_t = detection::DEFAULT_CONF_THRESHOLD)]
    conf_thr: f64,
    #[arg(long, default_value_t = detection::DEFAULT_TOP_K)]
    top_k: usize,
}

impl PartArgs {
    fn load(&self, manifest: &DatasetManifest) -> Result<Option<PartBoxes>> {
        if self.gt_parts {
            return Ok(Some(ground_truth_parts(manifest)));
        }
        match &self.detections {
            Some(path) => {
                let dets = detection::load_detections(path)?;
                Ok(Some(parts_from_detections(&dets, self.conf_thr, self.top_k)))
            }
            None => Ok(None),
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "average")]
    feature: FeatureKind,
    #[command(flatten)]
    parts: PartArgs,
    /// γ for the weighted feature; defaults to the checkpoint's training value.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    cross_camera_only: bool,
    /// Rank on unit-length embeddings.
    #[arg(long)]
    l2_normalize: bool,
    #[arg(long, default_value_t = 20)]
    max_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectEvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Score this detections file instead of running the baseline detector.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long, default_value_t = detection::DEFAULT_CONF_THRESHOLD)]
    conf_thr: f64,
    #[arg(long, default_value_t = detection::DEFAULT_NMS_THRESHOLD)]
    nms_thr: f64,
    #[arg(long, default_value_t = detection::DEFAULT_IOU_THRESHOLD)]
    iou_thr: f64,
    /// Only score records with this split tag (e.g. "gallery").
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AfcArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    allow_fewer: bool,
    #[arg(long, default_value = "average")]
    feature: FeatureKind,
    #[command(flatten)]
    parts: PartArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation report JSON files.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::DetectEval(a) => detect_eval(a),
        Command::Afc(a) => afc(a),
        Command::Report(a) => report(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<Tensor>)> {
    let manifest = load_manifest(path)?;
    let images = load_images(&manifest, &base_dir(path))?;
    Ok((manifest, images))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = a.n_identities {
        cfg.n_identities = n;
        cfg.n_train_identities = cfg.n_train_identities.min(n);
    }
    if let Some(n) = a.images_per_identity {
        cfg.images_per_identity = n;
    }
    let ds = generate_dataset(&cfg, a.seed)?;
    out_dir(&a.out)?;
    ds.write(&a.out)?;
    write_json(&a.out.join("synth_config.json"), &cfg)?;
    println!("wrote {} records to {}", ds.manifest.len(), a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let mut manifest = make_query_gallery_split(&load_manifest(&a.manifest)?, a.query_fraction, a.seed)?;
    out_dir(&a.out)?;
    // Keep tensor references valid from the new manifest location.
    let src = fs::canonicalize(base_dir(&a.manifest)).context("resolving manifest directory")?;
    let dst = fs::canonicalize(&a.out)?;
    if src != dst {
        for r in &mut manifest.records {
            r.tensor_ref = src.join(&r.tensor_ref).to_string_lossy().into_owned();
        }
    }
    save_manifest(&a.out.join("manifest.jsonl"), &manifest)?;
    let count = |tag| manifest.indices_of(tag).len();
    use reid_forge::data::SplitTag::*;
    println!(
        "train {}, query {}, gallery {}",
        count(Train),
        count(Query),
        count(Gallery)
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
        cfg.decay_start = cfg.decay_start.min(e);
    }
    if let Some(d) = a.decay_start {
        cfg.decay_start = d;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(g) = a.gamma {
        cfg.gamma = g;
    }
    if a.gt_parts {
        cfg.part_source = PartSource::GroundTruth;
    }
    if a.detector_parts {
        cfg.part_source = PartSource::Detector;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let (manifest, images) = load_dataset(&a.manifest)?;
    out_dir(&a.out)?;
    write_json(&a.out.join("train_config.json"), &cfg)?;
    if a.gamma_sweep {
        let parts = ground_truth_parts(&manifest);
        let reports = trainer::gamma_sweep(
            &manifest,
            &images,
            &cfg,
            &trainer::GAMMA_SWEEP,
            &parts,
            &EvalOptions::default(),
        )?;
        for (gamma, r) in &reports {
            println!("gamma {gamma}: mAP {:.4} CMC-1 {:.4}", r.map, r.cmc_at(1));
            write_json(&a.out.join(format!("eval_gamma_{gamma}.json")), r)?;
        }
        return Ok(());
    }
    let outcome = trainer::train_with(&manifest, &images, &cfg, |e| {
        println!("epoch {:>3} lr {:.2e} loss {:.5}", e.epoch, e.lr, e.report.combined);
    })?;
    outcome.checkpoint.save(&a.out.join("checkpoint.rfck"))?;
    write_text(&a.out.join("loss_log.csv"), &loss_log_csv(&outcome.log))?;
    Ok(())
}

fn eval_options(feature: FeatureKind, gamma: Option<f64>, ckpt: &Checkpoint) -> EvalOptions {
    EvalOptions {
        feature,
        gamma: gamma.unwrap_or(ckpt.config.gamma),
        ..EvalOptions::default()
    }
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (manifest, images) = load_dataset(&a.manifest)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let parts = a.parts.load(&manifest)?;
    let opts = EvalOptions {
        protocol: Protocol {
            cross_camera_only: a.cross_camera_only,
        },
        max_k: a.max_k,
        l2_normalize: a.l2_normalize,
        ..eval_options(a.feature, a.gamma, &ckpt)
    };
    let report = evaluate_checkpoint(&ckpt.model, &manifest, &images, parts.as_ref(), &opts)?;
    out_dir(&a.out)?;
    write_json(&a.out.join("eval.json"), &report)?;
    write_text(&a.out.join("cmc.csv"), &report.cmc_csv())?;
    if let Some(csv) = report.type_confusion_csv() {
        write_text(&a.out.join("type_confusion.csv"), &csv)?;
    }
    println!(
        "{}: mAP {:.4} CMC-1 {:.4} CMC-5 {:.4} (chance CMC-1 {:.4})",
        report.feature,
        report.map,
        report.cmc_at(1),
        report.cmc.get(4).copied().unwrap_or(f64::NAN),
        report.chance_cmc1
    );
    Ok(())
}

fn detect_eval(a: DetectEvalArgs) -> Result<()> {
    let (manifest, images) = load_dataset(&a.manifest)?;
    let selected: Vec<usize> = match &a.split {
        None => (0..manifest.len()).collect(),
        Some(tag) => {
            let tag = serde_json::from_value(serde_json::Value::String(tag.clone()))
                .with_context(|| format!("unknown split tag {tag:?}"))?;
            manifest.indices_of(tag)
        }
    };
    out_dir(&a.out)?;
    let dets: BTreeMap<String, Vec<Detection>> = match &a.detections {
        Some(p) => detection::load_detections(p)?,
        None => {
            let cfg = detection::DetectorConfig::default();
            let mut all = BTreeMap::new();
            for &i in &selected {
                let raw = detection::baseline_part_detector(&images[i], &cfg)?;
                all.insert(manifest.records[i].image_id.clone(), detection::nms(&raw, a.nms_thr));
            }
            detection::save_detections(&a.out.join("detections.jsonl"), &all)?;
            all
        }
    };
    let mut preds = Vec::with_capacity(selected.len());
    let mut gts = Vec::with_capacity(selected.len());
    for &i in &selected {
        let r = &manifest.records[i];
        let d = dets
            .get(&r.image_id)
            .with_context(|| format!("no detections for image {}", r.image_id))?;
        preds.push(d.clone());
        gts.push(r.parts.clone());
    }
    let metrics = detection::detection_metrics(&preds, &gts, a.conf_thr, a.iou_thr)?;
    write_json(&a.out.join("detection.json"), &metrics)?;
    println!(
        "precision {:.4} recall {:.4} F {:.4}",
        metrics.precision, metrics.recall, metrics.f_score
    );
    Ok(())
}

#[derive(Serialize)]
struct AfcResult {
    accuracy: f64,
    n_trials: usize,
    trials: Vec<eval::AfcTrial>,
}

fn afc(a: AfcArgs) -> Result<()> {
    let (manifest, images) = load_dataset(&a.manifest)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let parts = a.parts.load(&manifest)?;
    let trials = eval::make_2afc_benchmark(&manifest, a.trials, a.seed, a.allow_fewer)?;
    if trials.is_empty() {
        bail!("no feasible 2AFC trials");
    }
    let opts = eval_options(a.feature, None, &ckpt);
    let index: BTreeMap<&str, usize> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.as_str(), i))
        .collect();
    let embed = |id: &str| {
        let emb = trainer::embed(&ckpt.model, &manifest, &images, &[index[id]], parts.as_ref(), &opts)?;
        Ok(emb.embeddings.row(0).to_vec())
    };
    let accuracy = eval::score_2afc(embed, &trials)?;
    let n_trials = trials.len();
    out_dir(&a.out)?;
    write_json(
        &a.out.join("afc.json"),
        &AfcResult {
            accuracy,
            n_trials,
            trials,
        },
    )?;
    println!("2AFC accuracy {accuracy:.4} over {n_trials} trials");
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut csv = String::from("report,feature,map,cmc1,cmc5,cmc10,chance_cmc1\n");
    let mut md = String::from("| report | feature | mAP | CMC-1 | CMC-5 | CMC-10 |\n|---|---|---|---|---|---|\n");
    for path in &a.reports {
        let r: EvalReport = read_json(path)?;
        let at = |k: usize| r.cmc.get(k - 1).copied().unwrap_or(f64::NAN);
        let name = path.display();
        csv.push_str(&format!(
            "{name},{},{},{},{},{},{}\n",
            r.feature,
            r.map,
            at(1),
            at(5),
            at(10),
            r.chance_cmc1
        ));
        md.push_str(&format!(
            "| {name} | {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
            r.feature,
            100.0 * r.map,
            100.0 * at(1),
            100.0 * at(5),
            100.0 * at(10)
        ));
    }
    out_dir(&a.out)?;
    write_text(&a.out.join("summary.csv"), &csv)?;
    write_text(&a.out.join("summary.md"), &md)?;
    print!("{md}");
    Ok(())
}
