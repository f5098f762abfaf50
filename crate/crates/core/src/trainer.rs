//! Training loop, model variants, checkpoints and checkpoint evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, DatasetManifest, ImageRecord, SplitTag};
use crate::detection::{self, Detection, DetectorConfig};
use crate::eval::{self, AttributePrediction, EvalReport, ItemMeta, Protocol};
use crate::losses::{self, LossReport, TermWeights, WeightMatrix};
use crate::synth::AugmentOp;
use crate::tensor::{
    backpropagate, decode_tensor, encode_tensor, AdamConfig, AdamState, BackboneConfig, BnMode, HeadSizes, LrSchedule,
    Model, ModelConfig, Tape, Tensor, Var,
};
use crate::{rng, Error, Result};

pub use crate::losses::contrastive_loss;

/// Loss configurations of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "triplet-only")]
    TripletOnly,
    #[serde(rename = "contrastive-only")]
    ContrastiveOnly,
    #[serde(rename = "id-only")]
    IdOnly,
    #[serde(rename = "triplet+id")]
    TripletId,
    #[serde(rename = "multi-task")]
    MultiTask,
    #[serde(rename = "multi-task+dp")]
    MultiTaskDp,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::TripletOnly,
        Variant::ContrastiveOnly,
        Variant::IdOnly,
        Variant::TripletId,
        Variant::MultiTask,
        Variant::MultiTaskDp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TripletOnly => "triplet-only",
            Variant::ContrastiveOnly => "contrastive-only",
            Variant::IdOnly => "id-only",
            Variant::TripletId => "triplet+id",
            Variant::MultiTask => "multi-task",
            Variant::MultiTaskDp => "multi-task+dp",
        }
    }

    pub fn term_weights(self) -> TermWeights {
        let z = TermWeights::zero();
        match self {
            Variant::TripletOnly => TermWeights {
                w_triplet_avg: 1.0,
                ..z
            },
            Variant::ContrastiveOnly => TermWeights {
                w_contrastive: 1.0,
                ..z
            },
            Variant::IdOnly => TermWeights { w_id: 1.0, ..z },
            Variant::TripletId => TermWeights {
                w_triplet_avg: 1.0,
                w_id: 1.0,
                ..z
            },
            Variant::MultiTask => TermWeights::multi_task(),
            Variant::MultiTaskDp => TermWeights::multi_task_dp(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Where the boxes for the part-weighted branch come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartSource {
    #[default]
    GroundTruth,
    Detector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    /// First epoch (1-based) of the exponential learning-rate decay.
    pub decay_start: usize,
    pub lr: f64,
    pub p: usize,
    pub k: usize,
    pub margin: f64,
    pub gamma: f64,
    pub seed: u64,
    /// Per-term overrides of the variant's loss weights.
    pub w_triplet_avg: Option<f64>,
    pub w_triplet_dp: Option<f64>,
    pub w_id: Option<f64>,
    pub w_color: Option<f64>,
    pub w_type: Option<f64>,
    pub w_attr: Option<f64>,
    pub w_contrastive: Option<f64>,
    /// Train the weighted-branch triplet separately: the first half of the
    /// epochs without it, the second half with it alone.
    pub two_phase: bool,
    pub augment: bool,
    pub part_source: PartSource,
    pub detector: DetectorConfig,
    pub conf_thr: f64,
    pub nms_thr: f64,
    pub top_k: usize,
    pub backbone: BackboneConfig,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::MultiTaskDp,
            epochs: 40,
            decay_start: 21,
            lr: 1e-3,
            p: 6,
            k: 4,
            margin: losses::DEFAULT_MARGIN,
            gamma: losses::DEFAULT_GAMMA,
            seed: 0,
            w_triplet_avg: None,
            w_triplet_dp: None,
            w_id: None,
            w_color: None,
            w_type: None,
            w_attr: None,
            w_contrastive: None,
            two_phase: false,
            augment: true,
            part_source: PartSource::GroundTruth,
            detector: DetectorConfig::default(),
            conf_thr: detection::DEFAULT_CONF_THRESHOLD,
            nms_thr: detection::DEFAULT_NMS_THRESHOLD,
            top_k: detection::DEFAULT_TOP_K,
            backbone: BackboneConfig::default(),
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn term_weights(&self) -> TermWeights {
        let base = self.variant.term_weights();
        TermWeights {
            w_triplet_avg: self.w_triplet_avg.unwrap_or(base.w_triplet_avg),
            w_triplet_dp: self.w_triplet_dp.unwrap_or(base.w_triplet_dp),
            w_id: self.w_id.unwrap_or(base.w_id),
            w_color: self.w_color.unwrap_or(base.w_color),
            w_type: self.w_type.unwrap_or(base.w_type),
            w_attr: self.w_attr.unwrap_or(base.w_attr),
            w_contrastive: self.w_contrastive.unwrap_or(base.w_contrastive),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.term_weights().validate()?;
        self.backbone.validate()?;
        if self.epochs == 0 || self.decay_start == 0 || self.decay_start > self.epochs {
            return Err(Error::Config(format!(
                "need 1 ≤ decay_start ≤ epochs, got {} and {}",
                self.decay_start, self.epochs
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite())
            || self.margin.is_nan()
            || self.margin < 0.0
            || self.gamma.is_nan()
            || self.gamma < 1.0
        {
            return Err(Error::Config(format!(
                "invalid lr {}, margin {} or gamma {}",
                self.lr, self.margin, self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "bn_momentum {} outside [0, 1]",
                self.bn_momentum
            )));
        }
        if self.two_phase && self.epochs < 2 {
            return Err(Error::Config("two-phase training needs at least two epochs".into()));
        }
        Ok(())
    }

    fn weights_for_epoch(&self, epoch: usize) -> TermWeights {
        let w = self.term_weights();
        if !self.two_phase {
            return w;
        }
        if epoch < self.epochs.div_ceil(2) {
            TermWeights { w_triplet_dp: 0.0, ..w }
        } else {
            TermWeights {
                w_triplet_dp: w.w_triplet_dp,
                ..TermWeights::zero()
            }
        }
    }

    fn uses_parts(&self) -> bool {
        self.term_weights().w_triplet_dp > 0.0
    }
}

/// Mean loss terms over the batches of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
}

pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut s =
        String::from("epoch,lr,triplet_avg,triplet_weighted,id_ce,color_ce,type_ce,attr_bce,contrastive,combined\n");
    for e in log {
        let r = &e.report;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            e.epoch,
            e.lr,
            r.triplet_avg,
            r.triplet_weighted,
            r.id_ce,
            r.color_ce,
            r.type_ce,
            r.attr_bce,
            r.contrastive,
            r.combined
        ));
    }
    s
}

/// Everything needed to resume training or to evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    /// Epochs completed.
    pub epoch: usize,
    pub config: TrainConfig,
    /// Identity id of each row of the ID classifier.
    pub identity_labels: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model_config: ModelConfig,
    epoch: usize,
    config: TrainConfig,
    identity_labels: Vec<i64>,
    adam_config: AdamConfig,
    adam_step: u64,
    param_names: Vec<String>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RFCK";
const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    /// Layout: magic, u32 version, u64 header length, JSON header, then the
    /// parameter tensors, the Adam first and second moments (in parameter
    /// order) and the BN running mean and variance.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            model_config: self.model.config.clone(),
            epoch: self.epoch,
            config: self.config.clone(),
            identity_labels: self.identity_labels.clone(),
            adam_config: self.adam.config,
            adam_step: self.adam.step,
            param_names: self.model.params.iter().map(|(n, _)| n.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self
            .model
            .params
            .iter()
            .chain(&self.adam.first)
            .chain(&self.adam.second)
            .map(|(_, t)| t);
        for t in tensors {
            encode_tensor(t, &mut out);
        }
        encode_tensor(&Tensor::from_vec(self.model.running_mean.clone()), &mut out);
        encode_tensor(&Tensor::from_vec(self.model.running_var.clone()), &mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut pos = 16 + len;
        let mut next = || -> Result<Tensor> {
            let (t, used) = decode_tensor(&bytes[pos..])?;
            pos += used;
            Ok(t)
        };
        let n = header.param_names.len();
        let mut take = |names: &[String]| -> Result<Vec<(String, Tensor)>> {
            names.iter().map(|name| Ok((name.clone(), next()?))).collect()
        };
        let params = take(&header.param_names)?;
        let first = take(&header.param_names)?;
        let second = take(&header.param_names)?;
        let running_mean = next()?.into_data();
        let running_var = next()?.into_data();
        if pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes in checkpoint",
                bytes.len() - pos
            )));
        }
        let reference = Model::init(header.model_config.clone(), 0)?;
        let c = reference.embedding_dim();
        if reference.params.len() != n
            || reference
                .params
                .iter()
                .zip(&params)
                .any(|((rn, rt), (n, t))| rn != n || rt.shape() != t.shape())
            || running_mean.len() != c
            || running_var.len() != c
        {
            return Err(Error::Format("checkpoint tensors do not match the model config".into()));
        }
        Ok(Checkpoint {
            model: Model {
                config: header.model_config,
                params,
                running_mean,
                running_var,
            },
            adam: AdamState {
                config: header.adam_config,
                step: header.adam_step,
                first,
                second,
            },
            epoch: header.epoch,
            config: header.config,
            identity_labels: header.identity_labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn check_images(manifest: &DatasetManifest, images: &[Tensor]) -> Result<()> {
    if images.len() != manifest.len() {
        return Err(Error::Shape(format!(
            "{} images for {} manifest records",
            images.len(),
            manifest.len()
        )));
    }
    Ok(())
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

/// Model shape for a manifest's train split.
pub fn model_config_for(cfg: &TrainConfig, n_ids: usize) -> ModelConfig {
    ModelConfig {
        backbone: cfg.backbone.clone(),
        heads: HeadSizes {
            n_ids,
            n_colors: crate::data::Color::ALL.len(),
            n_types: crate::data::VehicleType::ALL.len(),
            n_attrs: crate::data::BINARY_ATTRIBUTES.len(),
        },
        bn_momentum: cfg.bn_momentum,
    }
}

pub fn train(manifest: &DatasetManifest, images: &[Tensor], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(manifest, images, cfg, |_| {})
}

/// Trains on the records tagged `train`; `images[i]` belongs to
/// `manifest.records[i]`. `on_epoch` sees each epoch's log as it completes.
pub fn train_with(
    manifest: &DatasetManifest,
    images: &[Tensor],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_images(manifest, images)?;
    let sampler = crate::data::pk_sample_batches(manifest, cfg.p, cfg.k, rng::derive(cfg.seed, &[0x5a3]))?;
    let train_idx = manifest.indices_of(SplitTag::Train);
    let identity_labels: Vec<i64> = {
        let mut ids: Vec<i64> = train_idx.iter().map(|&i| manifest.records[i].identity_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let label_of: BTreeMap<i64, usize> = identity_labels.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let model_config = model_config_for(cfg, identity_labels.len());
    let image_size = images[train_idx[0]].shape()[1];
    let grid = cfg.backbone.grid_size(image_size)?;

    let parts: BTreeMap<usize, Vec<BoundingBox>> = if cfg.uses_parts() {
        train_idx
            .iter()
            .map(|&i| {
                let boxes = match cfg.part_source {
                    PartSource::GroundTruth => manifest.records[i].parts.clone(),
                    PartSource::Detector => {
                        detection::detect_parts(&images[i], &cfg.detector, cfg.nms_thr, cfg.conf_thr, cfg.top_k)?
                    }
                };
                Ok((i, boxes))
            })
            .collect::<Result<_>>()?
    } else {
        BTreeMap::new()
    };

    let mut model = Model::init(model_config, rng::derive(cfg.seed, &[0x10de]))?;
    let mut adam = AdamState::new(AdamConfig::default(), &model.params);
    let schedule = LrSchedule {
        base_lr: cfg.lr,
        decay_start: cfg.decay_start,
        total_epochs: cfg.epochs,
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.at(epoch + 1);
        let weights = cfg.weights_for_epoch(epoch);
        let batches = sampler.epoch(epoch as u64);
        let mut sums = [0.0; 8];
        for (b, batch) in batches.iter().enumerate() {
            let indices = batch.indices();
            let ids = batch.identities();
            let mut batch_images = Vec::with_capacity(indices.len());
            let mut grids = Vec::new();
            for (pos, &i) in indices.iter().enumerate() {
                let op = if cfg.augment {
                    AugmentOp::draw(rng::derive(cfg.seed, &[0xa0, epoch as u64, b as u64, pos as u64]))
                } else {
                    AugmentOp::IDENTITY
                };
                batch_images.push(op.apply(&images[i])?);
                if weights.w_triplet_dp > 0.0 {
                    let boxes: Vec<BoundingBox> =
                        parts[&i].iter().map(|bx| op.apply_box(bx, image_size as f64)).collect();
                    grids.push(losses::build_weight_matrix(&boxes, image_size, grid, cfg.gamma)?);
                }
            }
            let refs: Vec<&Tensor> = batch_images.iter().collect();
            let x = Tensor::stack(&refs)?;
            let w = if grids.is_empty() {
                None
            } else {
                Some(WeightMatrix::stack(&grids)?)
            };
            let records: Vec<&ImageRecord> = indices.iter().map(|&i| &manifest.records[i]).collect();
            let labels = Labels::new(&records, &label_of);
            let contrastive_seed = rng::derive(cfg.seed, &[0xc0, epoch as u64, b as u64]);
            let step = (|| -> Result<LossReport> {
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, x, w.as_ref(), BnMode::Train)?;
                let (loss, report) =
                    loss_terms(&mut tape, &out, &ids, &labels, &weights, cfg.margin, contrastive_seed)?;
                let grads = backpropagate(&tape, loss)?;
                adam.step(&mut model.params, &grads.params(), lr)?;
                if let Some(stats) = &out.batch_stats {
                    model.update_running_stats(stats);
                }
                Ok(report)
            })()
            .map_err(|e| with_context(e, epoch + 1, b))?;
            for (s, v) in sums.iter_mut().zip(step.terms().iter().chain([&step.combined])) {
                *s += v;
            }
        }
        let n = batches.len() as f64;
        let mean = sums.map(|s| s / n);
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            report: LossReport {
                triplet_avg: mean[0],
                triplet_weighted: mean[1],
                id_ce: mean[2],
                color_ce: mean[3],
                type_ce: mean[4],
                attr_bce: mean[5],
                contrastive: mean[6],
                combined: mean[7],
            },
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            adam,
            epoch: cfg.epochs,
            config: cfg.clone(),
            identity_labels,
        },
        log,
    })
}

struct Labels {
    id: Vec<usize>,
    color: Vec<usize>,
    vtype: Vec<usize>,
    flags: Vec<[bool; 4]>,
}

impl Labels {
    fn new(records: &[&ImageRecord], label_of: &BTreeMap<i64, usize>) -> Self {
        Labels {
            id: records.iter().map(|r| label_of[&r.identity_id]).collect(),
            color: records.iter().map(|r| r.attributes.color.index()).collect(),
            vtype: records.iter().map(|r| r.attributes.vtype.index()).collect(),
            flags: records.iter().map(|r| r.attributes.flags()).collect(),
        }
    }
}

/// Records every term the batch supports and combines the weighted ones.
fn loss_terms(
    tape: &mut Tape,
    out: &crate::tensor::ForwardOutput,
    ids: &[i64],
    labels: &Labels,
    weights: &TermWeights,
    margin: f64,
    contrastive_seed: u64,
) -> Result<(Var, LossReport)> {
    let triplet_avg = losses::batch_hard_triplet(tape, out.emb_avg, ids, margin)?;
    let triplet_dp = match out.emb_weighted {
        Some(e) => Some(losses::batch_hard_triplet(tape, e, ids, margin)?),
        None => None,
    };
    let id = losses::cross_entropy(tape, out.id_logits, &labels.id)?;
    let color = losses::cross_entropy(tape, out.color_logits, &labels.color)?;
    let vtype = losses::cross_entropy(tape, out.type_logits, &labels.vtype)?;
    let attr = losses::attribute_bce(tape, out.attr_logits, &labels.flags)?;
    let contrastive = if weights.w_contrastive > 0.0 {
        let (pos, neg) = losses::contrastive_pairs(ids, contrastive_seed)?;
        Some(contrastive_loss(tape, out.emb_avg, &pos, &neg, margin)?)
    } else {
        None
    };
    let terms = [
        Some(triplet_avg),
        triplet_dp,
        Some(id),
        Some(color),
        Some(vtype),
        Some(attr),
        contrastive,
    ];
    let loss = losses::combine_on_tape(tape, &terms, weights)?;
    let value = |v: Option<Var>| v.map_or(Ok(0.0), |v| tape.value(v).item());
    let report = LossReport {
        triplet_avg: value(terms[0])?,
        triplet_weighted: value(terms[1])?,
        id_ce: value(terms[2])?,
        color_ce: value(terms[3])?,
        type_ce: value(terms[4])?,
        attr_bce: value(terms[5])?,
        contrastive: value(terms[6])?,
        combined: tape.value(loss).item()?,
    };
    Ok((loss, report))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    #[default]
    Average,
    Weighted,
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(FeatureKind::Average),
            "weighted" => Ok(FeatureKind::Weighted),
            _ => Err(Error::Config(format!("unknown feature kind {s:?}"))),
        }
    }
}

/// Part boxes for the weighted feature, keyed by image id.
pub type PartBoxes = BTreeMap<String, Vec<BoundingBox>>;

pub fn ground_truth_parts(manifest: &DatasetManifest) -> PartBoxes {
    manifest
        .records
        .iter()
        .map(|r| (r.image_id.clone(), r.parts.clone()))
        .collect()
}

/// Confidence filter and top-k selection over stored detections.
pub fn parts_from_detections(dets: &BTreeMap<String, Vec<Detection>>, conf_thr: f64, top_k: usize) -> PartBoxes {
    dets.iter()
        .map(|(id, d)| (id.clone(), detection::select_parts(d, conf_thr, top_k)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub feature: FeatureKind,
    pub gamma: f64,
    pub protocol: Protocol,
    pub max_k: usize,
    pub batch_size: usize,
    /// Scale each embedding to unit length before ranking.
    pub l2_normalize: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            feature: FeatureKind::Average,
            gamma: losses::DEFAULT_GAMMA,
            protocol: Protocol::default(),
            max_k: 20,
            batch_size: 64,
            l2_normalize: false,
        }
    }
}

/// Eval-mode embeddings and attribute predictions for a set of records.
pub struct Embedded {
    pub embeddings: Tensor,
    pub attributes: Vec<AttributePrediction>,
}

/// Embeds `indices` of the manifest. `parts` must be given for the weighted
/// feature and must cover every embedded image.
pub fn embed(
    model: &Model,
    manifest: &DatasetManifest,
    images: &[Tensor],
    indices: &[usize],
    parts: Option<&PartBoxes>,
    opts: &EvalOptions,
) -> Result<Embedded> {
    check_images(manifest, images)?;
    let dim = model.embedding_dim();
    let mut rows = Vec::with_capacity(indices.len() * dim);
    let mut attributes = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(opts.batch_size.max(1)) {
        let refs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
        let x = Tensor::stack(&refs)?;
        let size = x.shape()[2];
        let weights = match opts.feature {
            FeatureKind::Average => None,
            FeatureKind::Weighted => {
                let parts = parts.ok_or_else(|| {
                    Error::Config("weighted features need part boxes: ground-truth parts or a detections file".into())
                })?;
                let grid = model.config.backbone.grid_size(size)?;
                let grids = chunk
                    .iter()
                    .map(|&i| {
                        let id = &manifest.records[i].image_id;
                        let boxes = parts
                            .get(id)
                            .ok_or_else(|| Error::Config(format!("no part boxes for image {id}")))?;
                        losses::build_weight_matrix(boxes, size, grid, opts.gamma)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(WeightMatrix::stack(&grids)?)
            }
        };
        let (tape, out) = model.infer(x, weights.as_ref())?;
        let emb = match opts.feature {
            FeatureKind::Average => out.emb_avg,
            FeatureKind::Weighted => out.emb_weighted.expect("weights were given"),
        };
        let values = tape.value(emb).data();
        if opts.l2_normalize {
            for row in values.chunks(dim) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                rows.extend(row.iter().map(|v| if norm > 0.0 { v / norm } else { *v }));
            }
        } else {
            rows.extend_from_slice(values);
        }
        let (c, t, a) = (
            tape.value(out.color_logits),
            tape.value(out.type_logits),
            tape.value(out.attr_logits),
        );
        for r in 0..chunk.len() {
            attributes.push(AttributePrediction::from_logits(c.row(r), t.row(r), a.row(r)));
        }
    }
    Ok(Embedded {
        embeddings: Tensor::new(vec![indices.len(), dim], rows)?,
        attributes,
    })
}

/// Retrieval and attribute report over the query/gallery split.
pub fn evaluate_checkpoint(
    model: &Model,
    manifest: &DatasetManifest,
    images: &[Tensor],
    parts: Option<&PartBoxes>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let q_idx = manifest.indices_of(SplitTag::Query);
    let g_idx = manifest.indices_of(SplitTag::Gallery);
    if q_idx.is_empty() || g_idx.is_empty() {
        return Err(Error::Protocol("manifest has no query/gallery split".into()));
    }
    let q = embed(model, manifest, images, &q_idx, parts, opts)?;
    let g = embed(model, manifest, images, &g_idx, parts, opts)?;
    let meta = |idx: &[usize]| -> Vec<ItemMeta> { idx.iter().map(|&i| ItemMeta::from(&manifest.records[i])).collect() };
    let (qm, gm) = (meta(&q_idx), meta(&g_idx));
    let dist = eval::distance_matrix(&q.embeddings, &g.embeddings)?;
    let map = eval::compute_map(&dist, &qm, &gm, opts.protocol)?;
    let cmc = eval::compute_cmc(&dist, &qm, &gm, opts.max_k.min(g_idx.len()), opts.protocol)?;
    let predictions: Vec<AttributePrediction> = q.attributes.into_iter().chain(g.attributes).collect();
    let labels: Vec<_> = q_idx
        .iter()
        .chain(&g_idx)
        .map(|&i| manifest.records[i].attributes)
        .collect();
    let attributes = eval::attribute_eval(&predictions, &labels)?;
    Ok(EvalReport {
        feature: match opts.feature {
            FeatureKind::Average => "average".into(),
            FeatureKind::Weighted => "weighted".into(),
        },
        n_query: q_idx.len(),
        n_gallery: g_idx.len(),
        map,
        cmc,
        chance_cmc1: eval::chance_cmc1(&qm, &gm).0,
        attributes: Some(attributes),
        detection: None,
    })
}

/// Trains one multi-task+dp model per γ and reports its weighted feature.
pub fn gamma_sweep(
    manifest: &DatasetManifest,
    images: &[Tensor],
    base: &TrainConfig,
    gammas: &[f64],
    parts: &PartBoxes,
    opts: &EvalOptions,
) -> Result<Vec<(f64, EvalReport)>> {
    gammas
        .iter()
        .map(|&gamma| {
            let cfg = TrainConfig {
                variant: Variant::MultiTaskDp,
                gamma,
                ..base.clone()
            };
            let outcome = train(manifest, images, &cfg)?;
            let opts = EvalOptions {
                feature: FeatureKind::Weighted,
                gamma,
                ..opts.clone()
            };
            Ok((
                gamma,
                evaluate_checkpoint(&outcome.checkpoint.model, manifest, images, Some(parts), &opts)?,
            ))
        })
        .collect()
}

/// Values of γ swept in the ablation.
pub const GAMMA_SWEEP: [f64; 5] = [1.1, 1.3, 1.5, 1.7, 1.9];
