//! Part detection post-processing, a texture-energy baseline detector and
//! detection precision/recall.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.4;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Contract(format!("score {score} outside [0, 1]")));
        }
        if !bbox.is_valid() {
            return Err(Error::Contract(format!("invalid box {bbox:?}")));
        }
        Ok(Detection { bbox, score })
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Indices sorted by descending score, ties by ascending index.
fn by_score(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    order
}

/// Greedy non-maximum suppression. A detection is dropped when its IoU with
/// an already kept one exceeds `threshold`. Output is in descending score.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_score(dets) {
        if kept.iter().all(|k| iou(&k.bbox, &dets[i].bbox) <= threshold) {
            kept.push(dets[i]);
        }
    }
    kept
}

/// Drops detections below `confidence_threshold` and keeps the `k`
/// highest-scoring boxes.
pub fn select_parts(dets: &[Detection], confidence_threshold: f64, k: usize) -> Vec<BoundingBox> {
    by_score(dets)
        .into_iter()
        .filter(|&i| dets[i].score >= confidence_threshold)
        .take(k)
        .map(|i| dets[i].bbox)
        .collect()
}

/// Parameters of [`baseline_part_detector`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Absolute floor on the texture energy.
    pub energy_floor: f64,
    /// Fraction of the image's peak energy a pixel must reach.
    pub relative_threshold: f64,
    pub min_side: usize,
    pub max_aspect: f64,
    pub min_fill: f64,
    /// Energy at which the score reaches 1 − 1/e.
    pub score_scale: f64,
    /// Half-width of the box filter applied to the directional energies.
    pub smooth_radius: usize,
    /// Pixels trimmed from each side of a component's bounding box to undo
    /// the outward bleed of the filters.
    pub shrink: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            energy_floor: 0.2,
            relative_threshold: 0.2,
            min_side: 5,
            max_aspect: 2.5,
            min_fill: 0.55,
            score_scale: 1.5,
            smooth_radius: 1,
            shrink: 1,
        }
    }
}

/// Per-pixel texture energy: the smaller of the horizontal and vertical
/// second-difference energies (summed over channels), each box-smoothed with
/// half-width `radius`. A straight edge only excites one direction, so body outlines score
/// near zero while isotropic part textures score high.
pub fn texture_energy(image: &Tensor, radius: usize) -> Result<Vec<f64>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("detector expects C×H×W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let px = |ch: usize, y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        image.data()[(ch * h + y) * w + x]
    };
    let mut ex = vec![0.0; h * w];
    let mut ey = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut sx, mut sy) = (0.0, 0.0);
            for ch in 0..c {
                let p2 = 2.0 * px(ch, y, x);
                let dxx = p2 - px(ch, y, x - 1) - px(ch, y, x + 1);
                let dyy = p2 - px(ch, y - 1, x) - px(ch, y + 1, x);
                sx += dxx * dxx;
                sy += dyy * dyy;
            }
            let i = y as usize * w + x as usize;
            ex[i] = sx;
            ey[i] = sy;
        }
    }
    let smooth = |raw: &[f64]| {
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                let r = radius as isize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        acc += raw[yy * w + xx];
                    }
                }
                out[y as usize * w + x as usize] = acc / ((2 * r + 1) * (2 * r + 1)) as f64;
            }
        }
        out
    };
    let (sx, sy) = (smooth(&ex), smooth(&ey));
    Ok(sx.iter().zip(&sy).map(|(a, b)| a.min(*b)).collect())
}

/// Finds compact high-frequency regions. Each surviving 4-connected region
/// of above-threshold energy becomes one box; its score is
/// `1 − exp(−mean_energy / score_scale)`.
pub fn baseline_part_detector(image: &Tensor, cfg: &DetectorConfig) -> Result<Vec<Detection>> {
    let energy = texture_energy(image, cfg.smooth_radius)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let peak = energy.iter().cloned().fold(0.0, f64::max);
    let threshold = cfg.energy_floor.max(cfg.relative_threshold * peak);
    if peak <= cfg.energy_floor {
        return Ok(Vec::new());
    }
    let mask: Vec<bool> = energy.iter().map(|&e| e > threshold).collect();
    let mut label = vec![usize::MAX; h * w];
    let mut dets = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = start;
        label[start] = id;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let (mut count, mut total) = (0usize, 0.0);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            count += 1;
            total += energy[p];
            let mut visit = |q: usize| {
                if mask[q] && label[q] == usize::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        let (bw, bh) = (x1 + 1 - x0, y1 + 1 - y0);
        let fill = count as f64 / (bw * bh) as f64;
        let aspect = bw.max(bh) as f64 / bw.min(bh) as f64;
        let min_span = cfg.min_side.max(1) + 2 * cfg.shrink;
        if bw < min_span || bh < min_span || aspect > cfg.max_aspect || fill < cfg.min_fill {
            continue;
        }
        let s = cfg.shrink;
        let bbox = BoundingBox::new(
            (x0 + s) as f64,
            (y0 + s) as f64,
            (x1 + 1 - s) as f64,
            (y1 + 1 - s) as f64,
        )?;
        let score = 1.0 - (-(total / count as f64) / cfg.score_scale).exp();
        dets.push(Detection { bbox, score });
    }
    Ok(dets)
}

/// Full post-processing chain used to produce pooling boxes for one image.
pub fn detect_parts(
    image: &Tensor,
    cfg: &DetectorConfig,
    nms_threshold: f64,
    conf_threshold: f64,
    k: usize,
) -> Result<Vec<BoundingBox>> {
    let raw = baseline_part_detector(image, cfg)?;
    Ok(select_parts(&nms(&raw, nms_threshold), conf_threshold, k))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub totals: MatchCounts,
    pub per_image: Vec<MatchCounts>,
}

/// Greedy one-to-one matching for one image: predictions in descending
/// score claim the unmatched ground truth with the highest IoU (ties to the
/// lower index) when that IoU is at least `iou_threshold`.
pub fn match_image(preds: &[Detection], gts: &[BoundingBox], conf_threshold: f64, iou_threshold: f64) -> MatchCounts {
    let mut used = vec![false; gts.len()];
    let mut counts = MatchCounts::default();
    for i in by_score(preds) {
        if preds[i].score < conf_threshold {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] {
                continue;
            }
            let v = iou(&preds[i].bbox, gt);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                used[g] = true;
                counts.tp += 1;
            }
            None => counts.fp += 1,
        }
    }
    counts.fn_ = used.iter().filter(|u| !**u).count();
    counts
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Pooled precision, recall and F-score over all images; 0/0 is 0.
pub fn detection_metrics(
    preds: &[Vec<Detection>],
    gts: &[Vec<BoundingBox>],
    conf_threshold: f64,
    iou_threshold: f64,
) -> Result<DetectionMetrics> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} prediction lists for {} images",
            preds.len(),
            gts.len()
        )));
    }
    let per_image: Vec<MatchCounts> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| match_image(p, g, conf_threshold, iou_threshold))
        .collect();
    let totals = per_image.iter().fold(MatchCounts::default(), |a, c| MatchCounts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    let precision = ratio(totals.tp, totals.tp + totals.fp);
    let recall = ratio(totals.tp, totals.tp + totals.fn_);
    let f_score = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(DetectionMetrics {
        precision,
        recall,
        f_score,
        totals,
        per_image,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoredBox {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionLine {
    image_id: String,
    boxes: Vec<ScoredBox>,
}

/// Detections file: one JSON object per line, `{image_id, boxes: [{box, score}]}`.
pub fn detections_to_jsonl(items: &BTreeMap<String, Vec<Detection>>) -> String {
    let mut out = String::new();
    for (image_id, dets) in items {
        let line = DetectionLine {
            image_id: image_id.clone(),
            boxes: dets
                .iter()
                .map(|d| ScoredBox {
                    bbox: [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max],
                    score: d.score,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("detections serialize"));
        out.push('\n');
    }
    out
}

pub fn detections_from_jsonl(text: &str) -> Result<BTreeMap<String, Vec<Detection>>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse { line: i + 1, message };
        let l: DetectionLine = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        let dets = l
            .boxes
            .into_iter()
            .map(|b| {
                let [x0, y0, x1, y1] = b.bbox;
                BoundingBox::new(x0, y0, x1, y1).and_then(|bb| Detection::new(bb, b.score))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| parse(e.to_string()))?;
        out.insert(l.image_id, dets);
    }
    Ok(out)
}

pub fn load_detections(path: &Path) -> Result<BTreeMap<String, Vec<Detection>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    detections_from_jsonl(&text)
}

pub fn save_detections(path: &Path, items: &BTreeMap<String, Vec<Detection>>) -> Result<()> {
    fs::write(path, detections_to_jsonl(items)).map_err(|e| Error::io(path, e))
}
