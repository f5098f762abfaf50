//! Re-identification losses and the part-weighted pooling grid.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;
use crate::tensor::{Tape, Tensor, Var};
use crate::{rng, Error, Result};

/// Default triplet margin.
pub const DEFAULT_MARGIN: f64 = 0.3;
/// Default part weight.
pub const DEFAULT_GAMMA: f64 = 1.3;

/// Per-cell pooling weights over the feature grid: `gamma` for cells whose
/// center falls inside a part box, 1 elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    pub rows: usize,
    pub cols: usize,
    pub gamma: f64,
    pub grid: Vec<f64>,
}

impl WeightMatrix {
    pub fn uniform(grid_size: usize) -> Self {
        WeightMatrix {
            rows: grid_size,
            cols: grid_size,
            gamma: 1.0,
            grid: vec![1.0; grid_size * grid_size],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.cols + col]
    }

    /// Stacks per-image grids into an N×H×W tensor for `weighted_pool`.
    pub fn stack(items: &[WeightMatrix]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::Shape("no weight matrices".into()))?;
        let mut data = Vec::with_capacity(items.len() * first.grid.len());
        for w in items {
            if (w.rows, w.cols) != (first.rows, first.cols) {
                return Err(Error::Shape("weight matrices of different sizes".into()));
            }
            data.extend_from_slice(&w.grid);
        }
        Tensor::new(vec![items.len(), first.rows, first.cols], data)
    }
}

pub fn build_weight_matrix(
    boxes: &[BoundingBox],
    image_size: usize,
    grid_size: usize,
    gamma: f64,
) -> Result<WeightMatrix> {
    if grid_size == 0 || !image_size.is_multiple_of(grid_size) {
        return Err(Error::Config(format!(
            "grid {grid_size} does not evenly tile image {image_size}"
        )));
    }
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma {gamma} must be finite and at least 1")));
    }
    if let Some(b) = boxes
        .iter()
        .find(|b| !b.fits_within(image_size as f64, image_size as f64))
    {
        return Err(Error::Contract(format!(
            "box {b:?} outside {image_size}x{image_size} image"
        )));
    }
    let stride = (image_size / grid_size) as f64;
    let mut grid = vec![1.0; grid_size * grid_size];
    for r in 0..grid_size {
        for c in 0..grid_size {
            let (cx, cy) = ((c as f64 + 0.5) * stride, (r as f64 + 0.5) * stride);
            if boxes.iter().any(|b| b.contains(cx, cy)) {
                grid[r * grid_size + c] = gamma;
            }
        }
    }
    Ok(WeightMatrix {
        rows: grid_size,
        cols: grid_size,
        gamma,
        grid,
    })
}

fn check_batch_identities(ids: &[i64]) -> Result<()> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &id in ids {
        *counts.entry(id).or_default() += 1;
    }
    if let Some((id, _)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::Contract(format!(
            "identity {id} has a single entry: no positive"
        )));
    }
    if counts.len() < 2 {
        return Err(Error::Contract("batch holds a single identity: no negative".into()));
    }
    Ok(())
}

/// Hardest positive and hardest negative for every anchor, by Euclidean
/// distance over a row-major B×B matrix. Ties go to the lower index.
pub fn hard_pairs(dist: &[f64], ids: &[i64]) -> Vec<(usize, usize)> {
    let b = ids.len();
    (0..b)
        .map(|a| {
            let row = &dist[a * b..(a + 1) * b];
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..b {
                if j == a {
                    continue;
                }
                if ids[j] == ids[a] {
                    if pos.is_none_or(|p| row[j] > row[p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|n| row[j] < row[n]) {
                    neg = Some(j);
                }
            }
            (pos.expect("positive exists"), neg.expect("negative exists"))
        })
        .collect()
}

/// Batch-hard triplet loss:
/// `mean_a max(0, margin + max_p d(a,p) − min_n d(a,n))`.
pub fn batch_hard_triplet(tape: &mut Tape, embeddings: Var, ids: &[i64], margin: f64) -> Result<Var> {
    let shape = tape.value(embeddings).shape().to_vec();
    if shape.len() != 2 || shape[0] != ids.len() {
        return Err(Error::Shape(format!("embeddings {shape:?} with {} ids", ids.len())));
    }
    check_batch_identities(ids)?;
    let b = ids.len();
    let sq = tape.pairwise_sq_distances(embeddings)?;
    let dist = tape.sqrt(sq)?;
    let pairs = hard_pairs(tape.value(dist).data(), ids);
    let pos_idx: Vec<usize> = pairs.iter().enumerate().map(|(a, (p, _))| a * b + p).collect();
    let neg_idx: Vec<usize> = pairs.iter().enumerate().map(|(a, (_, n))| a * b + n).collect();
    let dap = tape.gather(dist, &pos_idx)?;
    let dan = tape.gather(dist, &neg_idx)?;
    let diff = tape.sub(dap, dan)?;
    let shifted = tape.add_scalar(diff, margin)?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

/// Multi-class cross entropy (ID, color or vehicle type heads).
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Binary cross entropy over the four binary attribute logits (B×4).
pub fn attribute_bce(tape: &mut Tape, logits: Var, labels: &[[bool; 4]]) -> Result<Var> {
    let shape = tape.value(logits).shape();
    if shape != [labels.len(), 4] {
        return Err(Error::Shape(format!(
            "attribute logits {shape:?} for {} samples",
            labels.len()
        )));
    }
    let flat: Vec<bool> = labels.iter().flat_map(|l| l.iter().copied()).collect();
    tape.sigmoid_bce(logits, &flat)
}

/// Index pairs into a batch.
pub type Pairs = Vec<(usize, usize)>;

/// Pairs used by the contrastive baseline: every same-identity pair plus an
/// equal number of sampled different-identity pairs.
pub fn contrastive_pairs(ids: &[i64], seed: u64) -> Result<(Pairs, Pairs)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            if ids[i] == ids[j] {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    if pos.is_empty() {
        return Err(Error::Contract("no positive pairs in batch".into()));
    }
    neg.shuffle(&mut rng::rng_from(rng::derive(seed, &[0xc0])));
    neg.truncate(pos.len());
    Ok((pos, neg))
}

/// Contrastive loss over explicit pairs: mean of `d²` over positives and
/// `max(0, margin − d)²` over negatives.
pub fn contrastive_loss(
    tape: &mut Tape,
    embeddings: Var,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
    margin: f64,
) -> Result<Var> {
    if positives.is_empty() {
        return Err(Error::Contract("no positive pairs".into()));
    }
    let b = tape.value(embeddings).shape()[0];
    let sq = tape.pairwise_sq_distances(embeddings)?;
    let pos_idx: Vec<usize> = positives.iter().map(|&(i, j)| i * b + j).collect();
    let pos = tape.gather(sq, &pos_idx)?;
    let mut total = tape.sum(pos)?;
    if !negatives.is_empty() {
        let dist = tape.sqrt(sq)?;
        let neg_idx: Vec<usize> = negatives.iter().map(|&(i, j)| i * b + j).collect();
        let d = tape.gather(dist, &neg_idx)?;
        let flipped = tape.scale(d, -1.0)?;
        let gap = tape.add_scalar(flipped, margin)?;
        let hinge = tape.relu(gap)?;
        let hinge_sq = tape.mul(hinge, hinge)?;
        let neg_sum = tape.sum(hinge_sq)?;
        total = tape.add(total, neg_sum)?;
    }
    tape.scale(total, 1.0 / (positives.len() + negatives.len()) as f64)
}

/// Per-term weights of the combined objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub w_triplet_avg: f64,
    pub w_triplet_dp: f64,
    pub w_id: f64,
    pub w_color: f64,
    pub w_type: f64,
    pub w_attr: f64,
    #[serde(default)]
    pub w_contrastive: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights::multi_task_dp()
    }
}

impl TermWeights {
    pub fn zero() -> Self {
        TermWeights {
            w_triplet_avg: 0.0,
            w_triplet_dp: 0.0,
            w_id: 0.0,
            w_color: 0.0,
            w_type: 0.0,
            w_attr: 0.0,
            w_contrastive: 0.0,
        }
    }

    /// Triplet on the average feature plus ID, color, type and attribute heads.
    pub fn multi_task() -> Self {
        TermWeights {
            w_triplet_avg: 1.0,
            w_id: 1.0,
            w_color: 1.0,
            w_type: 1.0,
            w_attr: 1.0,
            ..TermWeights::zero()
        }
    }

    /// [`TermWeights::multi_task`] plus the triplet on the part-weighted feature.
    pub fn multi_task_dp() -> Self {
        TermWeights {
            w_triplet_dp: 1.0,
            ..TermWeights::multi_task()
        }
    }

    /// Weights in [`LossReport::terms`] order.
    pub fn as_array(&self) -> [f64; 7] {
        [
            self.w_triplet_avg,
            self.w_triplet_dp,
            self.w_id,
            self.w_color,
            self.w_type,
            self.w_attr,
            self.w_contrastive,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {w:?}"
            )));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        Ok(())
    }
}

/// Scalar value of every loss term for one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub triplet_avg: f64,
    pub triplet_weighted: f64,
    pub id_ce: f64,
    pub color_ce: f64,
    pub type_ce: f64,
    pub attr_bce: f64,
    pub contrastive: f64,
    pub combined: f64,
}

impl LossReport {
    pub fn terms(&self) -> [f64; 7] {
        [
            self.triplet_avg,
            self.triplet_weighted,
            self.id_ce,
            self.color_ce,
            self.type_ce,
            self.attr_bce,
            self.contrastive,
        ]
    }
}

/// Weighted sum of the terms, accumulated in term order over nonzero weights.
pub fn combine_multi_task(report: &LossReport, weights: &TermWeights) -> Result<f64> {
    weights.validate()?;
    let mut acc: Option<f64> = None;
    for (t, w) in report.terms().iter().zip(weights.as_array()) {
        if w != 0.0 {
            let v = w * t;
            acc = Some(acc.map_or(v, |a| a + v));
        }
    }
    Ok(acc.expect("validated nonzero weight"))
}

/// Tape version of [`combine_multi_task`] over the terms that were recorded.
/// Uses the same operation order, so the value matches it exactly.
pub fn combine_on_tape(tape: &mut Tape, terms: &[Option<Var>; 7], weights: &TermWeights) -> Result<Var> {
    weights.validate()?;
    let mut acc: Option<Var> = None;
    for (t, w) in terms.iter().zip(weights.as_array()) {
        if w == 0.0 {
            continue;
        }
        let t = t.ok_or_else(|| Error::Config("weighted loss term was not computed".into()))?;
        let v = tape.scale(t, w)?;
        acc = Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
    }
    Ok(acc.expect("validated nonzero weight"))
}
