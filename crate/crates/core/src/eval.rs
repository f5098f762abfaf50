//! Retrieval and attribute evaluation.
//!
//! Ranking is by ascending Euclidean distance with ties broken by gallery
//! index. AP is the mean of precision at the rank of each true match.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::{AttributeSet, Color, DatasetManifest, ImageRecord, SplitTag, VehicleType, BINARY_ATTRIBUTES};
use crate::detection::DetectionMetrics;
use crate::tensor::Tensor;
use crate::{rng, Error, Result};

/// Identity and camera of one query or gallery item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemMeta {
    pub identity: i64,
    pub camera: i64,
}

impl From<&ImageRecord> for ItemMeta {
    fn from(r: &ImageRecord) -> Self {
        ItemMeta {
            identity: r.identity_id,
            camera: r.camera_id,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    /// Ignore same-identity gallery items from the query's camera.
    pub cross_camera_only: bool,
}

/// Q×G Euclidean distances between the rows of two embedding matrices.
pub fn distance_matrix(query: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    let (qs, gs) = (query.shape(), gallery.shape());
    if qs.len() != 2 || gs.len() != 2 || qs[1] != gs[1] {
        return Err(Error::Shape(format!("distance matrix of {qs:?} and {gs:?}")));
    }
    let mut out = Vec::with_capacity(qs[0] * gs[0]);
    for i in 0..qs[0] {
        let q = query.row(i);
        for j in 0..gs[0] {
            let mut acc = 0.0;
            for (a, b) in q.iter().zip(gallery.row(j)) {
                let d = a - b;
                acc += d * d;
            }
            out.push(acc.sqrt());
        }
    }
    Tensor::new(vec![qs[0], gs[0]], out)
}

fn check_meta(dist: &Tensor, query: &[ItemMeta], gallery: &[ItemMeta]) -> Result<()> {
    if dist.shape() != [query.len(), gallery.len()] {
        return Err(Error::Shape(format!(
            "distance matrix {:?} for {} queries and {} gallery items",
            dist.shape(),
            query.len(),
            gallery.len()
        )));
    }
    Ok(())
}

/// 1-based ranks of the true matches of query `qi`, after dropping ignored
/// gallery items.
fn match_ranks(
    dist: &Tensor,
    qi: usize,
    query: &[ItemMeta],
    gallery: &[ItemMeta],
    protocol: Protocol,
) -> Result<Vec<usize>> {
    let q = query[qi];
    let row = dist.row(qi);
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let mut ranks = Vec::new();
    let mut rank = 0;
    for g in order {
        let item = gallery[g];
        let same_id = item.identity == q.identity;
        if protocol.cross_camera_only && same_id && item.camera == q.camera {
            continue;
        }
        rank += 1;
        if same_id {
            ranks.push(rank);
        }
    }
    if ranks.is_empty() {
        return Err(Error::Protocol(format!(
            "query {qi} (identity {}) has no positive in the gallery",
            q.identity
        )));
    }
    Ok(ranks)
}

pub fn average_precision(ranks: &[usize]) -> f64 {
    let total: f64 = ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum();
    total / ranks.len() as f64
}

pub fn compute_map(dist: &Tensor, query: &[ItemMeta], gallery: &[ItemMeta], protocol: Protocol) -> Result<f64> {
    check_meta(dist, query, gallery)?;
    if query.is_empty() {
        return Err(Error::Protocol("no queries".into()));
    }
    let mut total = 0.0;
    for qi in 0..query.len() {
        total += average_precision(&match_ranks(dist, qi, query, gallery, protocol)?);
    }
    Ok(total / query.len() as f64)
}

/// `cmc[k-1]` is the fraction of queries with a true match in the top k.
pub fn compute_cmc(
    dist: &Tensor,
    query: &[ItemMeta],
    gallery: &[ItemMeta],
    max_k: usize,
    protocol: Protocol,
) -> Result<Vec<f64>> {
    check_meta(dist, query, gallery)?;
    if query.is_empty() {
        return Err(Error::Protocol("no queries".into()));
    }
    let mut hits = vec![0usize; max_k];
    for qi in 0..query.len() {
        let first = match_ranks(dist, qi, query, gallery, protocol)?[0];
        for h in hits.iter_mut().skip(first - 1) {
            *h += 1;
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / query.len() as f64).collect())
}

/// Expected CMC-1 of a ranking that ignores content, and its standard
/// deviation over queries: each query hits with probability
/// `positives / gallery size`.
pub fn chance_cmc1(query: &[ItemMeta], gallery: &[ItemMeta]) -> (f64, f64) {
    let g = gallery.len() as f64;
    let probs: Vec<f64> = query
        .iter()
        .map(|q| gallery.iter().filter(|x| x.identity == q.identity).count() as f64 / g)
        .collect();
    let n = probs.len() as f64;
    let mean = probs.iter().sum::<f64>() / n;
    let var = probs.iter().map(|p| p * (1.0 - p)).sum::<f64>() / (n * n);
    (mean, var.sqrt())
}

/// Predicted attributes for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttributePrediction {
    pub color: usize,
    pub vtype: usize,
    pub flags: [bool; 4],
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

impl AttributePrediction {
    /// Argmax for the multi-class heads (ties to the lower class); a binary
    /// attribute is predicted true only for a strictly positive logit.
    pub fn from_logits(color: &[f64], vtype: &[f64], flags: &[f64]) -> Self {
        AttributePrediction {
            color: argmax(color),
            vtype: argmax(vtype),
            flags: std::array::from_fn(|i| flags[i] > 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    /// task → accuracy for color, vtype and the four binary attributes.
    pub accuracy: BTreeMap<String, f64>,
    /// `type_confusion[true][predicted]`
    pub type_confusion: Vec<Vec<usize>>,
    pub color_confusion: Vec<Vec<usize>>,
}

pub fn attribute_eval(predictions: &[AttributePrediction], labels: &[AttributeSet]) -> Result<AttributeReport> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let mut type_confusion = vec![vec![0usize; VehicleType::ALL.len()]; VehicleType::ALL.len()];
    let mut color_confusion = vec![vec![0usize; Color::ALL.len()]; Color::ALL.len()];
    let mut flag_hits = [0usize; 4];
    for (p, l) in predictions.iter().zip(labels) {
        if p.vtype >= VehicleType::ALL.len() || p.color >= Color::ALL.len() {
            return Err(Error::Contract(format!("predicted class out of range: {p:?}")));
        }
        type_confusion[l.vtype.index()][p.vtype] += 1;
        color_confusion[l.color.index()][p.color] += 1;
        for (i, f) in l.flags().iter().enumerate() {
            flag_hits[i] += (p.flags[i] == *f) as usize;
        }
    }
    let diag = |m: &Vec<Vec<usize>>| (0..m.len()).map(|i| m[i][i]).sum::<usize>() as f64 / n;
    let mut accuracy = BTreeMap::new();
    accuracy.insert("color".to_string(), diag(&color_confusion));
    accuracy.insert("vtype".to_string(), diag(&type_confusion));
    for (name, hits) in BINARY_ATTRIBUTES.iter().zip(flag_hits) {
        accuracy.insert(name.to_string(), hits as f64 / n);
    }
    Ok(AttributeReport {
        accuracy,
        type_confusion,
        color_confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub feature: String,
    pub n_query: usize,
    pub n_gallery: usize,
    pub map: f64,
    pub cmc: Vec<f64>,
    pub chance_cmc1: f64,
    pub attributes: Option<AttributeReport>,
    pub detection: Option<DetectionMetrics>,
}

impl EvalReport {
    pub fn cmc_at(&self, k: usize) -> f64 {
        self.cmc[k - 1]
    }

    pub fn cmc_csv(&self) -> String {
        let mut s = String::from("rank,cmc\n");
        for (i, v) in self.cmc.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, v));
        }
        s
    }

    pub fn type_confusion_csv(&self) -> Option<String> {
        let a = self.attributes.as_ref()?;
        let names: Vec<String> = VehicleType::ALL
            .iter()
            .map(|t| format!("{t:?}").to_lowercase())
            .collect();
        let mut s = format!("true\\predicted,{}\n", names.join(","));
        for (name, row) in names.iter().zip(&a.type_confusion) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!("{},{}\n", name, cells.join(",")));
        }
        Some(s)
    }
}

/// One two-alternative forced-choice trial (image ids).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AfcTrial {
    pub query: String,
    pub same_id: String,
    pub distractor: String,
}

/// Samples `n_trials` queries without replacement; each comes with a
/// same-identity image from another camera and a different-identity image
/// with an identical attribute set.
pub fn make_2afc_benchmark(
    manifest: &DatasetManifest,
    n_trials: usize,
    seed: u64,
    allow_fewer: bool,
) -> Result<Vec<AfcTrial>> {
    let split_applied = manifest.with_split(SplitTag::Query).next().is_some();
    let (queries, candidates): (Vec<&ImageRecord>, Vec<&ImageRecord>) = if split_applied {
        (
            manifest.with_split(SplitTag::Query).collect(),
            manifest.with_split(SplitTag::Gallery).collect(),
        )
    } else {
        let test: Vec<&ImageRecord> = manifest.records.iter().filter(|r| r.split.is_test()).collect();
        (test.clone(), test)
    };
    let options = |q: &ImageRecord| {
        let same: Vec<&ImageRecord> = candidates
            .iter()
            .copied()
            .filter(|c| c.identity_id == q.identity_id && c.camera_id != q.camera_id)
            .collect();
        let other: Vec<&ImageRecord> = candidates
            .iter()
            .copied()
            .filter(|c| c.identity_id != q.identity_id && c.attributes == q.attributes)
            .collect();
        (same, other)
    };
    let mut feasible: Vec<&ImageRecord> = queries
        .iter()
        .copied()
        .filter(|q| {
            let (s, o) = options(q);
            !s.is_empty() && !o.is_empty()
        })
        .collect();
    if feasible.len() < n_trials && !allow_fewer {
        return Err(Error::Protocol(format!(
            "only {} of {n_trials} requested 2AFC trials are feasible",
            feasible.len()
        )));
    }
    let mut r = rng::rng_from(rng::derive(seed, &[0xafc]));
    feasible.shuffle(&mut r);
    feasible.truncate(n_trials);
    Ok(feasible
        .into_iter()
        .map(|q| {
            let (same, other) = options(q);
            AfcTrial {
                query: q.image_id.clone(),
                same_id: same.choose(&mut r).expect("feasible").image_id.clone(),
                distractor: other.choose(&mut r).expect("feasible").image_id.clone(),
            }
        })
        .collect())
}

/// Fraction of trials where the same-identity candidate is strictly closer
/// to the query than the distractor.
pub fn score_2afc<F>(embed: F, trials: &[AfcTrial]) -> Result<f64>
where
    F: Fn(&str) -> Result<Vec<f64>>,
{
    if trials.is_empty() {
        return Err(Error::Protocol("empty 2AFC benchmark".into()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut correct = 0;
    for t in trials {
        let q = embed(&t.query)?;
        let s = embed(&t.same_id)?;
        let d = embed(&t.distractor)?;
        if dist(&q, &s) < dist(&q, &d) {
            correct += 1;
        }
    }
    Ok(correct as f64 / trials.len() as f64)
}
