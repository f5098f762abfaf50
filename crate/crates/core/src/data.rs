//! Dataset records, the JSON-lines manifest, the query/gallery split and
//! identity-balanced (P×K) batch sampling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    White,
    Black,
    Gray,
    Red,
    Green,
    Blue,
    Yellow,
    Brown,
    Other,
}

impl Color {
    pub const ALL: [Color; 9] = [
        Color::White,
        Color::Black,
        Color::Gray,
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Brown,
        Color::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleType {
    Sedan,
    Hatchback,
    Suv,
    Bus,
    Lorry,
    Truck,
    Other,
}

impl VehicleType {
    pub const ALL: [VehicleType; 7] = [
        VehicleType::Sedan,
        VehicleType::Hatchback,
        VehicleType::Suv,
        VehicleType::Bus,
        VehicleType::Lorry,
        VehicleType::Truck,
        VehicleType::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const BINARY_ATTRIBUTES: [&str; 4] = ["skylight", "bumper", "spare_tire", "luggage_rack"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeSet {
    pub color: Color,
    pub vtype: VehicleType,
    pub skylight: bool,
    pub bumper: bool,
    pub spare_tire: bool,
    pub luggage_rack: bool,
}

impl AttributeSet {
    /// Binary flags in [`BINARY_ATTRIBUTES`] order.
    pub fn flags(&self) -> [bool; 4] {
        [self.skylight, self.bumper, self.spare_tire, self.luggage_rack]
    }
}

/// Axis-aligned box in continuous pixel coordinates, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max || self.x_min < 0.0 || self.y_min < 0.0 {
            return Err(Error::Contract(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn fits_within(&self, width: f64, height: f64) -> bool {
        self.is_valid() && self.x_max <= width && self.y_max <= height
    }

    /// Half-open containment: `[x_min, x_max) × [y_min, y_max)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitTag {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "query")]
    Query,
    #[serde(rename = "gallery")]
    Gallery,
    #[serde(rename = "unassigned-test")]
    UnassignedTest,
}

impl SplitTag {
    pub fn is_test(self) -> bool {
        self != SplitTag::Train
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub identity_id: i64,
    pub camera_id: i64,
    pub attributes: AttributeSet,
    pub parts: Vec<BoundingBox>,
    pub tensor_ref: String,
    pub width: u32,
    pub height: u32,
    pub split: SplitTag,
}

impl ImageRecord {
    fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            image_id: self.image_id.clone(),
            message,
        };
        if self.identity_id < 0 {
            return Err(fail(format!("negative identity_id {}", self.identity_id)));
        }
        if self.camera_id < 0 {
            return Err(fail(format!("negative camera_id {}", self.camera_id)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(fail("zero image extent".into()));
        }
        for b in &self.parts {
            if !b.fits_within(self.width as f64, self.height as f64) {
                return Err(fail(format!(
                    "part box {:?} invalid for {}x{}",
                    b.to_array(),
                    self.width,
                    self.height
                )));
            }
        }
        Ok(())
    }
}

/// One manifest line. Field order here is the serialized key order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    image_id: String,
    identity_id: i64,
    camera_id: i64,
    color: Color,
    vtype: VehicleType,
    skylight: bool,
    bumper: bool,
    spare_tire: bool,
    luggage_rack: bool,
    parts: Vec<[f64; 4]>,
    tensor_ref: String,
    width: u32,
    height: u32,
    #[serde(default = "unassigned")]
    split: SplitTag,
}

fn unassigned() -> SplitTag {
    SplitTag::UnassignedTest
}

impl From<&ImageRecord> for RecordLine {
    fn from(r: &ImageRecord) -> Self {
        RecordLine {
            image_id: r.image_id.clone(),
            identity_id: r.identity_id,
            camera_id: r.camera_id,
            color: r.attributes.color,
            vtype: r.attributes.vtype,
            skylight: r.attributes.skylight,
            bumper: r.attributes.bumper,
            spare_tire: r.attributes.spare_tire,
            luggage_rack: r.attributes.luggage_rack,
            parts: r.parts.iter().map(|b| b.to_array()).collect(),
            tensor_ref: r.tensor_ref.clone(),
            width: r.width,
            height: r.height,
            split: r.split,
        }
    }
}

impl From<RecordLine> for ImageRecord {
    fn from(l: RecordLine) -> Self {
        ImageRecord {
            image_id: l.image_id,
            identity_id: l.identity_id,
            camera_id: l.camera_id,
            attributes: AttributeSet {
                color: l.color,
                vtype: l.vtype,
                skylight: l.skylight,
                bumper: l.bumper,
                spare_tire: l.spare_tire,
                luggage_rack: l.luggage_rack,
            },
            parts: l
                .parts
                .into_iter()
                .map(|[x_min, y_min, x_max, y_max]| BoundingBox {
                    x_min,
                    y_min,
                    x_max,
                    y_max,
                })
                .collect(),
            tensor_ref: l.tensor_ref,
            width: l.width,
            height: l.height,
            split: l.split,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        let m = DatasetManifest { records };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::Validation {
                    image_id: r.image_id.clone(),
                    message: "duplicate image_id".into(),
                });
            }
        }
        self.validate_split()
    }

    /// Every query needs a same-identity gallery image from another camera.
    fn validate_split(&self) -> Result<()> {
        let mut gallery: BTreeMap<i64, BTreeSet<i64>> = BTreeMap::new();
        for r in self.with_split(SplitTag::Gallery) {
            gallery.entry(r.identity_id).or_default().insert(r.camera_id);
        }
        for q in self.with_split(SplitTag::Query) {
            let ok = gallery
                .get(&q.identity_id)
                .is_some_and(|cams| cams.iter().any(|&c| c != q.camera_id));
            if !ok {
                return Err(Error::Validation {
                    image_id: q.image_id.clone(),
                    message: "query has no cross-camera gallery positive".into(),
                });
            }
        }
        Ok(())
    }

    pub fn with_split(&self, tag: SplitTag) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == tag)
    }

    /// Indices of records carrying `tag`.
    pub fn indices_of(&self, tag: SplitTag) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == tag)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&RecordLine::from(r)).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(ImageRecord::from(parsed));
        }
        DatasetManifest::new(records)
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_jsonl(&text)
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::write(path, manifest.to_jsonl()).map_err(|e| Error::io(path, e))
}

/// Partitions the test records into query and gallery.
///
/// Per identity, one image goes to query and one image from another camera
/// is reserved for gallery; further images move to query until the
/// identity's share `round(fraction · n)` is met, skipping any image whose
/// move would leave a query without a cross-camera gallery positive.
pub fn make_query_gallery_split(manifest: &DatasetManifest, query_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(query_fraction > 0.0 && query_fraction < 1.0) {
        return Err(Error::Config(format!("query fraction {query_fraction} outside (0, 1)")));
    }
    let mut by_identity: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if r.split.is_test() {
            by_identity.entry(r.identity_id).or_default().push(i);
        }
    }
    let mut out = manifest.clone();
    for (&identity, members) in &by_identity {
        let infeasible = |message: &str| Error::SplitInfeasible {
            identity_id: identity,
            message: message.to_string(),
        };
        if members.len() < 2 {
            return Err(infeasible("fewer than two images"));
        }
        let cams: BTreeSet<i64> = members.iter().map(|&i| manifest.records[i].camera_id).collect();
        if cams.len() < 2 {
            return Err(infeasible("all images come from one camera"));
        }
        let mut order = members.clone();
        let mut r = rng::rng_from(rng::derive(seed, &[identity as u64]));
        order.shuffle(&mut r);
        let cam = |i: usize| manifest.records[i].camera_id;

        let first = order[0];
        let partner = *order
            .iter()
            .find(|&&i| cam(i) != cam(first))
            .expect("two cameras present");
        let mut query = vec![first];
        let mut gallery: Vec<usize> = order.iter().copied().filter(|&i| i != first).collect();
        let quota = ((query_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        for &cand in &order[1..] {
            if query.len() >= quota {
                break;
            }
            if cand == partner {
                continue;
            }
            let remaining: Vec<usize> = gallery.iter().copied().filter(|&g| g != cand).collect();
            let covered = query
                .iter()
                .chain(std::iter::once(&cand))
                .all(|&q| remaining.iter().any(|&g| cam(g) != cam(q)));
            if covered {
                query.push(cand);
                gallery = remaining;
            }
        }
        for &q in &query {
            out.records[q].split = SplitTag::Query;
        }
        for &g in &gallery {
            out.records[g].split = SplitTag::Gallery;
        }
    }
    out.validate_split()?;
    Ok(out)
}

/// One P×K mini-batch: `groups[i]` holds K record indices of one identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub p: usize,
    pub k: usize,
    pub groups: Vec<(i64, Vec<usize>)>,
}

impl BatchSpec {
    /// Record indices in group order.
    pub fn indices(&self) -> Vec<usize> {
        self.groups.iter().flat_map(|(_, g)| g.iter().copied()).collect()
    }

    pub fn identities(&self) -> Vec<i64> {
        self.groups
            .iter()
            .flat_map(|(id, g)| std::iter::repeat_n(*id, g.len()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.p * self.k
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Identity-balanced sampler over the train split.
#[derive(Clone, Debug)]
pub struct PkSampler {
    p: usize,
    k: usize,
    seed: u64,
    groups: Vec<(i64, Vec<usize>)>,
}

pub fn pk_sample_batches(manifest: &DatasetManifest, p: usize, k: usize, seed: u64) -> Result<PkSampler> {
    if p < 2 || k < 2 {
        return Err(Error::Config(format!("P={p}, K={k}: both must be at least 2")));
    }
    let mut by_identity: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for i in manifest.indices_of(SplitTag::Train) {
        by_identity.entry(manifest.records[i].identity_id).or_default().push(i);
    }
    if by_identity.len() < p {
        return Err(Error::Config(format!(
            "{} train identities, need at least P={p}",
            by_identity.len()
        )));
    }
    Ok(PkSampler {
        p,
        k,
        seed,
        groups: by_identity.into_iter().collect(),
    })
}

impl PkSampler {
    pub fn n_identities(&self) -> usize {
        self.groups.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.groups.len().div_ceil(self.p)
    }

    /// Batches for one epoch; every train identity appears at least once.
    pub fn epoch(&self, epoch: u64) -> Vec<BatchSpec> {
        let mut r = rng::rng_from(rng::derive(self.seed, &[epoch]));
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.shuffle(&mut r);
        let mut batches = Vec::with_capacity(self.batches_per_epoch());
        for chunk in order.chunks(self.p) {
            let mut chosen = chunk.to_vec();
            if chosen.len() < self.p {
                let mut fill: Vec<usize> = order.iter().copied().filter(|g| !chunk.contains(g)).collect();
                fill.shuffle(&mut r);
                chosen.extend(fill.into_iter().take(self.p - chunk.len()));
            }
            let groups = chosen
                .into_iter()
                .map(|g| {
                    let (id, members) = &self.groups[g];
                    let mut pool = members.clone();
                    pool.shuffle(&mut r);
                    let mut picked: Vec<usize> = pool.iter().copied().take(self.k).collect();
                    while picked.len() < self.k {
                        picked.push(pool[r.random_range(0..pool.len())]);
                    }
                    (*id, picked)
                })
                .collect();
            batches.push(BatchSpec {
                p: self.p,
                k: self.k,
                groups,
            });
        }
        batches
    }

    /// Endless stream of batches, epoch after epoch.
    pub fn iter(&self) -> impl Iterator<Item = BatchSpec> + '_ {
        (0u64..).flat_map(move |e| self.epoch(e))
    }
}
