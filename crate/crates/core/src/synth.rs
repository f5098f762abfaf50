//! Synthetic vehicle images whose identity signal lives only inside planted
//! part boxes.
//!
//! Coarse appearance (body color, silhouette, attribute markers) is a
//! function of the attribute set and the camera. Each identity owns a
//! two-color pseudorandom texture that is pasted into one or more square
//! part boxes per image; the boxes are the ground-truth parts.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    save_manifest, AttributeSet, BoundingBox, Color, DatasetManifest, ImageRecord, SplitTag, VehicleType,
};
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_identities: usize,
    /// The first `n_train_identities` identities are tagged train, the rest
    /// unassigned-test.
    pub n_train_identities: usize,
    pub images_per_identity: usize,
    pub n_cameras: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Inclusive side length range of the square part boxes, in pixels.
    pub part_size_range: (usize, usize),
    pub parts_per_image: usize,
    pub noise_sigma: f64,
    pub attribute_seed: u64,
    /// Identities 2k and 2k+1 share one attribute set.
    pub twin_attributes: bool,
    /// Backbone downsampling the image size must be divisible by.
    pub downsample: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_identities: 200,
            n_train_identities: 100,
            images_per_identity: 8,
            n_cameras: 2,
            image_size: 64,
            channels: 3,
            part_size_range: (12, 18),
            parts_per_image: 1,
            noise_sigma: 0.03,
            attribute_seed: 17,
            twin_attributes: true,
            downsample: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_cameras < 2 {
            return fail(format!("n_cameras = {} (need at least 2)", self.n_cameras));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return fail(format!("noise_sigma = {}", self.noise_sigma));
        }
        if self.downsample == 0 || !self.image_size.is_multiple_of(self.downsample) {
            return fail(format!(
                "image_size {} not divisible by downsample {}",
                self.image_size, self.downsample
            ));
        }
        if self.channels == 0 || self.n_identities == 0 || self.images_per_identity == 0 {
            return fail("channels, identities and images per identity must be positive".into());
        }
        if self.n_train_identities > self.n_identities {
            return fail("more train identities than identities".into());
        }
        if self.twin_attributes && self.n_train_identities % 2 == 1 {
            return fail("twin identities would straddle the train/test boundary".into());
        }
        let (lo, hi) = self.part_size_range;
        if lo == 0 || lo > hi {
            return fail(format!("part_size_range {:?}", self.part_size_range));
        }
        if hi > self.image_size {
            return fail(format!("part size {hi} larger than image {}", self.image_size));
        }
        if self.parts_per_image * lo * lo > self.image_size * self.image_size {
            return fail("parts cannot fit in the image".into());
        }
        Ok(())
    }
}

/// Manifest plus one C×S×S tensor per record, in record order.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
}

impl SyntheticDataset {
    /// Writes `manifest.jsonl` and `tensors/<image_id>.tnsr` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let tensor_dir = dir.join("tensors");
        fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
        for (r, img) in self.manifest.records.iter().zip(&self.images) {
            write_tensor(&dir.join(&r.tensor_ref), img)?;
        }
        save_manifest(&dir.join("manifest.jsonl"), &self.manifest)
    }
}

/// Reads every record's tensor, resolving `tensor_ref` against `base_dir`.
pub fn load_images(manifest: &DatasetManifest, base_dir: &Path) -> Result<Vec<Tensor>> {
    manifest
        .records
        .iter()
        .map(|r| read_tensor(&base_dir.join(&r.tensor_ref)))
        .collect()
}

fn color_rgb(c: Color) -> [f64; 3] {
    match c {
        Color::White => [0.92, 0.92, 0.90],
        Color::Black => [0.08, 0.08, 0.10],
        Color::Gray => [0.55, 0.55, 0.57],
        Color::Red => [0.80, 0.12, 0.10],
        Color::Green => [0.15, 0.62, 0.20],
        Color::Blue => [0.12, 0.25, 0.80],
        Color::Yellow => [0.92, 0.85, 0.15],
        Color::Brown => [0.50, 0.30, 0.12],
        Color::Other => [0.60, 0.20, 0.65],
    }
}

/// Half extents (x, y) of the body at 64 px.
fn silhouette(t: VehicleType) -> (f64, f64) {
    match t {
        VehicleType::Sedan => (20.0, 11.0),
        VehicleType::Hatchback => (16.0, 11.0),
        VehicleType::Suv => (19.0, 13.0),
        VehicleType::Bus => (27.0, 14.0),
        VehicleType::Lorry => (23.0, 13.0),
        VehicleType::Truck => (25.0, 14.0),
        VehicleType::Other => (17.0, 12.0),
    }
}

/// Camera-dependent pose offset and illumination slope.
fn camera_params(camera: usize) -> (f64, f64, f64) {
    let dx = ((camera * 5) % 7) as f64 - 3.0;
    let dy = ((camera * 3) % 5) as f64 - 2.0;
    let slope = 0.12 * ((camera % 3) as f64 - 1.0) + 0.05;
    (dx, dy, slope)
}

/// Body rectangle (x0, y0, x1, y1) in pixels for an attribute set and camera.
fn body_rect(attrs: &AttributeSet, camera: usize, size: usize) -> (f64, f64, f64, f64) {
    let s = size as f64 / 64.0;
    let (hx, hy) = silhouette(attrs.vtype);
    let (dx, dy, _) = camera_params(camera);
    let cx = size as f64 / 2.0 + dx * s;
    let cy = size as f64 / 2.0 + dy * s;
    (cx - hx * s, cy - hy * s, cx + hx * s, cy + hy * s)
}

/// Coarse appearance: background, body, attribute markers and camera
/// illumination. Depends only on (attributes, camera).
pub fn render_background(attrs: &AttributeSet, camera: usize, size: usize, channels: usize) -> Tensor {
    let s = size as f64 / 64.0;
    let (x0, y0, x1, y1) = body_rect(attrs, camera, size);
    let (_, _, slope) = camera_params(camera);
    let rgb = color_rgb(attrs.color);
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let mut data = vec![0.0; channels * size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = px >= x0 && px < x1 && py >= y0 && py < y1;
            let mut v = [0.38, 0.38, 0.40];
            if inside {
                let shade = 0.9 + 0.2 * (py - y0) / (y1 - y0);
                v = rgb.map(|c| c * shade);
                if attrs.skylight && (px - cx).abs() < 5.0 * s && (py - cy).abs() < 3.0 * s {
                    v = rgb.map(|c| c * 0.45);
                }
                if attrs.bumper && py >= y1 - 2.0 * s {
                    v = [0.85, 0.85, 0.85];
                }
                if attrs.spare_tire && ((px - (x1 - 4.0 * s)).powi(2) + (py - cy).powi(2)).sqrt() < 3.0 * s {
                    v = [0.1, 0.1, 0.1];
                }
                if attrs.luggage_rack
                    && px >= x0 + 2.0 * s
                    && px < x0 + 10.0 * s
                    && py >= y0 + 1.0 * s
                    && py < y0 + 3.0 * s
                {
                    v = [0.62, 0.60, 0.58];
                }
            }
            let light = 1.0 + slope * (px / size as f64 - 0.5);
            for c in 0..channels {
                data[(c * size + y) * size + x] = v[c % 3] * light;
            }
        }
    }
    Tensor::new(vec![channels, size, size], data).expect("shape")
}

/// Identity texture: two colors and a binary pixel pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct PartTexture {
    pub colors: [[f64; 3]; 2],
    pub side: usize,
    pub pattern: Vec<bool>,
}

impl PartTexture {
    pub fn for_identity(seed: u64, identity: i64, side: usize) -> Self {
        let mut r = rng::rng_from(rng::derive(seed, &[0x7e47, identity as u64]));
        let colors = loop {
            let a: [f64; 3] = std::array::from_fn(|_| r.random::<f64>());
            let b: [f64; 3] = std::array::from_fn(|_| r.random::<f64>());
            let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            if d >= 0.6 {
                break [a, b];
            }
        };
        let pattern = (0..side * side).map(|_| r.random::<bool>()).collect();
        PartTexture { colors, side, pattern }
    }

    fn paint(&self, img: &mut Tensor, b: &BoundingBox) {
        let shape = img.shape().to_vec();
        let (channels, size) = (shape[0], shape[1]);
        let (x0, y0) = (b.x_min as usize, b.y_min as usize);
        let (x1, y1) = (b.x_max as usize, b.y_max as usize);
        let data = img.data_mut();
        for y in y0..y1 {
            for x in x0..x1 {
                let bit = self.pattern[((y - y0) % self.side) * self.side + (x - x0) % self.side];
                let col = self.colors[bit as usize];
                for c in 0..channels {
                    data[(c * size + y) * size + x] = col[c % 3];
                }
            }
        }
    }
}

fn draw_attributes(r: &mut impl Rng) -> AttributeSet {
    AttributeSet {
        color: Color::ALL[r.random_range(0..Color::ALL.len())],
        vtype: VehicleType::ALL[r.random_range(0..VehicleType::ALL.len())],
        skylight: r.random(),
        bumper: r.random(),
        spare_tire: r.random(),
        luggage_rack: r.random(),
    }
}

fn overlaps(a: &BoundingBox, b: &BoundingBox) -> bool {
    a.x_min < b.x_max && b.x_min < a.x_max && a.y_min < b.y_max && b.y_min < a.y_max
}

const PART_GUTTER: f64 = 4.0;

fn place_parts(r: &mut impl Rng, cfg: &SynthConfig, body: (f64, f64, f64, f64)) -> Result<Vec<BoundingBox>> {
    let size = cfg.image_size;
    let (lo, hi) = cfg.part_size_range;
    let mut parts: Vec<BoundingBox> = Vec::new();
    for _ in 0..cfg.parts_per_image {
        let mut placed = None;
        for attempt in 0..200 {
            let side = r.random_range(lo..=hi);
            // Prefer the body; fall back to anywhere in the frame.
            let (bx0, by0, bx1, by1) = if attempt < 100 {
                (
                    body.0.ceil() as usize,
                    body.1.ceil() as usize,
                    body.2.floor() as usize,
                    body.3.floor() as usize,
                )
            } else {
                (0, 0, size, size)
            };
            if bx1 < bx0 + side || by1 < by0 + side {
                continue;
            }
            let x0 = r.random_range(bx0..=bx1 - side);
            let y0 = r.random_range(by0..=by1 - side);
            let b = BoundingBox::new(x0 as f64, y0 as f64, (x0 + side) as f64, (y0 + side) as f64)?;
            // a gutter wide enough that the detector's smoothing cannot bridge it
            let grown = BoundingBox {
                x_min: b.x_min - PART_GUTTER,
                y_min: b.y_min - PART_GUTTER,
                x_max: b.x_max + PART_GUTTER,
                y_max: b.y_max + PART_GUTTER,
            };
            if parts.iter().all(|p| !overlaps(p, &grown)) {
                placed = Some(b);
                break;
            }
        }
        parts.push(placed.ok_or_else(|| Error::Config("could not place non-overlapping parts".into()))?);
    }
    Ok(parts)
}

/// Generates the full labeled dataset. Every image is independently seeded
/// from `(seed, image_id)`.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut attr_rng = rng::rng_from(rng::derive(cfg.attribute_seed, &[0xa77]));
    let mut attributes = Vec::with_capacity(cfg.n_identities);
    for id in 0..cfg.n_identities {
        let a = draw_attributes(&mut attr_rng);
        attributes.push(if cfg.twin_attributes && id % 2 == 1 {
            attributes[id - 1]
        } else {
            a
        });
    }
    let size = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut records = Vec::with_capacity(cfg.n_identities * cfg.images_per_identity);
    let mut images = Vec::with_capacity(records.capacity());
    for (id, attrs) in attributes.iter().enumerate() {
        let identity = id as i64;
        let texture = PartTexture::for_identity(seed, identity, cfg.part_size_range.1);
        for j in 0..cfg.images_per_identity {
            let camera = j % cfg.n_cameras;
            let image_id = format!("id{identity:05}_c{camera}_{j:03}");
            let mut r = rng::rng_from(rng::derive_str(seed, &image_id));
            let mut img = render_background(attrs, camera, size, cfg.channels);
            let parts = place_parts(&mut r, cfg, body_rect(attrs, camera, size))?;
            for b in &parts {
                texture.paint(&mut img, b);
            }
            if cfg.noise_sigma > 0.0 {
                for v in img.data_mut() {
                    *v += noise.sample(&mut r);
                }
            }
            records.push(ImageRecord {
                tensor_ref: format!("tensors/{image_id}.tnsr"),
                image_id,
                identity_id: identity,
                camera_id: camera as i64,
                attributes: *attrs,
                parts,
                width: size as u32,
                height: size as u32,
                split: if id < cfg.n_train_identities {
                    SplitTag::Train
                } else {
                    SplitTag::UnassignedTest
                },
            });
            images.push(img);
        }
    }
    Ok(SyntheticDataset {
        manifest: DatasetManifest::new(records)?,
        images,
    })
}

/// Augmentation decision: clockwise quarter turns (0 = none) then an
/// optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentOp {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl AugmentOp {
    pub const IDENTITY: AugmentOp = AugmentOp {
        quarter_turns: 0,
        flip: false,
    };

    /// Rotation with probability 0.2 (uniform over 90/180/270 degrees), then
    /// a horizontal flip with probability 0.5.
    pub fn draw(seed: u64) -> Self {
        let mut r = rng::rng_from(rng::derive(seed, &[0xa06]));
        let quarter_turns = if r.random::<f64>() < 0.2 {
            r.random_range(1..=3u8)
        } else {
            0
        };
        let flip = r.random::<f64>() < 0.5;
        AugmentOp { quarter_turns, flip }
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Shape(format!("augment needs a square C×S×S image, got {s:?}")));
        }
        let mut out = image.clone();
        for _ in 0..self.quarter_turns {
            out = rotate_cw(&out);
        }
        if self.flip {
            out = flip_h(&out);
        }
        Ok(out)
    }

    /// Maps a box through the same transform, for an image of side `size`.
    pub fn apply_box(&self, b: &BoundingBox, size: f64) -> BoundingBox {
        let mut b = *b;
        for _ in 0..self.quarter_turns {
            // (x, y) → (S − y, x)
            b = BoundingBox {
                x_min: size - b.y_max,
                y_min: b.x_min,
                x_max: size - b.y_min,
                y_max: b.x_max,
            };
        }
        if self.flip {
            b = BoundingBox {
                x_min: size - b.x_max,
                y_min: b.y_min,
                x_max: size - b.x_min,
                y_max: b.y_max,
            };
        }
        b
    }
}

fn rotate_cw(img: &Tensor) -> Tensor {
    let (c, n) = (img.shape()[0], img.shape()[1]);
    let src = img.data();
    let mut data = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..n {
            for x in 0..n {
                data[(ch * n + y) * n + x] = src[(ch * n + (n - 1 - x)) * n + y];
            }
        }
    }
    Tensor::new(img.shape().to_vec(), data).expect("shape")
}

fn flip_h(img: &Tensor) -> Tensor {
    let (c, n) = (img.shape()[0], img.shape()[1]);
    let src = img.data();
    let mut data = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..n {
            for x in 0..n {
                data[(ch * n + y) * n + x] = src[(ch * n + y) * n + (n - 1 - x)];
            }
        }
    }
    Tensor::new(img.shape().to_vec(), data).expect("shape")
}

pub fn augment(image: &Tensor, seed: u64) -> Result<Tensor> {
    AugmentOp::draw(seed).apply(image)
}

/// Augments an image together with its part boxes.
pub fn augment_with_parts(image: &Tensor, parts: &[BoundingBox], seed: u64) -> Result<(Tensor, Vec<BoundingBox>)> {
    let op = AugmentOp::draw(seed);
    let size = image.shape().get(1).copied().unwrap_or(0) as f64;
    let img = op.apply(image)?;
    Ok((img, parts.iter().map(|b| op.apply_box(b, size)).collect()))
}
