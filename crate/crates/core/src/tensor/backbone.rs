//! Small strided convolutional backbone with a batch-norm neck and the
//! classification heads used by the multi-task objective.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{BatchStats, Tape, Var};
use super::Tensor;
use crate::{rng, Error, Result};

/// Variance floor used by every batch-norm application.
pub const BN_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub blocks: Vec<ConvSpec>,
    /// Batch norm on the pooled embedding vector.
    pub neck_bn: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            blocks: vec![
                ConvSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                },
            ],
            neck_bn: true,
        }
    }
}

impl BackboneConfig {
    pub fn downsample_factor(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn embedding_dim(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }

    /// Feature grid side for a square input.
    pub fn grid_size(&self, image_size: usize) -> Result<usize> {
        let f = self.downsample_factor();
        if f == 0 || !image_size.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "image size {image_size} not divisible by downsample factor {f}"
            )));
        }
        Ok(image_size / f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone needs at least one conv block".into()));
        }
        for b in &self.blocks {
            if b.kernel % 2 == 0 || b.stride == 0 || b.out_channels == 0 {
                return Err(Error::Config(format!("invalid conv block {b:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSizes {
    pub n_ids: usize,
    pub n_colors: usize,
    pub n_types: usize,
    pub n_attrs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadSizes,
    pub bn_momentum: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub struct ForwardOutput {
    pub features: Var,
    pub emb_avg: Var,
    pub emb_weighted: Option<Var>,
    pub id_logits: Var,
    pub color_logits: Var,
    pub type_logits: Var,
    pub attr_logits: Var,
    /// Batch statistics of the average branch (train mode only).
    pub batch_stats: Option<BatchStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

fn conv_names(i: usize) -> (String, String) {
    (format!("conv{i}.weight"), format!("conv{i}.bias"))
}

const HEADS: [&str; 4] = ["head_id", "head_color", "head_type", "head_attr"];

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.backbone.validate()?;
        let mut r = rng::rng_from(rng::derive(seed, &[0x1417]));
        let mut params = Vec::new();
        let mut in_ch = config.backbone.in_channels;
        for (i, b) in config.backbone.blocks.iter().enumerate() {
            let fan_in = in_ch * b.kernel * b.kernel;
            let (wn, bn) = conv_names(i);
            params.push((
                wn,
                gaussian(
                    &mut r,
                    &[b.out_channels, in_ch, b.kernel, b.kernel],
                    (2.0 / fan_in as f64).sqrt(),
                ),
            ));
            params.push((bn, Tensor::zeros(&[b.out_channels])));
            in_ch = b.out_channels;
        }
        let c = config.backbone.embedding_dim();
        params.push(("neck.gamma".into(), Tensor::full(&[c], 1.0)));
        params.push(("neck.beta".into(), Tensor::zeros(&[c])));
        let h = &config.heads;
        for (name, out) in HEADS.iter().zip([h.n_ids, h.n_colors, h.n_types, h.n_attrs]) {
            params.push((
                format!("{name}.weight"),
                gaussian(&mut r, &[out, c], (1.0 / c as f64).sqrt()),
            ));
            params.push((format!("{name}.bias"), Tensor::zeros(&[out])));
        }
        Ok(Model {
            config,
            params,
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.backbone.embedding_dim()
    }

    /// Records the forward pass. `images`: N×C×H×W; `weights`: optional
    /// N×h×w grids for the part-weighted branch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: Tensor,
        weights: Option<&Tensor>,
        mode: BnMode,
    ) -> Result<ForwardOutput> {
        let vars: Vec<Var> = self.params.iter().map(|(n, t)| tape.param(n, t.clone())).collect();
        let x = tape.constant(images);
        let mut h = x;
        let n_blocks = self.config.backbone.blocks.len();
        for (i, b) in self.config.backbone.blocks.iter().enumerate() {
            let conv = tape.conv2d(h, vars[2 * i], vars[2 * i + 1], b.stride, b.kernel / 2)?;
            h = tape.relu(conv)?;
        }
        let features = h;
        let (gamma, beta) = (vars[2 * n_blocks], vars[2 * n_blocks + 1]);
        let pooled = tape.global_avg_pool(features)?;
        let neck_bn = self.config.backbone.neck_bn;
        let (emb_avg, batch_stats) = match (neck_bn, mode) {
            (false, _) => (pooled, None),
            (true, BnMode::Train) => {
                let (y, stats) = tape.batchnorm_train(pooled, gamma, beta, BN_EPS)?;
                (y, Some(stats))
            }
            (true, BnMode::Eval) => (
                tape.batchnorm_eval(pooled, gamma, beta, &self.running_mean, &self.running_var, BN_EPS)?,
                None,
            ),
        };
        let emb_weighted = match weights {
            None => None,
            Some(w) => {
                let wp = tape.weighted_pool(features, w)?;
                Some(match (neck_bn, mode) {
                    (false, _) => wp,
                    (true, BnMode::Train) => tape.batchnorm_train(wp, gamma, beta, BN_EPS)?.0,
                    (true, BnMode::Eval) => {
                        tape.batchnorm_eval(wp, gamma, beta, &self.running_mean, &self.running_var, BN_EPS)?
                    }
                })
            }
        };
        let head = |tape: &mut Tape, k: usize| {
            let base = 2 * n_blocks + 2 + 2 * k;
            tape.linear(emb_avg, vars[base], vars[base + 1])
        };
        let id_logits = head(tape, 0)?;
        let color_logits = head(tape, 1)?;
        let type_logits = head(tape, 2)?;
        let attr_logits = head(tape, 3)?;
        Ok(ForwardOutput {
            features,
            emb_avg,
            emb_weighted,
            id_logits,
            color_logits,
            type_logits,
            attr_logits,
            batch_stats,
        })
    }

    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let m = self.config.bn_momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    /// Eval-mode inference over a batch; returns the tape and its outputs so
    /// callers can read whichever heads they need.
    pub fn infer(&self, images: Tensor, weights: Option<&Tensor>) -> Result<(Tape, ForwardOutput)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, weights, BnMode::Eval)?;
        Ok((tape, out))
    }
}

fn gaussian(r: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(r)).collect()).expect("shape")
}
