//! Contrastive pretraining of an image encoder on synthesized chips.

use std::collections::HashMap;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use crgan_core::losses::{nt_xent_loss_grad, Rows};
use crgan_core::raster::{self, CropRect};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{to_f64, Surrogate};
use crate::data::ImageChip;
use crate::nn::{self, Adam, AdamConfig, BatchNorm, Conv2d, ConvSpec, Linear, Mode, Module, Named};
use crate::{Error, Result};

/// Encoder family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Four conv-BN-ReLU-pool blocks.
    SmallCnn,
    /// Two basic residual blocks per stage, four stages.
    Resnet18,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Channels of the first stage; each later stage doubles them.
    pub width: usize,
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        8 * self.width
    }
}

/// Strengths of the view augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    /// Range of the crop area as a fraction of the image.
    pub crop_scale: (f64, f64),
    /// Range of the crop aspect ratio.
    pub crop_ratio: (f64, f64),
    /// Maximum additive brightness shift, in [−1, 1] units.
    pub brightness: f64,
    /// Maximum relative contrast change.
    pub contrast: f64,
    pub flip_probability: f64,
}

impl ViewConfig {
    pub fn simclr() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (0.75, 4.0 / 3.0),
            brightness: 0.4,
            contrast: 0.4,
            flip_probability: 0.5,
        }
    }

    /// No augmentation: every view equals its source.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            brightness: 0.0,
            contrast: 0.0,
            flip_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        let (rlo, rhi) = self.crop_ratio;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) || !(0.0 < rlo && rlo <= rhi) {
            return Err(Error::Config(
                "crop scale must satisfy 0 < lo <= hi <= 1 and ratios 0 < lo <= hi".into(),
            ));
        }
        if self.brightness < 0.0
            || !(0.0..1.0).contains(&self.contrast)
            || !(0.0..=1.0).contains(&self.flip_probability)
        {
            return Err(Error::Config("view jitter strengths out of range".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// One augmented view of a square image.
pub fn augment_view<R: Rng + ?Sized>(pixels: &[f32], side: usize, cfg: &ViewConfig, rng: &mut R) -> Result<Vec<f32>> {
    let area = uniform(rng, cfg.crop_scale.0, cfg.crop_scale.1);
    let log_ratio = uniform(rng, cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    let s = side as f64;
    let ratio = log_ratio.exp();
    let w = (s * (area * ratio).sqrt()).min(s);
    let h = (s * (area / ratio).sqrt()).min(s);
    let x = uniform(rng, 0.0, s - w);
    let y = uniform(rng, 0.0, s - h);
    let mut out = raster::resized_crop(pixels, side, CropRect { x, y, w, h }, side)?;
    let b = uniform(rng, -cfg.brightness, cfg.brightness) as f32;
    let c = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast) as f32;
    out = raster::jitter_intensity(&out, b, c);
    if cfg.flip_probability > 0.0 && rng.random_bool(cfg.flip_probability) {
        out = raster::flip_horizontal(&out, side)?;
    }
    Ok(out)
}

/// Two independent views of `chip`, both keeping its label.
pub fn make_views<R: Rng + ?Sized>(chip: &ImageChip, cfg: &ViewConfig, rng: &mut R) -> Result<(ImageChip, ImageChip)> {
    let a = augment_view(&chip.pixels, chip.side, cfg, rng)?;
    let b = augment_view(&chip.pixels, chip.side, cfg, rng)?;
    Ok((
        ImageChip {
            pixels: a,
            ..chip.clone()
        },
        ImageChip {
            pixels: b,
            ..chip.clone()
        },
    ))
}

fn he_conv<R: Rng + ?Sized>(
    rng: &mut R,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    dtype: DType,
) -> Result<Conv2d> {
    let spec = ConvSpec {
        c_in,
        c_out,
        kernel,
        stride,
        padding: kernel / 2,
        bias: false,
        spectral: false,
    };
    let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
    Conv2d::new(rng, spec, std, dtype, &Device::Cpu)
}

fn bn<R: Rng + ?Sized>(rng: &mut R, c: usize, dtype: DType) -> Result<BatchNorm> {
    BatchNorm::new(rng, c, 0.0, dtype, &Device::Cpu)
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        dtype: DType,
    ) -> Result<Self> {
        Ok(Self {
            conv: he_conv(rng, c_in, c_out, kernel, stride, dtype)?,
            bn: bn(rng, c_out, dtype)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x, mode)?, mode)
    }
}

impl Module for ConvBn {
    fn params(&self, prefix: &str, out: &mut Vec<Named>) {
        self.conv.params(&nn::join(prefix, "conv"), out);
        self.bn.params(&nn::join(prefix, "bn"), out);
    }

    fn buffers(&self, prefix: &str, out: &mut Vec<Named>) {
        self.bn.buffers(&nn::join(prefix, "bn"), out);
    }
}

struct BasicBlock {
    a: ConvBn,
    b: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize, stride: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            a: ConvBn::new(rng, c_in, c_out, 3, stride, dtype)?,
            b: ConvBn::new(rng, c_out, c_out, 3, 1, dtype)?,
            shortcut: if stride != 1 || c_in != c_out {
                Some(ConvBn::new(rng, c_in, c_out, 1, stride, dtype)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.a.forward(x, mode)?.relu()?;
        let h = self.b.forward(&h, mode)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

impl Module for BasicBlock {
    fn params(&self, prefix: &str, out: &mut Vec<Named>) {
        self.a.params(&nn::join(prefix, "a"), out);
        self.b.params(&nn::join(prefix, "b"), out);
        if let Some(s) = &self.shortcut {
            s.params(&nn::join(prefix, "shortcut"), out);
        }
    }

    fn buffers(&self, prefix: &str, out: &mut Vec<Named>) {
        self.a.buffers(&nn::join(prefix, "a"), out);
        self.b.buffers(&nn::join(prefix, "b"), out);
        if let Some(s) = &self.shortcut {
            s.buffers(&nn::join(prefix, "shortcut"), out);
        }
    }
}

enum Layers {
    Small(Vec<ConvBn>),
    Residual { stem: ConvBn, blocks: Vec<BasicBlock> },
}

/// Image encoder producing one `feature_dim` vector per image after
/// global average pooling.
pub struct Backbone {
    config: BackboneConfig,
    layers: Layers,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R, dtype: DType) -> Result<Self> {
        if config.width == 0 {
            return Err(Error::Config("backbone width must be positive".into()));
        }
        let w = config.width;
        let layers = match config.kind {
            BackboneKind::SmallCnn => {
                let mut blocks = Vec::with_capacity(4);
                let mut c_in = 1;
                for i in 0..4 {
                    let c_out = w << i;
                    blocks.push(ConvBn::new(rng, c_in, c_out, 3, 1, dtype)?);
                    c_in = c_out;
                }
                Layers::Small(blocks)
            }
            BackboneKind::Resnet18 => {
                let stem = ConvBn::new(rng, 1, w, 3, 1, dtype)?;
                let mut blocks = Vec::with_capacity(8);
                let mut c_in = w;
                for stage in 0..4 {
                    let c_out = w << stage;
                    blocks.push(BasicBlock::new(
                        rng,
                        c_in,
                        c_out,
                        if stage == 0 { 1 } else { 2 },
                        dtype,
                    )?);
                    blocks.push(BasicBlock::new(rng, c_out, c_out, 1, dtype)?);
                    c_in = c_out;
                }
                Layers::Residual { stem, blocks }
            }
        };
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// `(B, 1, S, S)` images to `(B, feature_dim)` features.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.rank() != 4 || x.dims()[1] != 1 {
            return Err(Error::Validation(format!(
                "encoder expects (B, 1, S, S), got {:?}",
                x.dims()
            )));
        }
        let mut h = x.clone();
        match &self.layers {
            Layers::Small(blocks) => {
                for b in blocks {
                    h = b.forward(&h, mode)?.relu()?;
                    if h.dims()[2] >= 2 {
                        h = h.max_pool2d(2)?;
                    }
                }
            }
            Layers::Residual { stem, blocks } => {
                h = stem.forward(&h, mode)?.relu()?;
                for b in blocks {
                    h = b.forward(&h, mode)?;
                }
            }
        }
        Ok(h.mean((2, 3))?)
    }

    /// Copies of all parameters and buffers, keyed by name.
    pub fn state_map(&self) -> Result<HashMap<String, Tensor>> {
        nn::state_of(self)
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().copy()?)))
            .collect()
    }

    /// A backbone with the same configuration and a copy of the weights.
    pub fn duplicate(&self) -> Result<Self> {
        let dtype = nn::params_of(self)[0].1.dtype();
        let other = Self::new(self.config, &mut ChaCha8Rng::seed_from_u64(0), dtype)?;
        nn::load_state(&other, &self.state_map()?)?;
        Ok(other)
    }
}

impl Module for Backbone {
    fn params(&self, prefix: &str, out: &mut Vec<Named>) {
        match &self.layers {
            Layers::Small(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    b.params(&nn::join(prefix, &format!("block{i}")), out);
                }
            }
            Layers::Residual { stem, blocks } => {
                stem.params(&nn::join(prefix, "stem"), out);
                for (i, b) in blocks.iter().enumerate() {
                    b.params(&nn::join(prefix, &format!("layer{}.{}", i / 2 + 1, i % 2)), out);
                }
            }
        }
    }

    fn buffers(&self, prefix: &str, out: &mut Vec<Named>) {
        match &self.layers {
            Layers::Small(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    b.buffers(&nn::join(prefix, &format!("block{i}")), out);
                }
            }
            Layers::Residual { stem, blocks } => {
                stem.buffers(&nn::join(prefix, "stem"), out);
                for (i, b) in blocks.iter().enumerate() {
                    b.buffers(&nn::join(prefix, &format!("layer{}.{}", i / 2 + 1, i % 2)), out);
                }
            }
        }
    }
}

/// Two-layer MLP mapping features into the contrastive space.
pub struct ProjectionHead {
    hidden: Linear,
    out: Linear,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize, dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        Ok(Self {
            hidden: Linear::new(rng, d_in, d_in, true, (1.0 / d_in as f64).sqrt(), dtype, &dev)?,
            out: Linear::new(rng, d_in, d_out, true, (1.0 / d_in as f64).sqrt(), dtype, &dev)?,
        })
    }

    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(h)?.relu()?)
    }
}

impl Module for ProjectionHead {
    fn params(&self, prefix: &str, out: &mut Vec<Named>) {
        self.hidden.params(&nn::join(prefix, "hidden"), out);
        self.out.params(&nn::join(prefix, "out"), out);
    }
}

/// Pretraining hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    pub backbone: BackboneConfig,
    pub projection_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// NT-Xent temperature.
    pub tau: f64,
    pub optimizer: AdamConfig,
    pub views: ViewConfig,
}

impl SslConfig {
    /// ResNet-18 encoder, 100 epochs.
    pub fn paper() -> Self {
        Self {
            backbone: BackboneConfig {
                kind: BackboneKind::Resnet18,
                width: 64,
            },
            projection_dim: 128,
            epochs: 100,
            batch_size: 256,
            tau: 0.2,
            optimizer: AdamConfig::with_lr(1e-3),
            views: ViewConfig::simclr(),
        }
    }

    /// Small CNN sized for a few CPU minutes.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig {
                kind: BackboneKind::SmallCnn,
                width: 16,
            },
            projection_dim: 64,
            epochs: 30,
            batch_size: 64,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 4 {
            return Err(Error::Config("contrastive batch size must be at least 4".into()));
        }
        if self.epochs == 0 || self.projection_dim == 0 {
            return Err(Error::Config("epochs and projection_dim must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        self.views.validate()
    }
}

impl Default for SslConfig {
    fn default() -> Self {
        Self::paper()
    }
}

/// Mean contrastive loss of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslEpochRow {
    pub epoch: usize,
    pub nt_xent: f64,
    pub batches: usize,
    pub wall_seconds: f64,
}

/// Output of [`simclr_pretrain`]: the encoder, with the projection head
/// already discarded, and per-epoch telemetry.
pub struct Pretrained {
    pub backbone: Backbone,
    pub history: Vec<SslEpochRow>,
}

fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    // A batch of one has no negatives; fold it into its predecessor.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Trains an encoder and projection head on NT-Xent over two views of
/// every image, then returns the encoder.
pub fn simclr_pretrain(
    images: &[Vec<f32>],
    side: usize,
    cfg: &SslConfig,
    seed: u64,
    dtype: DType,
) -> Result<Pretrained> {
    simclr_pretrain_with(images, side, cfg, seed, dtype, |_| {})
}

/// [`simclr_pretrain`] with a callback after every epoch.
pub fn simclr_pretrain_with(
    images: &[Vec<f32>],
    side: usize,
    cfg: &SslConfig,
    seed: u64,
    dtype: DType,
    mut on_epoch: impl FnMut(&SslEpochRow),
) -> Result<Pretrained> {
    cfg.validate()?;
    if images.len() < 2 {
        return Err(Error::Validation(
            "contrastive pretraining needs at least two images".into(),
        ));
    }
    if let Some(bad) = images.iter().position(|im| im.len() != side * side) {
        return Err(Error::Validation(format!("image {bad} is not {side}x{side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = Backbone::new(cfg.backbone, &mut rng, dtype)?;
    let head = ProjectionHead::new(&mut rng, backbone.feature_dim(), cfg.projection_dim, dtype)?;
    let mut params = nn::params_of(&backbone);
    params.extend(nn::params_of(&head).into_iter().map(|(n, v)| (format!("head.{n}"), v)));
    let mut opt = Adam::new(params, cfg.optimizer)?;
    let started = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let groups = batches(&order, cfg.batch_size.min(images.len()));
        for batch in &groups {
            let n = batch.len();
            let mut first = Vec::with_capacity(n * side * side);
            let mut second = Vec::with_capacity(n * side * side);
            for &i in batch.iter() {
                first.extend(augment_view(&images[i], side, &cfg.views, &mut rng)?);
                second.extend(augment_view(&images[i], side, &cfg.views, &mut rng)?);
            }
            first.extend(second);
            let x = Tensor::from_vec(first, (2 * n, 1, side, side), &Device::Cpu)?.to_dtype(dtype)?;
            let z = head.forward(&backbone.forward(&x, Mode::Train)?)?;
            let emb = to_f64(&z)?;
            let lg = nt_xent_loss_grad(Rows::new(&emb, cfg.projection_dim)?, cfg.tau).map_err(|e| match e {
                crgan_core::Error::NonFinite(what) => Error::NonFinite {
                    term: format!("nt_xent ({what})"),
                    iteration: epoch as u64 + 1,
                    batch: batch.to_vec(),
                },
                e => e.into(),
            })?;
            if !lg.value.is_finite() {
                return Err(Error::NonFinite {
                    term: "nt_xent".into(),
                    iteration: epoch as u64 + 1,
                    batch: batch.to_vec(),
                });
            }
            total += lg.value;
            let mut s = Surrogate::new();
            s.push(&z, &lg.grad, 1.0)?;
            if let Some(loss) = s.finish()? {
                opt.apply(&loss.backward()?)?;
            }
        }
        let row = SslEpochRow {
            epoch: epoch + 1,
            nt_xent: total / groups.len() as f64,
            batches: groups.len(),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        history.push(row);
    }
    Ok(Pretrained { backbone, history })
}
