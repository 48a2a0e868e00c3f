//! DCGAN generator and the two-branch discriminator.
//!
//! The discriminator body is a stack of stride-2 spectrally normalised
//! convolutions. Its adversarial head is one more spectrally normalised
//! convolution down to a scalar. Its feature head global-pools every body
//! stage from the second onward (skip taps plus the final stage) and maps
//! the concatenation to a mean and a log-variance.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, BatchNorm, Conv2d, ConvSpec, ConvTranspose2d, Linear, Mode, Module, Named};
use crate::{Error, Result};

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.02;

/// Network sizes shared by the generator and discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub g_base_channels: usize,
    pub d_base_channels: usize,
    pub image_size: usize,
    pub image_channels: usize,
}

impl ModelConfig {
    /// 64-pixel DCGAN sized to about 13.7 M parameters.
    pub fn paper() -> Self {
        Self {
            latent_dim: 128,
            g_base_channels: 94,
            d_base_channels: 94,
            image_size: 64,
            image_channels: 1,
        }
    }

    /// 32-pixel variant that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            latent_dim: 64,
            g_base_channels: 16,
            d_base_channels: 16,
            image_size: 32,
            image_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size must be a power of two >= 16, got {}",
                self.image_size
            )));
        }
        if self.latent_dim == 0 || self.g_base_channels == 0 || self.d_base_channels == 0 || self.image_channels == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        Ok(())
    }

    /// Number of stride-2 stages between 4 pixels and `image_size`.
    pub fn stages(&self) -> usize {
        self.image_size.trailing_zeros() as usize - 2
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

/// Per-image discriminator outputs.
pub struct DiscOutput {
    /// Unbounded realness score, shape `(B,)`.
    pub adv: Tensor,
    /// Feature mean, shape `(B, d)`.
    pub mu: Tensor,
    /// Feature log-variance, shape `(B, d)`.
    pub log_var: Tensor,
}

/// Generator interface used by the trainer.
pub trait GeneratorNet {
    fn latent_dim(&self) -> usize;
    /// Maps codes `(B, d)` to images `(B, C, H, W)`.
    fn forward(&self, z: &Tensor, mode: Mode) -> Result<Tensor>;
    fn params(&self) -> Vec<Named>;
}

/// Discriminator interface used by the trainer.
pub trait DiscriminatorNet {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<DiscOutput>;
    fn params(&self) -> Vec<Named>;
    /// Parameters of the body and feature head, mirrored by the momentum
    /// encoder. A subset of [`DiscriminatorNet::params`], same order.
    fn feature_params(&self) -> Vec<Named>;
    /// Feature-branch forward with substitute weights, no state updates.
    fn encode_with(&self, feature_params: &[Tensor], x: &Tensor) -> Result<(Tensor, Tensor)>;
    /// Called after every optimizer step on the discriminator.
    fn refresh_spectral(&self) -> Result<()> {
        Ok(())
    }
}

/// DCGAN generator: a projection to 4×4 followed by stride-2 transposed
/// convolutions, batch norm and ReLU, with a tanh output.
pub struct Generator {
    config: ModelConfig,
    layers: Vec<ConvTranspose2d>,
    norms: Vec<BatchNorm>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let s = config.stages();
        let n = config.g_base_channels;
        let mut layers = Vec::with_capacity(s + 1);
        let mut norms = Vec::with_capacity(s);
        let mut c_in = config.latent_dim;
        for i in 0..=s {
            let last = i == s;
            let c_out = if last { config.image_channels } else { n << (s - 1 - i) };
            let spec = ConvSpec {
                c_in,
                c_out,
                kernel: 4,
                stride: if i == 0 { 1 } else { 2 },
                padding: if i == 0 { 0 } else { 1 },
                bias: false,
                spectral: false,
            };
            layers.push(ConvTranspose2d::new(rng, spec, INIT_STD, dtype, device)?);
            if !last {
                norms.push(BatchNorm::new(rng, c_out, INIT_STD, dtype, device)?);
            }
            c_in = c_out;
        }
        Ok(Self {
            config: config.clone(),
            layers,
            norms,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Multiply-accumulates per generated image.
    pub fn macs(&self) -> u64 {
        let mut side = 1;
        let mut total = 0;
        for l in &self.layers {
            total += l.macs(side);
            side = l.out_side(side);
        }
        total
    }
}

impl Module for Generator {
    fn params(&self, prefix: &str, out: &mut Vec<Named>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&nn::join(prefix, &format!("up{i}")), out);
            if let Some(bn) = self.norms.get(i) {
                bn.params(&nn::join(prefix, &format!("bn{i}")), out);
            }
        }
    }

    fn buffers(&self, prefix: &str, out: &mut Vec<Named>) {
        for (i, bn) in self.norms.iter().enumerate() {
            bn.buffers(&nn::join(prefix, &format!("bn{i}")), out);
        }
    }
}

impl GeneratorNet for Generator {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn forward(&self, z: &Tensor, mode: Mode) -> Result<Tensor> {
        let d = self.config.latent_dim;
        if z.rank() != 2 || z.dims()[1] != d {
            return Err(Error::Validation(format!(
                "latent batch must be (B, {d}), got {:?}",
                z.dims()
            )));
        }
        let mut h = z.reshape((z.dims()[0], d, 1, 1))?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            h = match self.norms.get(i) {
                Some(bn) => bn.forward(&h, mode)?.relu()?,
                None => h.tanh()?,
            };
        }
        Ok(h)
    }

    fn params(&self) -> Vec<Named> {
        nn::params_of(self)
    }
}

/// Two-branch discriminator with spectrally normalised body and critic.
pub struct Discriminator {
    config: ModelConfig,
    body: Vec<Conv2d>,
    adv_head: Conv2d,
    fc_mu: Linear,
    fc_log_var: Linear,
}

/// Negative slope of the body activations.
const LEAK: f64 = 0.2;

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let n = config.d_base_channels;
        let mut body = Vec::new();
        let mut c_in = config.image_channels;
        let mut pooled = 0;
        for i in 0..config.stages() {
            let c_out = n << i;
            let spec = ConvSpec {
                c_in,
                c_out,
                kernel: 4,
                stride: 2,
                padding: 1,
                bias: true,
                spectral: true,
            };
            body.push(Conv2d::new(rng, spec, INIT_STD, dtype, device)?);
            if i >= 1 {
                pooled += c_out;
            }
            c_in = c_out;
        }
        let head = ConvSpec {
            c_in,
            c_out: 1,
            kernel: 4,
            stride: 1,
            padding: 0,
            bias: true,
            spectral: true,
        };
        let adv_head = Conv2d::new(rng, head, INIT_STD, dtype, device)?;
        let d = config.latent_dim;
        let fc_mu = Linear::new(rng, pooled, d, true, INIT_STD, dtype, device)?;
        let fc_log_var = Linear::new(rng, pooled, d, true, INIT_STD, dtype, device)?;
        Ok(Self {
            config: config.clone(),
            body,
            adv_head,
            fc_mu,
            fc_log_var,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Spectrally normalised convolutions, body first, then the critic.
    pub fn spectral_layers(&self) -> impl Iterator<Item = &Conv2d> {
        self.body.iter().chain(std::iter::once(&self.adv_head))
    }

    /// Multiply-accumulates per scored image.
    pub fn macs(&self) -> u64 {
        let mut side = self.config.image_size;
        let mut total = 0;
        for conv in &self.body {
            total += conv.macs(side);
            side = conv.out_side(side);
        }
        total += self.adv_head.macs(side);
        total + (self.fc_mu.weight.elem_count() + self.fc_log_var.weight.elem_count()) as u64
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        if x.rank() != 4 || x.dims()[1..] != [c.image_channels, c.image_size, c.image_size] {
            return Err(Error::Validation(format!(
                "image batch must be (B, {}, {s}, {s}), got {:?}",
                c.image_channels,
                x.dims(),
                s = c.image_size
            )));
        }
        Ok(())
    }

    /// Runs the body, returning the last stage and the pooled feature vector.
    fn body_forward(&self, x: &Tensor, weights: &[(&Tensor, Option<&Tensor>)], mode: Mode) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        let mut pooled = Vec::new();
        for (i, (conv, (w, b))) in self.body.iter().zip(weights).enumerate() {
            h = nn::leaky_relu(&conv.forward_with(&h, w, *b, mode)?, LEAK)?;
            if i >= 1 {
                pooled.push(h.mean((2, 3))?);
            }
        }
        Ok((h, Tensor::cat(&pooled, 1)?))
    }

    fn body_weights(&self) -> Vec<(&Tensor, Option<&Tensor>)> {
        self.body
            .iter()
            .map(|c| (c.weight.as_tensor(), c.bias.as_ref().map(|b| b.as_tensor())))
            .collect()
    }
}

impl Module for Discriminator {
    fn params(&self, prefix: &str, out: &mut Vec<Named>) {
        for (i, c) in self.body.iter().enumerate() {
            c.params(&nn::join(prefix, &format!("body{i}")), out);
        }
        self.fc_mu.params(&nn::join(prefix, "fc_mu"), out);
        self.fc_log_var.params(&nn::join(prefix, "fc_log_var"), out);
        self.adv_head.params(&nn::join(prefix, "adv"), out);
    }

    fn buffers(&self, prefix: &str, out: &mut Vec<Named>) {
        for (i, c) in self.body.iter().enumerate() {
            c.buffers(&nn::join(prefix, &format!("body{i}")), out);
        }
        self.adv_head.buffers(&nn::join(prefix, "adv"), out);
    }
}

impl DiscriminatorNet for Discriminator {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<DiscOutput> {
        self.check_input(x)?;
        let (h, feat) = self.body_forward(x, &self.body_weights(), mode)?;
        let adv = self.adv_head.forward(&h, mode)?.flatten_all()?;
        Ok(DiscOutput {
            adv,
            mu: self.fc_mu.forward(&feat)?,
            log_var: self.fc_log_var.forward(&feat)?,
        })
    }

    fn params(&self) -> Vec<Named> {
        nn::params_of(self)
    }

    fn feature_params(&self) -> Vec<Named> {
        let mut out = Vec::new();
        for (i, c) in self.body.iter().enumerate() {
            c.params(&format!("body{i}"), &mut out);
        }
        self.fc_mu.params("fc_mu", &mut out);
        self.fc_log_var.params("fc_log_var", &mut out);
        out
    }

    fn encode_with(&self, p: &[Tensor], x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let expected = 2 * self.body.len() + 4;
        if p.len() != expected {
            return Err(Error::Validation(format!(
                "expected {expected} feature tensors, got {}",
                p.len()
            )));
        }
        let weights: Vec<(&Tensor, Option<&Tensor>)> = p[..2 * self.body.len()]
            .chunks(2)
            .map(|c| (&c[0], Some(&c[1])))
            .collect();
        let (_, feat) = self.body_forward(x, &weights, Mode::Eval)?;
        let k = 2 * self.body.len();
        Ok((
            self.fc_mu.forward_with(&feat, &p[k], Some(&p[k + 1]))?,
            self.fc_log_var.forward_with(&feat, &p[k + 2], Some(&p[k + 3]))?,
        ))
    }

    fn refresh_spectral(&self) -> Result<()> {
        self.spectral_layers().try_for_each(Conv2d::refresh_spectral)
    }
}

/// Parameter and compute accounting for a generator/discriminator pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCost {
    pub generator_params: usize,
    pub discriminator_params: usize,
    pub total_params: usize,
    pub generator_macs: u64,
    pub discriminator_macs: u64,
}

impl ModelCost {
    /// Forward FLOPs of one generation plus one discrimination, at two
    /// FLOPs per multiply-accumulate.
    pub fn gflops(&self) -> f64 {
        2.0 * (self.generator_macs + self.discriminator_macs) as f64 / 1e9
    }
}

/// Exact trainable-parameter counts and a MAC estimate from layer shapes.
pub fn count_parameters(g: &Generator, d: &Discriminator) -> ModelCost {
    let gp = nn::count(&GeneratorNet::params(g));
    let dp = nn::count(&DiscriminatorNet::params(d));
    ModelCost {
        generator_params: gp,
        discriminator_params: dp,
        total_params: gp + dp,
        generator_macs: g.macs(),
        discriminator_macs: d.macs(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            latent_dim: 8,
            g_base_channels: 4,
            d_base_channels: 4,
            image_size: 16,
            image_channels: 1,
        }
    }

    #[test]
    fn stage_count() {
        assert_eq!(ModelConfig::paper().stages(), 4);
        assert_eq!(ModelConfig::desk().stages(), 3);
        assert_eq!(tiny().stages(), 2);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.image_size = 24;
        assert!(c.validate().is_err());
        c.image_size = 8;
        assert!(c.validate().is_err());
    }

    #[test]
    fn closed_form_parameter_count_at_64px() {
        // Transposed convs plus BN affine, then body, critic and both heads.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig {
            g_base_channels: 8,
            d_base_channels: 8,
            ..ModelConfig::paper()
        };
        let g = Generator::new(&cfg, &mut rng, DType::F32, &Device::Cpu).unwrap();
        let d = Discriminator::new(&cfg, &mut rng, DType::F32, &Device::Cpu).unwrap();
        let n = 8usize;
        let g_expected = 672 * n * n + 16430 * n;
        let d_expected = 672 * n * n + 3743 * n + 257;
        let cost = count_parameters(&g, &d);
        assert_eq!(cost.generator_params, g_expected);
        assert_eq!(cost.discriminator_params, d_expected);
    }

    #[test]
    fn feature_params_are_a_prefix_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Discriminator::new(&tiny(), &mut rng, DType::F32, &Device::Cpu).unwrap();
        let all: Vec<String> = DiscriminatorNet::params(&d).into_iter().map(|(n, _)| n).collect();
        let feat: Vec<String> = d.feature_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(&all[..feat.len()], feat.as_slice());
        assert_eq!(all.len(), feat.len() + 2);
    }

    #[test]
    fn encode_with_own_weights_matches_eval_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Discriminator::new(&tiny(), &mut rng, DType::F64, &Device::Cpu).unwrap();
        let x = nn::normal(&mut rng, &[3, 1, 16, 16], 0.0, 0.5, DType::F64, &Device::Cpu).unwrap();
        let out = d.forward(&x, Mode::Eval).unwrap();
        let p: Vec<Tensor> = d
            .feature_params()
            .into_iter()
            .map(|(_, v)| v.as_tensor().clone())
            .collect();
        let (mu, lv) = d.encode_with(&p, &x).unwrap();
        let diff = (mu - &out.mu)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(diff, 0.0);
        let diff = (lv - &out.log_var)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }
}
