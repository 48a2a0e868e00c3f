//! The Cr-GAN optimisation loop.
//!
//! One iteration draws a real batch, takes a discriminator step and then a
//! generator step. Activations are copied to the host, the objectives and
//! their gradients are evaluated by [`crgan_core::losses`], and the
//! gradients are pushed back through the graph with a [`Surrogate`].
//!
//! Random draws happen in a fixed order per iteration: batch indices, the
//! per-image augmentation (quarter turns, then flip), the discriminator
//! noise ([`DNoise::draw`]) and the generator noise ([`GNoise::draw`]).
//! Disabled terms consume no randomness.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use crgan_core::bank::FeatureBank;
use crgan_core::latent::{self, interpolate_stats, reparameterize};
use crgan_core::losses::{self, DiscriminatorTerms, GeneratorTerms, Rows, StatsGrad};
use crgan_core::{BinaryMask, FeatureStats, LossWeights, StatsRole};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{from_f64, to_f64, Surrogate};
use crate::data::BasicAugment;
use crate::models::{Discriminator, DiscriminatorNet, Generator, GeneratorNet, ModelConfig};
use crate::nn::{Adam, AdamConfig, Mode};
use crate::{Error, Result};

/// Which feature sets serve as negatives in the feature cycle loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativesMode {
    /// Memory bank plus the current real batch.
    Union,
    /// Only the current real batch.
    BatchOnly,
    /// Only the memory bank.
    BankOnly,
}

impl NegativesMode {
    fn uses_bank(self) -> bool {
        self != Self::BatchOnly
    }

    fn uses_batch(self) -> bool {
        self != Self::BankOnly
    }
}

/// GAN training hyperparameters and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub d_optimizer: AdamConfig,
    pub g_optimizer: AdamConfig,
    pub weights: LossWeights,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Probability that a mask bit selects the first source.
    pub mask_p: f64,
    pub bank_capacity: usize,
    pub bank_momentum: f64,
    /// Random quarter turns and flips on every real batch.
    pub augment: bool,
    pub disable_fr: bool,
    pub disable_ms: bool,
    /// Replace the alignment-uniform feature loss with plain distances.
    pub use_eq8_distance: bool,
    pub negatives: NegativesMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 15_000,
            batch_size: 16,
            d_optimizer: AdamConfig::dcgan(),
            g_optimizer: AdamConfig::dcgan(),
            weights: LossWeights::default(),
            checkpoint_every: 5_000,
            seed: 0,
            mask_p: 0.5,
            bank_capacity: 512,
            bank_momentum: crgan_core::bank::DEFAULT_MOMENTUM,
            augment: true,
            disable_fr: false,
            disable_ms: false,
            use_eq8_distance: false,
            negatives: NegativesMode::Union,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for pairing".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_p) {
            return Err(Error::Config("mask_p must lie in [0, 1]".into()));
        }
        if self.bank_capacity == 0 || !(0.0..1.0).contains(&self.bank_momentum) {
            return Err(Error::Config("bank needs capacity > 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }

    fn bank_active(&self) -> bool {
        !self.disable_fr && !self.use_eq8_distance && self.negatives.uses_bank()
    }
}

/// Pair assignment and masks for one round of channel interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct MixNoise {
    /// `pairing[i]` is the partner of image `i`; never `i` itself.
    pub pairing: Vec<usize>,
    /// One mask per image, shared by mean and log-variance.
    pub masks: Vec<BinaryMask>,
}

impl MixNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, batch: usize, dim: usize, p: f64) -> Result<Self> {
        let pairing = latent::derangement_pairing(batch, rng)?;
        let masks = (0..batch)
            .map(|_| latent::sample_mask(dim, p, rng))
            .collect::<crgan_core::Result<_>>()?;
        Ok(Self { pairing, masks })
    }

    /// Mixed statistics for every image.
    pub fn mix(&self, real: &[FeatureStats]) -> Result<Vec<FeatureStats>> {
        self.check(real.len())?;
        real.iter()
            .enumerate()
            .map(|(i, s)| Ok(interpolate_stats(s, &real[self.pairing[i]], &self.masks[i])?))
            .collect()
    }

    /// Pulls gradients on mixed statistics back onto the real ones.
    fn scatter(&self, d_mixed: &[StatsGrad], d_real: &mut [StatsGrad], scale: f64) {
        for (i, g) in d_mixed.iter().enumerate() {
            let j = self.pairing[i];
            for (c, &bit) in self.masks[i].bits().iter().enumerate() {
                let target = if bit { i } else { j };
                d_real[target].mu[c] += scale * g.mu[c];
                d_real[target].log_var[c] += scale * g.log_var[c];
            }
        }
    }

    fn check(&self, batch: usize) -> Result<()> {
        if self.pairing.len() != batch || self.masks.len() != batch {
            return Err(Error::Validation(format!(
                "noise drawn for batch {} used with batch {batch}",
                self.pairing.len()
            )));
        }
        Ok(())
    }
}

/// Randomness consumed by one discriminator step.
#[derive(Debug, Clone, PartialEq)]
pub struct DNoise {
    pub mix: MixNoise,
    /// Reparameterisation noise for the mixed codes, row-major `(B, d)`.
    pub eps: Vec<f64>,
}

impl DNoise {
    /// Draws pairing, masks, then `eps`.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, batch: usize, dim: usize, p: f64) -> Result<Self> {
        let mix = MixNoise::draw(rng, batch, dim, p)?;
        let eps = latent::standard_normal(batch * dim, rng);
        Ok(Self { mix, eps })
    }
}

/// Randomness consumed by one generator step.
#[derive(Debug, Clone, PartialEq)]
pub struct GNoise {
    pub mix: MixNoise,
    /// Noise for the reconstruction codes `z^r`.
    pub eps_real: Vec<f64>,
    /// Noise for the mixed codes `z^m`, drawn independently of `eps_real`.
    pub eps_mixed: Vec<f64>,
    /// Shuffle of the `2B` pooled generations into mode-seeking pairs.
    pub ms_order: Option<Vec<usize>>,
}

impl GNoise {
    /// Draws pairing, masks, `eps_real`, `eps_mixed`, then the pair shuffle
    /// when mode seeking is on.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, batch: usize, dim: usize, p: f64, mode_seeking: bool) -> Result<Self> {
        let mix = MixNoise::draw(rng, batch, dim, p)?;
        let eps_real = latent::standard_normal(batch * dim, rng);
        let eps_mixed = latent::standard_normal(batch * dim, rng);
        let ms_order = mode_seeking.then(|| {
            let mut order: Vec<usize> = (0..2 * batch).collect();
            order.shuffle(rng);
            order
        });
        Ok(Self {
            mix,
            eps_real,
            eps_mixed,
            ms_order,
        })
    }
}

/// Unweighted terms and weighted objective of a discriminator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DStepReport {
    pub terms: DiscriminatorTerms,
    pub objective: f64,
}

/// Unweighted terms and weighted objective of a generator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GStepReport {
    pub terms: GeneratorTerms,
    pub objective: f64,
    pub ms_pairs_skipped: usize,
}

/// Networks, optimisers and memory bank.
pub struct GanState<G, D> {
    pub generator: G,
    pub discriminator: D,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub bank: FeatureBank,
    pub config: TrainConfig,
}

impl<G: GeneratorNet, D: DiscriminatorNet> GanState<G, D> {
    pub fn new(generator: G, discriminator: D, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let g_opt = Adam::new(generator.params(), config.g_optimizer)?;
        let d_opt = Adam::new(discriminator.params(), config.d_optimizer)?;
        let shadow = discriminator
            .feature_params()
            .iter()
            .map(|(_, v)| to_f64(v.as_tensor()))
            .collect::<Result<Vec<_>>>()?;
        let bank = FeatureBank::new(config.bank_capacity, config.bank_momentum, shadow)?;
        Ok(Self {
            generator,
            discriminator,
            g_opt,
            d_opt,
            bank,
            config,
        })
    }

    fn weights(&self) -> &LossWeights {
        &self.config.weights
    }

    /// EMA of the live feature branch into the shadow, then enqueues the
    /// shadow encoding of `x_real`.
    fn refresh_bank(&mut self, x_real: &Tensor) -> Result<()> {
        let live = self
            .discriminator
            .feature_params()
            .iter()
            .map(|(_, v)| to_f64(v.as_tensor()))
            .collect::<Result<Vec<_>>>()?;
        self.bank.momentum_update(&live)?;
        let shadow = self
            .discriminator
            .feature_params()
            .iter()
            .zip(self.bank.shadow())
            .map(|((_, v), s)| from_f64(s, v.dims(), v.dtype(), v.device()))
            .collect::<Result<Vec<_>>>()?;
        let (mu, lv) = self.discriminator.encode_with(&shadow, x_real)?;
        let stats = stats_rows(&to_f64(&mu)?, &to_f64(&lv)?, mu.dims()[1], StatsRole::Real)?;
        self.bank.enqueue(&stats)?;
        Ok(())
    }
}

fn stats_rows(mu: &[f64], log_var: &[f64], dim: usize, role: StatsRole) -> Result<Vec<FeatureStats>> {
    mu.chunks(dim)
        .zip(log_var.chunks(dim))
        .map(|(m, l)| Ok(FeatureStats::new(m.to_vec(), l.to_vec(), role)?))
        .collect()
}

fn flatten_mu(g: &[StatsGrad]) -> Vec<f64> {
    g.iter().flat_map(|s| s.mu.iter().copied()).collect()
}

fn flatten_log_var(g: &[StatsGrad]) -> Vec<f64> {
    g.iter().flat_map(|s| s.log_var.iter().copied()).collect()
}

fn zero_grads(n: usize, d: usize) -> Vec<StatsGrad> {
    (0..n)
        .map(|_| StatsGrad {
            mu: vec![0.0; d],
            log_var: vec![0.0; d],
        })
        .collect()
}

fn add_scaled(acc: &mut [StatsGrad], g: &[StatsGrad], scale: f64) {
    for (a, g) in acc.iter_mut().zip(g) {
        for (x, y) in a.mu.iter_mut().zip(&g.mu) {
            *x += scale * y;
        }
        for (x, y) in a.log_var.iter_mut().zip(&g.log_var) {
            *x += scale * y;
        }
    }
}

fn codes_tensor(codes: &[Vec<f64>], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let flat: Vec<f64> = codes.iter().flatten().copied().collect();
    from_f64(&flat, &[codes.len(), dim], dtype, device)
}

fn reparameterize_all(stats: &[FeatureStats], eps: &[f64]) -> Result<Vec<Vec<f64>>> {
    let d = stats.first().map_or(0, FeatureStats::dim);
    if eps.len() != stats.len() * d {
        return Err(Error::Validation("noise length does not match batch".into()));
    }
    stats
        .iter()
        .zip(eps.chunks(d.max(1)))
        .map(|(s, e)| Ok(reparameterize(s, e)?.into_vec()))
        .collect()
}

fn batch_size_of(x: &Tensor) -> Result<usize> {
    let b = x.dims().first().copied().unwrap_or(0);
    if b < 2 {
        return Err(crgan_core::Error::Pairing(b).into());
    }
    Ok(b)
}

/// One discriminator update on `x_real` with explicit noise.
///
/// Scores the real batch, mixes its encodings, generates from the mixed
/// codes with the generator frozen, and minimises the weighted critic,
/// feature-cycle and KL terms over the discriminator alone. Refreshes the
/// memory bank afterwards when it is in use.
pub fn train_step_d<G: GeneratorNet, D: DiscriminatorNet>(
    state: &mut GanState<G, D>,
    x_real: &Tensor,
    noise: &DNoise,
) -> Result<DStepReport> {
    let b = batch_size_of(x_real)?;
    noise.mix.check(b)?;
    let w = *state.weights();
    let cfg = state.config.clone();
    let dim = state.generator.latent_dim();

    let out_r = state.discriminator.forward(x_real, Mode::Train)?;
    let (mu_r, lv_r) = (to_f64(&out_r.mu)?, to_f64(&out_r.log_var)?);
    let real = stats_rows(&mu_r, &lv_r, dim, StatsRole::Real)?;
    let mixed = noise.mix.mix(&real)?;
    let z_m = reparameterize_all(&mixed, &noise.eps)?;
    let z = codes_tensor(&z_m, dim, x_real.dtype(), x_real.device())?;
    let x_gen = state.generator.forward(&z, Mode::Frozen)?.detach();
    let out_g = state.discriminator.forward(&x_gen, Mode::Frozen)?;
    let (mu_g, lv_g) = (to_f64(&out_g.mu)?, to_f64(&out_g.log_var)?);
    let generated = stats_rows(&mu_g, &lv_g, dim, StatsRole::Generated)?;

    let critic = losses::critic_loss_grad(&to_f64(&out_r.adv)?, &to_f64(&out_g.adv)?)?;
    let (kl_r, kl_r_grad) = losses::prior_kl_grad(&real)?;
    let (kl_g, kl_g_grad) = losses::prior_kl_grad(&generated)?;

    let mut d_real = zero_grads(b, dim);
    let mut d_gen = zero_grads(b, dim);
    add_scaled(&mut d_real, &kl_r_grad, w.lambda_pr);
    add_scaled(&mut d_gen, &kl_g_grad, w.lambda_pr);

    let mut fr = 0.0;
    let mut d_sigma_real = vec![0.0; b * dim];
    if !cfg.disable_fr {
        if cfg.use_eq8_distance {
            let g = losses::feature_distance_loss_grad(&generated, &mixed)?;
            fr = g.value;
            add_scaled(&mut d_gen, &g.d_generated, w.lambda_feat);
            noise.mix.scatter(&g.d_mixed, &mut d_real, w.lambda_feat);
        } else {
            let (bank_mu, bank_sigma) = if cfg.negatives.uses_bank() {
                state.bank.negatives()
            } else {
                (Vec::new(), Vec::new())
            };
            let n_bank = bank_mu.len();
            let mut neg_mu: Vec<Vec<f64>> = bank_mu.iter().map(|v| v.to_vec()).collect();
            let mut neg_sigma: Vec<Vec<f64>> = bank_sigma.iter().map(|v| v.to_vec()).collect();
            if cfg.negatives.uses_batch() {
                for s in &real {
                    neg_mu.push(s.mu().to_vec());
                    neg_sigma.push(s.sigma());
                }
            }
            let g = losses::feature_cycle_loss_grad(&generated, &mixed, &neg_mu, &neg_sigma, w.tau)?;
            fr = g.value;
            add_scaled(&mut d_gen, &g.d_generated, w.lambda_feat);
            noise.mix.scatter(&g.d_mixed, &mut d_real, w.lambda_feat);
            // Current-batch negatives stay attached to the graph; bank
            // entries are constants.
            for (i, (gm, gs)) in g.d_neg_mu[n_bank..].iter().zip(&g.d_neg_sigma[n_bank..]).enumerate() {
                for c in 0..dim {
                    d_real[i].mu[c] += w.lambda_feat * gm[c];
                    d_sigma_real[i * dim + c] += w.lambda_feat * gs[c];
                }
            }
        }
    }

    let terms = DiscriminatorTerms {
        gan: critic.value,
        fr,
        prior: kl_r + kl_g,
    };
    let mut s = Surrogate::new();
    s.push(&out_r.adv, &critic.d_first, w.lambda_gan)?;
    s.push(&out_g.adv, &critic.d_second, w.lambda_gan)?;
    s.push(&out_r.mu, &flatten_mu(&d_real), 1.0)?;
    s.push(&out_r.log_var, &flatten_log_var(&d_real), 1.0)?;
    s.push(&out_g.mu, &flatten_mu(&d_gen), 1.0)?;
    s.push(&out_g.log_var, &flatten_log_var(&d_gen), 1.0)?;
    if d_sigma_real.iter().any(|&g| g != 0.0) {
        let sigma = (&out_r.log_var * 0.5)?.exp()?;
        s.push(&sigma, &d_sigma_real, 1.0)?;
    }
    if let Some(loss) = s.finish()? {
        state.d_opt.apply(&loss.backward()?)?;
        state.discriminator.refresh_spectral()?;
    }
    if cfg.bank_active() {
        state.refresh_bank(x_real)?;
    }
    Ok(DStepReport {
        objective: losses::discriminator_objective(&terms, &w),
        terms,
    })
}

/// One generator update on `x_real` with explicit noise.
///
/// Encodes the real batch with the discriminator frozen, generates from
/// reconstruction and mixed codes in one pass, and minimises the weighted
/// adversarial, reconstruction and mode-seeking terms over the generator.
pub fn train_step_g<G: GeneratorNet, D: DiscriminatorNet>(
    state: &mut GanState<G, D>,
    x_real: &Tensor,
    noise: &GNoise,
) -> Result<GStepReport> {
    let b = batch_size_of(x_real)?;
    noise.mix.check(b)?;
    let w = *state.weights();
    let dim = state.generator.latent_dim();

    let enc = state.discriminator.forward(x_real, Mode::Frozen)?;
    let real = stats_rows(&to_f64(&enc.mu)?, &to_f64(&enc.log_var)?, dim, StatsRole::Real)?;
    let mixed = noise.mix.mix(&real)?;
    let mut codes = reparameterize_all(&real, &noise.eps_real)?;
    codes.extend(reparameterize_all(&mixed, &noise.eps_mixed)?);
    let z = codes_tensor(&codes, dim, x_real.dtype(), x_real.device())?;
    let images = state.generator.forward(&z, Mode::Train)?;
    let x_gen = images.narrow(0, b, b)?;
    let adv = state.discriminator.forward(&x_gen, Mode::Frozen)?.adv;

    let pixels = x_real.elem_count() / b;
    let host_images = to_f64(&images)?;
    let host_real = to_f64(x_real)?;
    let ir = losses::image_recon_loss_grad(
        Rows::new(&host_images[..b * pixels], pixels)?,
        Rows::new(&host_real, pixels)?,
    )?;
    let adv_loss = losses::generator_adv_loss_grad(&to_f64(&adv)?)?;

    let mut d_images = vec![0.0; 2 * b * pixels];
    for (g, d) in d_images.iter_mut().zip(&ir.d_first) {
        *g = w.lambda_ir * d;
    }
    let mut ms = 0.0;
    let mut skipped = 0;
    if let Some(order) = &noise.ms_order {
        if order.len() != 2 * b {
            return Err(Error::Validation("mode-seeking order must cover 2B generations".into()));
        }
        let pick = |data: &[f64], width: usize, idx: &mut dyn Iterator<Item = usize>| -> Vec<f64> {
            idx.flat_map(|i| data[i * width..(i + 1) * width].to_vec()).collect()
        };
        let flat_codes: Vec<f64> = codes.iter().flatten().copied().collect();
        let firsts: Vec<usize> = order.iter().step_by(2).copied().collect();
        let seconds: Vec<usize> = order.iter().skip(1).step_by(2).copied().collect();
        let img1 = pick(&host_images, pixels, &mut firsts.iter().copied());
        let img2 = pick(&host_images, pixels, &mut seconds.iter().copied());
        let z1 = pick(&flat_codes, dim, &mut firsts.iter().copied());
        let z2 = pick(&flat_codes, dim, &mut seconds.iter().copied());
        let g = losses::mode_seeking_loss_grad(
            Rows::new(&img1, pixels)?,
            Rows::new(&img2, pixels)?,
            Rows::new(&z1, dim)?,
            Rows::new(&z2, dim)?,
        )?;
        if g.pairs_used == 0 {
            log::warn!("mode seeking skipped every pair: latent codes coincide");
        }
        ms = g.value;
        skipped = g.pairs_skipped;
        for (p, (&i, &j)) in firsts.iter().zip(&seconds).enumerate() {
            for k in 0..pixels {
                d_images[i * pixels + k] += w.lambda_ms * g.d_img1[p * pixels + k];
                d_images[j * pixels + k] += w.lambda_ms * g.d_img2[p * pixels + k];
            }
        }
    }

    let terms = GeneratorTerms {
        gan: adv_loss.value,
        ir: ir.value,
        ms,
    };
    let mut s = Surrogate::new();
    s.push(&images, &d_images, 1.0)?;
    s.push(&adv, &adv_loss.grad, w.lambda_gan)?;
    if let Some(loss) = s.finish()? {
        state.g_opt.apply(&loss.backward()?)?;
    }
    Ok(GStepReport {
        objective: losses::generator_objective(&terms, &w),
        terms,
        ms_pairs_skipped: skipped,
    })
}

/// One telemetry row per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub iteration: u64,
    pub d_gan: f64,
    pub d_fr: f64,
    pub d_prior: f64,
    pub d_objective: f64,
    pub g_gan: f64,
    pub g_ir: f64,
    pub g_ms: f64,
    pub g_objective: f64,
    pub bank_size: usize,
    pub ms_pairs_skipped: usize,
    /// Seconds since training started; excluded from reproducibility checks.
    pub wall_seconds: f64,
}

impl TelemetryRow {
    /// Named loss values, for finiteness checks and plotting.
    pub fn losses(&self) -> [(&'static str, f64); 8] {
        [
            ("d_gan", self.d_gan),
            ("d_fr", self.d_fr),
            ("d_prior", self.d_prior),
            ("d_objective", self.d_objective),
            ("g_gan", self.g_gan),
            ("g_ir", self.g_ir),
            ("g_ms", self.g_ms),
            ("g_objective", self.g_objective),
        ]
    }

    /// Copy with the wall clock zeroed.
    pub fn without_clock(&self) -> Self {
        Self {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

fn check_images(images: &[Vec<f32>], model: &ModelConfig) -> Result<()> {
    model.validate()?;
    if model.image_channels != 1 {
        return Err(Error::Config("training data is single-channel".into()));
    }
    let side = model.image_size;
    if images.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if let Some(bad) = images.iter().position(|im| im.len() != side * side) {
        return Err(Error::Validation(format!("image {bad} is not {side}x{side}")));
    }
    Ok(())
}

/// Complete training state for the DCGAN pair, including the random
/// stream, so a checkpoint resumes bit-identically.
pub struct Trainer {
    pub state: GanState<Generator, Discriminator>,
    pub model: ModelConfig,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    images: Vec<Vec<f32>>,
    started: Instant,
    elapsed_before: f64,
}

impl Trainer {
    /// Fresh networks initialised from `config.seed`.
    pub fn new(images: Vec<Vec<f32>>, model: ModelConfig, config: TrainConfig, dtype: DType) -> Result<Self> {
        check_images(&images, &model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let device = Device::Cpu;
        let g = Generator::new(&model, &mut rng, dtype, &device)?;
        let d = Discriminator::new(&model, &mut rng, dtype, &device)?;
        Self::from_parts(GanState::new(g, d, config)?, model, rng, 0, images, 0.0)
    }

    pub(crate) fn from_parts(
        state: GanState<Generator, Discriminator>,
        model: ModelConfig,
        rng: ChaCha8Rng,
        iteration: u64,
        images: Vec<Vec<f32>>,
        elapsed_before: f64,
    ) -> Result<Self> {
        check_images(&images, &model)?;
        Ok(Self {
            state,
            model,
            rng,
            iteration,
            images,
            started: Instant::now(),
            elapsed_before,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn elapsed_seconds(&self) -> f64 {
        self.elapsed_before + self.started.elapsed().as_secs_f64()
    }

    /// Draws the next real batch, returning it with the dataset indices used.
    pub fn next_batch(&mut self) -> Result<(Tensor, Vec<usize>)> {
        let n = self.images.len();
        let b = self.state.config.batch_size;
        let indices: Vec<usize> = if n >= b {
            rand::seq::index::sample(&mut self.rng, n, b).into_vec()
        } else {
            (0..b).map(|_| self.rng.random_range(0..n)).collect()
        };
        let side = self.model.image_size;
        let mut flat = Vec::with_capacity(b * side * side);
        for &i in &indices {
            if self.state.config.augment {
                flat.extend(BasicAugment::draw(&mut self.rng).apply(&self.images[i], side)?);
            } else {
                flat.extend_from_slice(&self.images[i]);
            }
        }
        let dtype = self.state.generator.params()[0].1.dtype();
        let t = Tensor::from_vec(flat, (b, 1, side, side), &Device::Cpu)?.to_dtype(dtype)?;
        Ok((t, indices))
    }

    /// One full iteration: batch, discriminator step, generator step.
    pub fn step(&mut self) -> Result<TelemetryRow> {
        let (x, indices) = self.next_batch()?;
        let b = self.state.config.batch_size;
        let d = self.model.latent_dim;
        let p = self.state.config.mask_p;
        let ms = !self.state.config.disable_ms;
        let iteration = self.iteration + 1;
        let non_finite = |term: &str| Error::NonFinite {
            term: term.to_string(),
            iteration,
            batch: indices.clone(),
        };
        let dn = DNoise::draw(&mut self.rng, b, d, p)?;
        let dr = train_step_d(&mut self.state, &x, &dn).map_err(|e| match e {
            Error::Core(crgan_core::Error::NonFinite(what)) => non_finite(what),
            e => e,
        })?;
        let gn = GNoise::draw(&mut self.rng, b, d, p, ms)?;
        let gr = train_step_g(&mut self.state, &x, &gn).map_err(|e| match e {
            Error::Core(crgan_core::Error::NonFinite(what)) => non_finite(what),
            e => e,
        })?;
        self.iteration = iteration;
        let row = TelemetryRow {
            iteration,
            d_gan: dr.terms.gan,
            d_fr: dr.terms.fr,
            d_prior: dr.terms.prior,
            d_objective: dr.objective,
            g_gan: gr.terms.gan,
            g_ir: gr.terms.ir,
            g_ms: gr.terms.ms,
            g_objective: gr.objective,
            bank_size: self.state.bank.len(),
            ms_pairs_skipped: gr.ms_pairs_skipped,
            wall_seconds: self.elapsed_seconds(),
        };
        if let Some((name, _)) = row.losses().iter().find(|(_, v)| !v.is_finite()) {
            return Err(non_finite(name));
        }
        Ok(row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_draws_are_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            DNoise::draw(&mut a, 4, 8, 0.5).unwrap(),
            DNoise::draw(&mut b, 4, 8, 0.5).unwrap()
        );
        assert_eq!(
            GNoise::draw(&mut a, 4, 8, 0.5, true).unwrap(),
            GNoise::draw(&mut b, 4, 8, 0.5, true).unwrap()
        );
    }

    #[test]
    fn disabled_mode_seeking_draws_nothing_extra() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let g = GNoise::draw(&mut a, 4, 8, 0.5, false).unwrap();
        assert!(g.ms_order.is_none());
        let mix = MixNoise::draw(&mut b, 4, 8, 0.5).unwrap();
        latent::standard_normal(64, &mut b);
        assert_eq!(g.mix, mix);
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn scatter_routes_by_mask() {
        let mix = MixNoise {
            pairing: vec![1, 0],
            masks: vec![
                BinaryMask::from_bits(vec![true, false]).unwrap(),
                BinaryMask::from_bits(vec![false, false]).unwrap(),
            ],
        };
        let d_mixed = vec![
            StatsGrad {
                mu: vec![1.0, 2.0],
                log_var: vec![3.0, 4.0],
            },
            StatsGrad {
                mu: vec![10.0, 20.0],
                log_var: vec![0.0, 0.0],
            },
        ];
        let mut d_real = zero_grads(2, 2);
        mix.scatter(&d_mixed, &mut d_real, 1.0);
        assert_eq!(d_real[0].mu, vec![11.0, 20.0]);
        assert_eq!(d_real[1].mu, vec![0.0, 2.0]);
        assert_eq!(d_real[1].log_var, vec![0.0, 4.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            mask_p: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
