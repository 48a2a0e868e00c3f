//! Scalar training objectives with hand-derived gradients.
//!
//! Every loss comes in two flavours: a value-only function and a `*_grad`
//! function returning the value together with the gradient with respect to
//! every input. The trainer feeds these gradients back into the tensor graph,
//! so the functions here are the single definition of each objective.
//!
//! Reductions: image L1 distances sum over pixels and average over the batch;
//! all other batch terms are batch means.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure_finite, ensure_len};
use crate::latent::FeatureStats;
use crate::{Error, Result};

/// Added to vector norms inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Mode-seeking pairs whose latent L1 gap is below this are skipped.
pub const MS_MIN_LATENT_GAP: f64 = 1e-8;

/// Weights of the discriminator and generator objectives plus the contrastive
/// temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossWeights {
    /// Adversarial term, both players.
    pub lambda_gan: f64,
    /// Image reconstruction (generator).
    pub lambda_ir: f64,
    /// KL prior regularization (discriminator).
    pub lambda_pr: f64,
    /// Feature cycle consistency (discriminator).
    pub lambda_feat: f64,
    /// Mode seeking (generator).
    pub lambda_ms: f64,
    /// Temperature of the alignment-uniform loss.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gan: 1.0,
            lambda_ir: 1.0,
            lambda_pr: 1.0,
            lambda_feat: 0.1,
            lambda_ms: 0.1,
            tau: 0.2,
        }
    }
}

impl LossWeights {
    /// All weights zero; useful for isolation checks.
    pub fn zeros(tau: f64) -> Self {
        Self {
            lambda_gan: 0.0,
            lambda_ir: 0.0,
            lambda_pr: 0.0,
            lambda_feat: 0.0,
            lambda_ms: 0.0,
            tau,
        }
    }

    /// Checks that weights are finite and non-negative and `tau > 0`.
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda_gan,
            self.lambda_ir,
            self.lambda_pr,
            self.lambda_feat,
            self.lambda_ms,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter {
                name: "loss weight",
                reason: "must be finite and non-negative",
            });
        }
        validate_tau(self.tau)
    }
}

fn validate_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "tau",
            reason: "temperature must be positive",
        })
    }
}

/// Row-major view over `len / cols` vectors of `cols` entries each.
#[derive(Debug, Clone, Copy)]
pub struct Rows<'a> {
    data: &'a [f64],
    cols: usize,
}

impl<'a> Rows<'a> {
    /// Wraps `data`, which must hold a whole number of rows.
    pub fn new(data: &'a [f64], cols: usize) -> Result<Self> {
        if cols == 0 {
            return Err(Error::ZeroDimension);
        }
        if data.len() % cols != 0 {
            return Err(Error::Dimension {
                expected: (data.len() / cols + 1) * cols,
                actual: data.len(),
            });
        }
        Ok(Self { data, cols })
    }

    /// Number of rows.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols
    }

    /// Entries per row.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row `i`.
    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The backing slice.
    pub fn as_slice(&self) -> &'a [f64] {
        self.data
    }

    fn same_shape(&self, other: &Rows<'_>) -> Result<()> {
        ensure_len(self.cols, other.cols)?;
        ensure_len(self.data.len(), other.data.len())
    }
}

/// Loss value with gradients for two inputs of the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad {
    /// Loss value.
    pub value: f64,
    /// Gradient with respect to the first argument.
    pub d_first: Vec<f64>,
    /// Gradient with respect to the second argument.
    pub d_second: Vec<f64>,
}

/// Loss value with the gradient of its single input.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrad {
    /// Loss value.
    pub value: f64,
    /// Gradient with respect to the input, same layout.
    pub grad: Vec<f64>,
}

/// Gradient of a loss with respect to one [`FeatureStats`].
#[derive(Debug, Clone, PartialEq)]
pub struct StatsGrad {
    /// Gradient with respect to the mean.
    pub mu: Vec<f64>,
    /// Gradient with respect to the log-variance.
    pub log_var: Vec<f64>,
}

impl StatsGrad {
    fn zeros(d: usize) -> Self {
        Self {
            mu: vec![0.0; d],
            log_var: vec![0.0; d],
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| libm::fabs(x - y)).sum()
}

fn norm(a: &[f64]) -> f64 {
    libm::sqrt(a.iter().map(|x| x * x).sum())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    ensure_finite(values, "score batch")?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Cosine similarity with [`COSINE_EPS`] added to both norms.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_len(a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot(a, b) / ((na + COSINE_EPS) * (nb + COSINE_EPS)))
}

/// Cosine similarity and its gradients with respect to both arguments.
fn cosine_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    ensure_len(a.len(), b.len())?;
    let (ra, rb) = (norm(a), norm(b));
    if ra == 0.0 || rb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let (na, nb) = (ra + COSINE_EPS, rb + COSINE_EPS);
    let c = dot(a, b) / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y / (na * nb) - c * x / (na * ra))
        .collect();
    let db = b
        .iter()
        .zip(a)
        .map(|(&y, &x)| x / (na * nb) - c * y / (nb * rb))
        .collect();
    Ok((c, da, db))
}

fn axpy(acc: &mut [f64], scale: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += scale * v;
    }
}

/// Log-sum-exp with max subtraction, also returning the softmax weights.
fn log_softmax_normalizer(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&s| libm::exp(s - max)).collect();
    let total: f64 = exps.iter().sum();
    let probs = exps.into_iter().map(|e| e / total).collect();
    (max + libm::log(total), probs)
}

// ---------------------------------------------------------------------------
// Image reconstruction

/// Batch mean of per-image L1 distances `‖recon − real‖₁`.
pub fn image_recon_loss(recon: Rows<'_>, real: Rows<'_>) -> Result<f64> {
    Ok(image_recon_loss_grad(recon, real)?.value)
}

/// [`image_recon_loss`] with gradients for both images (`d_first` for the
/// reconstruction). The subgradient at a tie is zero.
pub fn image_recon_loss_grad(recon: Rows<'_>, real: Rows<'_>) -> Result<PairGrad> {
    recon.same_shape(&real)?;
    let batch = recon.rows();
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    ensure_finite(recon.as_slice(), "reconstruction")?;
    ensure_finite(real.as_slice(), "real image")?;
    let inv = 1.0 / batch as f64;
    let value = (0..batch).map(|b| l1_distance(recon.row(b), real.row(b))).sum::<f64>() * inv;
    let d_first: Vec<f64> = recon
        .as_slice()
        .iter()
        .zip(real.as_slice())
        .map(|(r, x)| sign(r - x) * inv)
        .collect();
    let d_second = d_first.iter().map(|g| -g).collect();
    Ok(PairGrad {
        value,
        d_first,
        d_second,
    })
}

// ---------------------------------------------------------------------------
// Adversarial terms

/// Critic objective `mean(d_fake) − mean(d_real)`.
pub fn critic_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    Ok(mean(d_fake)? - mean(d_real)?)
}

/// [`critic_loss`] with gradients; `d_first` is for `d_real`.
pub fn critic_loss_grad(d_real: &[f64], d_fake: &[f64]) -> Result<PairGrad> {
    let value = critic_loss(d_real, d_fake)?;
    Ok(PairGrad {
        value,
        d_first: vec![-1.0 / d_real.len() as f64; d_real.len()],
        d_second: vec![1.0 / d_fake.len() as f64; d_fake.len()],
    })
}

/// Generator adversarial objective `−mean(d_fake)`.
pub fn generator_adv_loss(d_fake: &[f64]) -> Result<f64> {
    Ok(-mean(d_fake)?)
}

/// [`generator_adv_loss`] with its gradient.
pub fn generator_adv_loss_grad(d_fake: &[f64]) -> Result<ScalarGrad> {
    let value = generator_adv_loss(d_fake)?;
    Ok(ScalarGrad {
        value,
        grad: vec![-1.0 / d_fake.len() as f64; d_fake.len()],
    })
}

// ---------------------------------------------------------------------------
// Prior regularization

/// Batch mean of the closed-form `KL(N(mu, sigma²) ‖ N(0, I))`.
pub fn prior_kl(stats: &[FeatureStats]) -> Result<f64> {
    Ok(prior_kl_grad(stats)?.0)
}

/// [`prior_kl`] with per-item gradients.
pub fn prior_kl_grad(stats: &[FeatureStats]) -> Result<(f64, Vec<StatsGrad>)> {
    if stats.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / stats.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(stats.len());
    for s in stats {
        ensure_finite(s.mu(), "feature mean")?;
        ensure_finite(s.log_var(), "feature log-variance")?;
        let mut g = StatsGrad::zeros(s.dim());
        for i in 0..s.dim() {
            let (m, lv) = (s.mu()[i], s.log_var()[i]);
            let var = libm::exp(lv);
            value += 0.5 * (m * m + var - lv - 1.0) * inv;
            g.mu[i] = m * inv;
            g.log_var[i] = 0.5 * (var - 1.0) * inv;
        }
        grads.push(g);
    }
    Ok((value, grads))
}

// ---------------------------------------------------------------------------
// Alignment-uniform (InfoNCE-style) loss

/// Gradients of [`alignment_uniform_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct AlignUniformGrad {
    /// Loss value.
    pub value: f64,
    /// Gradient with respect to the query.
    pub d_query: Vec<f64>,
    /// Gradient with respect to the positive key.
    pub d_positive: Vec<f64>,
    /// Gradient with respect to each negative key.
    pub d_negatives: Vec<Vec<f64>>,
}

/// `−log( e^{sim(q,k⁺)/τ} / (e^{sim(q,k⁺)/τ} + Σ e^{sim(q,k⁻)/τ}) )` with
/// cosine similarity. With no negatives the loss is exactly zero.
pub fn alignment_uniform_loss<V: AsRef<[f64]>>(
    query: &[f64],
    positive: &[f64],
    negatives: &[V],
    tau: f64,
) -> Result<f64> {
    validate_tau(tau)?;
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(cosine_similarity(query, positive)? / tau);
    for n in negatives {
        logits.push(cosine_similarity(query, n.as_ref())? / tau);
    }
    let (lse, _) = log_softmax_normalizer(&logits);
    Ok(lse - logits[0])
}

/// [`alignment_uniform_loss`] with gradients for every argument.
pub fn alignment_uniform_loss_grad<V: AsRef<[f64]>>(
    query: &[f64],
    positive: &[f64],
    negatives: &[V],
    tau: f64,
) -> Result<AlignUniformGrad> {
    validate_tau(tau)?;
    let (c0, dq0, dk0) = cosine_grad(query, positive)?;
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(c0 / tau);
    let mut neg_parts = Vec::with_capacity(negatives.len());
    for n in negatives {
        let (c, dq, dn) = cosine_grad(query, n.as_ref())?;
        logits.push(c / tau);
        neg_parts.push((dq, dn));
    }
    let (lse, probs) = log_softmax_normalizer(&logits);
    let value = lse - logits[0];

    let w0 = (probs[0] - 1.0) / tau;
    let mut d_query = vec![0.0; query.len()];
    axpy(&mut d_query, w0, &dq0);
    let d_positive = dk0.iter().map(|g| w0 * g).collect();
    let mut d_negatives = Vec::with_capacity(negatives.len());
    for ((dq, dn), p) in neg_parts.iter().zip(&probs[1..]) {
        let w = p / tau;
        axpy(&mut d_query, w, dq);
        d_negatives.push(dn.iter().map(|g| w * g).collect());
    }
    Ok(AlignUniformGrad {
        value,
        d_query,
        d_positive,
        d_negatives,
    })
}

// ---------------------------------------------------------------------------
// Feature cycle consistency

/// Gradients of [`feature_cycle_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCycleGrad {
    /// Loss value.
    pub value: f64,
    /// Gradient per generated-image encoding.
    pub d_generated: Vec<StatsGrad>,
    /// Gradient per mixed encoding.
    pub d_mixed: Vec<StatsGrad>,
    /// Gradient per negative mean vector.
    pub d_neg_mu: Vec<Vec<f64>>,
    /// Gradient per negative sigma vector.
    pub d_neg_sigma: Vec<Vec<f64>>,
}

fn check_aligned(generated: &[FeatureStats], mixed: &[FeatureStats]) -> Result<()> {
    if generated.is_empty() {
        return Err(Error::EmptyBatch);
    }
    ensure_len(generated.len(), mixed.len())?;
    for (g, m) in generated.iter().zip(mixed) {
        ensure_len(g.dim(), m.dim())?;
    }
    Ok(())
}

/// Batch mean of `AU(mu_g, mu_m, neg_mu) + AU(sigma_g, sigma_m, neg_sigma)`.
///
/// `generated[i]` must be the re-encoding of the image generated from
/// `mixed[i]`. The sigma branch compares standard deviations, recovered as
/// `exp(0.5 * log_var)`.
pub fn feature_cycle_loss<V: AsRef<[f64]>>(
    generated: &[FeatureStats],
    mixed: &[FeatureStats],
    neg_mu: &[V],
    neg_sigma: &[V],
    tau: f64,
) -> Result<f64> {
    check_aligned(generated, mixed)?;
    let mut total = 0.0;
    for (g, m) in generated.iter().zip(mixed) {
        total += alignment_uniform_loss(g.mu(), m.mu(), neg_mu, tau)?;
        total += alignment_uniform_loss(&g.sigma(), &m.sigma(), neg_sigma, tau)?;
    }
    Ok(total / generated.len() as f64)
}

/// [`feature_cycle_loss`] with gradients for every argument. Sigma-branch
/// gradients are mapped back onto log-variance.
pub fn feature_cycle_loss_grad<V: AsRef<[f64]>>(
    generated: &[FeatureStats],
    mixed: &[FeatureStats],
    neg_mu: &[V],
    neg_sigma: &[V],
    tau: f64,
) -> Result<FeatureCycleGrad> {
    check_aligned(generated, mixed)?;
    let inv = 1.0 / generated.len() as f64;
    let d = generated[0].dim();
    let mut out = FeatureCycleGrad {
        value: 0.0,
        d_generated: Vec::with_capacity(generated.len()),
        d_mixed: Vec::with_capacity(mixed.len()),
        d_neg_mu: neg_mu.iter().map(|v| vec![0.0; v.as_ref().len()]).collect(),
        d_neg_sigma: neg_sigma.iter().map(|v| vec![0.0; v.as_ref().len()]).collect(),
    };
    for (g, m) in generated.iter().zip(mixed) {
        let mu_part = alignment_uniform_loss_grad(g.mu(), m.mu(), neg_mu, tau)?;
        let (sg, sm) = (g.sigma(), m.sigma());
        let sigma_part = alignment_uniform_loss_grad(&sg, &sm, neg_sigma, tau)?;
        out.value += (mu_part.value + sigma_part.value) * inv;

        let mut dg = StatsGrad::zeros(d);
        let mut dm = StatsGrad::zeros(d);
        for i in 0..d {
            dg.mu[i] = mu_part.d_query[i] * inv;
            dm.mu[i] = mu_part.d_positive[i] * inv;
            // d sigma / d log_var = sigma / 2
            dg.log_var[i] = sigma_part.d_query[i] * 0.5 * sg[i] * inv;
            dm.log_var[i] = sigma_part.d_positive[i] * 0.5 * sm[i] * inv;
        }
        out.d_generated.push(dg);
        out.d_mixed.push(dm);
        for (acc, gn) in out.d_neg_mu.iter_mut().zip(&mu_part.d_negatives) {
            axpy(acc, inv, gn);
        }
        for (acc, gn) in out.d_neg_sigma.iter_mut().zip(&sigma_part.d_negatives) {
            axpy(acc, inv, gn);
        }
    }
    Ok(out)
}

/// Gradients of [`feature_distance_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDistanceGrad {
    /// Loss value.
    pub value: f64,
    /// Gradient per generated-image encoding.
    pub d_generated: Vec<StatsGrad>,
    /// Gradient per mixed encoding.
    pub d_mixed: Vec<StatsGrad>,
}

/// Plain-distance feature reconstruction, `mean ‖mu_g − mu_m‖₂ + ‖sigma_g − sigma_m‖₂`.
///
/// Ablation only: this form admits the degenerate "mixture is just another
/// sample" solution that [`feature_cycle_loss`] rules out.
pub fn feature_distance_loss(generated: &[FeatureStats], mixed: &[FeatureStats]) -> Result<f64> {
    Ok(feature_distance_loss_grad(generated, mixed)?.value)
}

/// [`feature_distance_loss`] with gradients; zero subgradient at coincidence.
pub fn feature_distance_loss_grad(generated: &[FeatureStats], mixed: &[FeatureStats]) -> Result<FeatureDistanceGrad> {
    check_aligned(generated, mixed)?;
    let inv = 1.0 / generated.len() as f64;
    let mut out = FeatureDistanceGrad {
        value: 0.0,
        d_generated: Vec::with_capacity(generated.len()),
        d_mixed: Vec::with_capacity(mixed.len()),
    };
    for (g, m) in generated.iter().zip(mixed) {
        let d = g.dim();
        let (sg, sm) = (g.sigma(), m.sigma());
        let diff_mu: Vec<f64> = g.mu().iter().zip(m.mu()).map(|(a, b)| a - b).collect();
        let diff_sigma: Vec<f64> = sg.iter().zip(&sm).map(|(a, b)| a - b).collect();
        let (n_mu, n_sigma) = (norm(&diff_mu), norm(&diff_sigma));
        out.value += (n_mu + n_sigma) * inv;
        let mut dg = StatsGrad::zeros(d);
        let mut dm = StatsGrad::zeros(d);
        for i in 0..d {
            if n_mu > 0.0 {
                dg.mu[i] = diff_mu[i] / n_mu * inv;
                dm.mu[i] = -dg.mu[i];
            }
            if n_sigma > 0.0 {
                let gs = diff_sigma[i] / n_sigma * inv;
                dg.log_var[i] = gs * 0.5 * sg[i];
                dm.log_var[i] = -gs * 0.5 * sm[i];
            }
        }
        out.d_generated.push(dg);
        out.d_mixed.push(dm);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Mode seeking

/// Gradients of [`mode_seeking_loss`] and pair bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSeekingGrad {
    /// Loss value (zero when every pair was skipped).
    pub value: f64,
    /// Gradient with respect to the first image of each pair.
    pub d_img1: Vec<f64>,
    /// Gradient with respect to the second image of each pair.
    pub d_img2: Vec<f64>,
    /// Gradient with respect to the first latent code of each pair.
    pub d_z1: Vec<f64>,
    /// Gradient with respect to the second latent code of each pair.
    pub d_z2: Vec<f64>,
    /// Pairs that entered the mean.
    pub pairs_used: usize,
    /// Pairs dropped because their latent codes nearly coincide.
    pub pairs_skipped: usize,
}

/// `−mean ‖G(z1) − G(z2)‖₁ / ‖z1 − z2‖₁` over aligned pairs, where the images
/// are the already generated `G(z)`.
pub fn mode_seeking_loss(img1: Rows<'_>, img2: Rows<'_>, z1: Rows<'_>, z2: Rows<'_>) -> Result<f64> {
    Ok(mode_seeking_loss_grad(img1, img2, z1, z2)?.value)
}

/// [`mode_seeking_loss`] with gradients. Pairs with `‖z1 − z2‖₁ <`
/// [`MS_MIN_LATENT_GAP`] are skipped; the caller should warn when
/// `pairs_used == 0`.
pub fn mode_seeking_loss_grad(img1: Rows<'_>, img2: Rows<'_>, z1: Rows<'_>, z2: Rows<'_>) -> Result<ModeSeekingGrad> {
    img1.same_shape(&img2)?;
    z1.same_shape(&z2)?;
    ensure_len(img1.rows(), z1.rows())?;
    if img1.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    for (rows, what) in [
        (img1, "image"),
        (img2, "image"),
        (z1, "latent code"),
        (z2, "latent code"),
    ] {
        ensure_finite(rows.as_slice(), what)?;
    }
    let pairs = img1.rows();
    let mut ratios = Vec::with_capacity(pairs);
    for p in 0..pairs {
        let den = l1_distance(z1.row(p), z2.row(p));
        if den < MS_MIN_LATENT_GAP {
            ratios.push(None);
        } else {
            ratios.push(Some((l1_distance(img1.row(p), img2.row(p)), den)));
        }
    }
    let used = ratios.iter().filter(|r| r.is_some()).count();
    let mut out = ModeSeekingGrad {
        value: 0.0,
        d_img1: vec![0.0; img1.as_slice().len()],
        d_img2: vec![0.0; img2.as_slice().len()],
        d_z1: vec![0.0; z1.as_slice().len()],
        d_z2: vec![0.0; z2.as_slice().len()],
        pairs_used: used,
        pairs_skipped: pairs - used,
    };
    if used == 0 {
        return Ok(out);
    }
    let inv = 1.0 / used as f64;
    let (ic, zc) = (img1.cols(), z1.cols());
    for (p, ratio) in ratios.iter().enumerate() {
        let Some((num, den)) = *ratio else { continue };
        out.value -= num / den * inv;
        for i in 0..ic {
            let g = -sign(img1.row(p)[i] - img2.row(p)[i]) / den * inv;
            out.d_img1[p * ic + i] = g;
            out.d_img2[p * ic + i] = -g;
        }
        for i in 0..zc {
            let g = num * sign(z1.row(p)[i] - z2.row(p)[i]) / (den * den) * inv;
            out.d_z1[p * zc + i] = g;
            out.d_z2[p * zc + i] = -g;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Full objectives

/// Unweighted discriminator terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DiscriminatorTerms {
    /// Critic loss.
    pub gan: f64,
    /// Feature cycle consistency.
    pub fr: f64,
    /// KL prior on real and generated encodings.
    pub prior: f64,
}

/// Unweighted generator terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeneratorTerms {
    /// Generator adversarial loss.
    pub gan: f64,
    /// Image reconstruction.
    pub ir: f64,
    /// Mode seeking.
    pub ms: f64,
}

/// `λ_gan·gan + λ_feat·fr + λ_pr·prior`.
pub fn discriminator_objective(terms: &DiscriminatorTerms, w: &LossWeights) -> f64 {
    w.lambda_gan * terms.gan + w.lambda_feat * terms.fr + w.lambda_pr * terms.prior
}

/// `λ_gan·gan + λ_ir·ir + λ_ms·ms`.
pub fn generator_objective(terms: &GeneratorTerms, w: &LossWeights) -> f64 {
    w.lambda_gan * terms.gan + w.lambda_ir * terms.ir + w.lambda_ms * terms.ms
}

// ---------------------------------------------------------------------------
// NT-Xent

/// Index of the other view of row `i` among `2n` rows, where rows `i` and
/// `i + n` are two views of the same image.
pub fn nt_xent_positive(i: usize, n: usize) -> usize {
    if i < n {
        i + n
    } else {
        i - n
    }
}

/// Mean over all `2N` anchors of
/// `−log( e^{sim(z_i,z_j)/τ} / Σ_{k≠i} e^{sim(z_i,z_k)/τ} )`,
/// with row `i` paired to row `i + N`.
pub fn nt_xent_loss(embeddings: Rows<'_>, tau: f64) -> Result<f64> {
    Ok(nt_xent_loss_grad(embeddings, tau)?.value)
}

/// [`nt_xent_loss`] with the gradient for every embedding row.
pub fn nt_xent_loss_grad(embeddings: Rows<'_>, tau: f64) -> Result<ScalarGrad> {
    validate_tau(tau)?;
    let total = embeddings.rows();
    if total < 4 || total % 2 != 0 {
        return Err(Error::InvalidParameter {
            name: "embeddings",
            reason: "need an even number of rows forming at least two view pairs",
        });
    }
    ensure_finite(embeddings.as_slice(), "embedding")?;
    let n = total / 2;
    let d = embeddings.cols();

    // Pairwise cosine similarities and their gradients, upper triangle.
    let mut sim = vec![0.0; total * total];
    let mut dsim: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(total * (total - 1) / 2);
    for i in 0..total {
        for k in (i + 1)..total {
            let (c, da, db) = cosine_grad(embeddings.row(i), embeddings.row(k))?;
            sim[i * total + k] = c;
            sim[k * total + i] = c;
            dsim.push((da, db));
        }
    }
    let tri = |i: usize, k: usize| i * total - i * (i + 1) / 2 + (k - i - 1);

    // dL/dsim accumulated symmetrically.
    let mut weight = vec![0.0; total * total];
    let inv = 1.0 / total as f64;
    let mut value = 0.0;
    for i in 0..total {
        let j = nt_xent_positive(i, n);
        let others: Vec<usize> = (0..total).filter(|&k| k != i).collect();
        let logits: Vec<f64> = others.iter().map(|&k| sim[i * total + k] / tau).collect();
        let (lse, probs) = log_softmax_normalizer(&logits);
        value += (lse - sim[i * total + j] / tau) * inv;
        for (&k, p) in others.iter().zip(&probs) {
            let target = if k == j { 1.0 } else { 0.0 };
            weight[i * total + k] += (p - target) / tau * inv;
        }
    }

    let mut grad = vec![0.0; total * d];
    for i in 0..total {
        for k in (i + 1)..total {
            let w = weight[i * total + k] + weight[k * total + i];
            if w == 0.0 {
                continue;
            }
            let (da, db) = &dsim[tri(i, k)];
            axpy(&mut grad[i * d..(i + 1) * d], w, da);
            axpy(&mut grad[k * d..(k + 1) * d], w, db);
        }
    }
    Ok(ScalarGrad { value, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::StatsRole;

    fn stats(mu: Vec<f64>, log_var: Vec<f64>) -> FeatureStats {
        FeatureStats::new(mu, log_var, StatsRole::Real).unwrap()
    }

    fn rows(data: &[f64], cols: usize) -> Rows<'_> {
        Rows::new(data, cols).unwrap()
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_gan, w.lambda_ir, w.lambda_pr), (1.0, 1.0, 1.0));
        assert_eq!((w.lambda_feat, w.lambda_ms, w.tau), (0.1, 0.1, 0.2));
        assert!(w.validate().is_ok());
        assert!(LossWeights { tau: 0.0, ..w }.validate().is_err());
        assert!(LossWeights { lambda_ms: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn recon_examples() {
        let x = [0.3, -0.2, 0.9, 0.1];
        assert_eq!(image_recon_loss(rows(&x, 4), rows(&x, 4)).unwrap(), 0.0);
        assert_eq!(image_recon_loss(rows(&[1.0; 4], 4), rows(&[0.0; 4], 4)).unwrap(), 4.0);
        // Two images: per-image sums 4 and 0, mean 2.
        let r = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(image_recon_loss(rows(&r, 4), rows(&[0.0; 8], 4)).unwrap(), 2.0);
        assert!(image_recon_loss(rows(&x, 4), rows(&x[..2], 2)).is_err());
    }

    #[test]
    fn critic_examples() {
        assert_eq!(critic_loss(&[0.75, 0.75], &[0.75, 0.75, 0.75]).unwrap(), 0.0);
        assert_eq!(critic_loss(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), -2.0);
        let a = [0.2, -1.3, 4.0];
        let b = [0.5, 2.5];
        assert_eq!(critic_loss(&a, &b).unwrap(), -critic_loss(&b, &a).unwrap());
        assert_eq!(critic_loss(&[], &[1.0]), Err(Error::EmptyBatch));
    }

    #[test]
    fn generator_adv_examples() {
        assert_eq!(generator_adv_loss(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(generator_adv_loss(&[2.0, 4.0]).unwrap(), -3.0);
        assert_eq!(generator_adv_loss(&[]), Err(Error::EmptyBatch));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(prior_kl(&[stats(vec![0.0; 3], vec![0.0; 3])]).unwrap(), 0.0);
        assert!((prior_kl(&[stats(vec![1.0], vec![0.0])]).unwrap() - 0.5).abs() < 1e-15);
        let one = stats(vec![0.4, -1.1], vec![0.3, -0.7]);
        let single = prior_kl(&[one.clone()]).unwrap();
        let doubled = prior_kl(&[one.clone(), one]).unwrap();
        assert!((single - doubled).abs() < 1e-15);
    }

    #[test]
    fn au_examples() {
        let q = [0.3, -0.4, 1.0];
        let none: [&[f64]; 0] = [];
        assert_eq!(alignment_uniform_loss(&q, &[1.0, 2.0, 3.0], &none, 0.2).unwrap(), 0.0);

        // All four keys equal to the query: uniform softmax over 4 terms.
        let negs = [q, q, q];
        let v = alignment_uniform_loss(&q, &q, &negs, 0.5).unwrap();
        assert!((v - libm::log(4.0)).abs() < 1e-9);

        let v = alignment_uniform_loss(&[1.0, 0.0], &[1.0, 0.0], &[[0.0, 1.0]], 0.2).unwrap();
        let expected = -libm::log(libm::exp(5.0) / (libm::exp(5.0) + 1.0));
        assert!((v - expected).abs() < 1e-9);
        assert!((v - 0.00672).abs() < 5e-6);

        assert_eq!(
            alignment_uniform_loss(&[0.0, 0.0], &[1.0, 0.0], &none, 0.2),
            Err(Error::ZeroNorm)
        );
    }

    #[test]
    fn feature_cycle_examples() {
        let a = stats(vec![0.2, 0.5], vec![0.1, -0.3]);
        let none: [Vec<f64>; 0] = [];
        let v = feature_cycle_loss(&[a.clone()], &[a.clone()], &none, &none, 0.2).unwrap();
        assert_eq!(v, 0.0);

        let bank_mu = vec![a.mu().to_vec(); 5];
        let bank_sigma = vec![a.sigma(); 5];
        let v = feature_cycle_loss(
            &[a.clone(), a.clone()],
            &[a.clone(), a.clone()],
            &bank_mu,
            &bank_sigma,
            0.2,
        )
        .unwrap();
        assert!((v - 2.0 * libm::log(6.0)).abs() < 1e-9);

        assert!(feature_cycle_loss(&[a.clone()], &[a.clone(), a], &none, &none, 0.2).is_err());
    }

    #[test]
    fn mode_seeking_examples() {
        // Collapsed generator: identical images for distinct codes.
        let img = [0.1, 0.2, 0.3];
        let v = mode_seeking_loss(rows(&img, 3), rows(&img, 3), rows(&[0.0, 1.0], 2), rows(&[1.0, 0.0], 2)).unwrap();
        assert_eq!(v, 0.0);

        // Identity generator on 1-d codes.
        let z1 = [0.5, -2.0, 3.0];
        let z2 = [1.5, 1.0, -0.25];
        let v = mode_seeking_loss(rows(&z1, 1), rows(&z2, 1), rows(&z1, 1), rows(&z2, 1)).unwrap();
        assert!((v + 1.0).abs() < 1e-15);

        // Image gap 6, code gap 2.
        let v = mode_seeking_loss(
            rows(&[3.0, 3.0], 2),
            rows(&[0.0, 0.0], 2),
            rows(&[1.0, 1.0], 2),
            rows(&[0.0, 0.0], 2),
        )
        .unwrap();
        assert_eq!(v, -3.0);
    }

    #[test]
    fn mode_seeking_skips_coincident_codes() {
        let g = mode_seeking_loss_grad(
            rows(&[3.0, 1.0], 1),
            rows(&[0.0, 0.0], 1),
            rows(&[1.0, 2.0], 1),
            rows(&[1.0, 0.0], 1),
        )
        .unwrap();
        assert_eq!((g.pairs_used, g.pairs_skipped), (1, 1));
        assert_eq!(g.value, -0.5);

        let g = mode_seeking_loss_grad(rows(&[3.0], 1), rows(&[0.0], 1), rows(&[1.0], 1), rows(&[1.0], 1)).unwrap();
        assert_eq!((g.value, g.pairs_used, g.pairs_skipped), (0.0, 0, 1));
    }

    #[test]
    fn objective_examples() {
        let w = LossWeights::default();
        let zero = LossWeights::zeros(0.2);
        let d = DiscriminatorTerms {
            gan: 1.0,
            fr: 2.0,
            prior: 3.0,
        };
        assert_eq!(discriminator_objective(&d, &zero), 0.0);
        assert!((discriminator_objective(&d, &w) - 4.2).abs() < 1e-12);
        let g = GeneratorTerms {
            gan: -1.0,
            ir: 0.5,
            ms: -2.0,
        };
        assert_eq!(generator_objective(&g, &zero), 0.0);
        assert!((generator_objective(&g, &w) + 0.7).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_examples() {
        // Positive pairs aligned, cross pairs orthogonal, tau = 1.
        let z = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let v = nt_xent_loss(rows(&z, 2), 1.0).unwrap();
        let expected = -libm::log(core::f64::consts::E / (core::f64::consts::E + 2.0));
        assert!((v - expected).abs() < 1e-9);
        assert!((v - 0.551).abs() < 5e-4);

        // All embeddings equal: uniform over 2N - 1 = 5 others.
        let same = [0.3, 0.7].repeat(6);
        let v = nt_xent_loss(rows(&same, 2), 0.2).unwrap();
        assert!((v - libm::log(5.0)).abs() < 1e-9);

        assert!(nt_xent_loss(rows(&[1.0, 0.0, 0.0, 1.0], 2), 0.2).is_err());
        let mut zero = z;
        zero[0] = 0.0;
        assert_eq!(nt_xent_loss(rows(&zero, 2), 0.2), Err(Error::ZeroNorm));
    }
}
