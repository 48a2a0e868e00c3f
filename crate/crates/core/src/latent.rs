//! Latent-space primitives: binary masks, channel interpolation, statistic
//! mixing and Gaussian reparameterization.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_finite, ensure_len};
use crate::{Error, Result};

/// Which population a set of feature statistics was encoded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum StatsRole {
    /// Encoded from a real image.
    Real,
    /// Channel-interpolated from two real encodings.
    Mixed,
    /// Encoded from a generated image.
    Generated,
}

/// Where a latent code came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LatentSource {
    /// Reparameterized real statistics (reconstruction path).
    Real,
    /// Reparameterized mixed statistics (generation path).
    Mixed,
    /// Drawn directly from the N(0, I) prior at synthesis time.
    Prior,
}

/// Diagonal Gaussian posterior emitted by the discriminator feature head.
///
/// The head predicts `log_var` rather than `sigma`; `sigma = exp(0.5 * log_var)`
/// is therefore always strictly positive.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureStats {
    mu: Vec<f64>,
    log_var: Vec<f64>,
    role: StatsRole,
}

impl FeatureStats {
    /// Builds statistics, validating that both halves share a positive
    /// length and are finite.
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>, role: StatsRole) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::ZeroDimension);
        }
        ensure_len(mu.len(), log_var.len())?;
        ensure_finite(&mu, "feature mean")?;
        ensure_finite(&log_var, "feature log-variance")?;
        Ok(Self { mu, log_var, role })
    }

    /// Latent dimension.
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Mean vector.
    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Log-variance vector.
    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    /// Standard deviation, `exp(0.5 * log_var)`.
    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.iter().map(|&lv| libm::exp(0.5 * lv)).collect()
    }

    /// Population tag.
    pub fn role(&self) -> StatsRole {
        self.role
    }

    /// Same values under a different tag.
    pub fn with_role(mut self, role: StatsRole) -> Self {
        self.role = role;
        self
    }
}

/// Per-channel 0/1 selector for channel interpolation.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BinaryMask {
    bits: Vec<bool>,
}

impl BinaryMask {
    /// Wraps explicit bits.
    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::ZeroDimension);
        }
        Ok(Self { bits })
    }

    /// Mask of all ones (selects the first operand everywhere).
    pub fn ones(d: usize) -> Result<Self> {
        Self::from_bits(alloc::vec![true; d])
    }

    /// Mask of all zeros (selects the second operand everywhere).
    pub fn zeros(d: usize) -> Result<Self> {
        Self::from_bits(alloc::vec![false; d])
    }

    /// Number of channels.
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    /// Always false; masks are non-empty by construction.
    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Raw bits.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of set bits.
    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// The mask as 0.0 / 1.0 weights.
    pub fn to_weights(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// A latent code fed to the generator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatentCode {
    z: Vec<f64>,
    source: LatentSource,
}

impl LatentCode {
    /// Wraps a finite, non-empty vector.
    pub fn new(z: Vec<f64>, source: LatentSource) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::ZeroDimension);
        }
        ensure_finite(&z, "latent code")?;
        Ok(Self { z, source })
    }

    /// Draws `z ~ N(0, I)`.
    pub fn sample_prior<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Self> {
        Self::new(standard_normal(d, rng), LatentSource::Prior)
    }

    /// Code values.
    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// Consumes the code, returning its values.
    pub fn into_vec(self) -> Vec<f64> {
        self.z
    }

    /// Provenance tag.
    pub fn source(&self) -> LatentSource {
        self.source
    }

    /// Latent dimension.
    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// Samples a mask whose bits are independently 1 with probability `p`.
pub fn sample_mask<R: Rng + ?Sized>(d: usize, p: f64, rng: &mut R) -> Result<BinaryMask> {
    if d == 0 {
        return Err(Error::ZeroDimension);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter {
            name: "mask probability",
            reason: "must lie in [0, 1]",
        });
    }
    // `random::<f64>()` lies in [0, 1), so p = 1 always sets and p = 0 never does.
    let bits = (0..d).map(|_| rng.random::<f64>() < p).collect();
    Ok(BinaryMask { bits })
}

/// `K ⊙ x + (1 − K) ⊙ y`: channel `i` comes from `x` where the mask is set,
/// from `y` otherwise.
pub fn channel_interpolate(x: &[f64], y: &[f64], mask: &BinaryMask) -> Result<Vec<f64>> {
    ensure_len(mask.len(), x.len())?;
    ensure_len(mask.len(), y.len())?;
    Ok(mask
        .bits
        .iter()
        .zip(x.iter().zip(y))
        .map(|(&k, (&a, &b))| if k { a } else { b })
        .collect())
}

/// Mixes two real encodings with one shared mask for both the mean and the
/// log-variance. Selecting log-variance channels is the same as selecting
/// the corresponding sigma channels, since sigma is an element-wise map of
/// log-variance.
pub fn interpolate_stats(a: &FeatureStats, b: &FeatureStats, mask: &BinaryMask) -> Result<FeatureStats> {
    ensure_len(a.dim(), b.dim())?;
    let mu = channel_interpolate(&a.mu, &b.mu, mask)?;
    let log_var = channel_interpolate(&a.log_var, &b.log_var, mask)?;
    Ok(FeatureStats {
        mu,
        log_var,
        role: StatsRole::Mixed,
    })
}

/// `z = mu + eps ⊙ exp(0.5 · log_var)` with caller-supplied noise.
pub fn reparameterize(stats: &FeatureStats, eps: &[f64]) -> Result<LatentCode> {
    ensure_len(stats.dim(), eps.len())?;
    ensure_finite(&stats.mu, "feature mean")?;
    ensure_finite(&stats.log_var, "feature log-variance")?;
    ensure_finite(eps, "reparameterization noise")?;
    let z: Vec<f64> = stats
        .mu
        .iter()
        .zip(&stats.log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + e * libm::exp(0.5 * lv))
        .collect();
    let source = match stats.role {
        StatsRole::Real => LatentSource::Real,
        // Generated statistics never feed the generator in training; treat
        // them like any other non-real mixture.
        StatsRole::Mixed | StatsRole::Generated => LatentSource::Mixed,
    };
    LatentCode::new(z, source)
}

/// Reparameterization with `eps ~ N(0, I)` drawn from `rng`.
pub fn reparameterize_with<R: Rng + ?Sized>(stats: &FeatureStats, rng: &mut R) -> Result<LatentCode> {
    let eps = standard_normal(stats.dim(), rng);
    reparameterize(stats, &eps)
}

/// `n` independent standard-normal draws.
pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random partner assignment with no fixed points: `partner[i] != i` for
/// every `i`. Built as a single random cycle over a shuffled order, so every
/// item is also somebody else's partner exactly once.
pub fn derangement_pairing<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Pairing(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut partner = alloc::vec![0; n];
    for i in 0..n {
        partner[order[i]] = order[(i + 1) % n];
    }
    Ok(partner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn real(mu: Vec<f64>, log_var: Vec<f64>) -> FeatureStats {
        FeatureStats::new(mu, log_var, StatsRole::Real).unwrap()
    }

    #[test]
    fn degenerate_mask_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask(4, 1.0, &mut rng).unwrap().bits(), &[true; 4]);
        assert_eq!(sample_mask(4, 0.0, &mut rng).unwrap().bits(), &[false; 4]);
    }

    #[test]
    fn mask_rejects_zero_dim_and_bad_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask(0, 0.5, &mut rng), Err(Error::ZeroDimension));
        assert!(sample_mask(3, 1.5, &mut rng).is_err());
        assert!(sample_mask(3, -0.1, &mut rng).is_err());
    }

    #[test]
    fn half_mask_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mask = sample_mask(10_000, 0.5, &mut rng).unwrap();
        let frac = mask.count_ones() as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn mask_is_reproducible() {
        let a = sample_mask(64, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_mask(64, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interpolation_selects_channels() {
        let k = BinaryMask::from_bits(vec![true, false, true, false]).unwrap();
        let out = channel_interpolate(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], &k).unwrap();
        assert_eq!(out, vec![1.0, 6.0, 3.0, 8.0]);
        let ones = BinaryMask::ones(4).unwrap();
        assert_eq!(
            channel_interpolate(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4], &ones).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn interpolation_rejects_length_mismatch() {
        let k = BinaryMask::ones(3).unwrap();
        assert!(matches!(
            channel_interpolate(&[1.0, 2.0], &[1.0, 2.0], &k),
            Err(Error::Dimension { .. })
        ));
        assert!(channel_interpolate(&[1.0, 2.0, 3.0], &[1.0], &k).is_err());
    }

    #[test]
    fn stats_mixing_examples() {
        let a = real(vec![0.0, 0.0], vec![0.1, 0.2]);
        let b = real(vec![2.0, 4.0], vec![0.3, 0.4]);
        let k = BinaryMask::from_bits(vec![true, false]).unwrap();
        let m = interpolate_stats(&a, &b, &k).unwrap();
        assert_eq!(m.mu(), &[0.0, 4.0]);
        assert_eq!(m.log_var(), &[0.1, 0.4]);
        assert_eq!(m.role(), StatsRole::Mixed);

        let same = interpolate_stats(&a, &a, &k).unwrap();
        assert_eq!(same, a.clone().with_role(StatsRole::Mixed));

        let zeros = BinaryMask::zeros(2).unwrap();
        assert_eq!(
            interpolate_stats(&a, &b, &zeros).unwrap(),
            b.clone().with_role(StatsRole::Mixed)
        );
    }

    #[test]
    fn reparameterize_examples() {
        let s = real(vec![0.5, -1.0], vec![0.3, 1.2]);
        assert_eq!(reparameterize(&s, &[0.0, 0.0]).unwrap().z(), s.mu());

        let unit = real(vec![0.0; 3], vec![0.0; 3]);
        let e = [0.3, -1.2, 2.5];
        assert_eq!(reparameterize(&unit, &e).unwrap().z(), &e);

        // sigma = exp(0.5 * 2 ln 3) = 3, so z = 1 + 2 * 3.
        let s = real(vec![1.0], vec![2.0 * libm::log(3.0)]);
        let z = reparameterize(&s, &[2.0]).unwrap();
        assert!((z.z()[0] - 7.0).abs() < 1e-12);
        assert_eq!(z.source(), LatentSource::Real);

        let mixed = s.with_role(StatsRole::Mixed);
        assert_eq!(reparameterize(&mixed, &[0.0]).unwrap().source(), LatentSource::Mixed);
    }

    #[test]
    fn reparameterize_rejects_non_finite() {
        let s = real(vec![0.0], vec![0.0]);
        assert_eq!(
            reparameterize(&s, &[f64::NAN]),
            Err(Error::NonFinite("reparameterization noise"))
        );
        assert!(FeatureStats::new(vec![f64::INFINITY], vec![0.0], StatsRole::Real).is_err());
        assert!(FeatureStats::new(vec![], vec![], StatsRole::Real).is_err());
    }

    #[test]
    fn reparameterize_moments_match_stats() {
        let s = real(vec![1.5, -0.5], vec![libm::log(0.25), libm::log(4.0)]);
        let sigma = s.sigma();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let z = reparameterize_with(&s, &mut rng).unwrap();
            for i in 0..2 {
                sum[i] += z.z()[i];
                sq[i] += z.z()[i] * z.z()[i];
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let std = libm::sqrt(var);
            let se_mean = sigma[i] / libm::sqrt(n as f64);
            let se_std = sigma[i] / libm::sqrt(2.0 * n as f64);
            assert!((mean - s.mu()[i]).abs() < 3.0 * se_mean, "mean {mean}");
            assert!((std - sigma[i]).abs() < 3.0 * se_std, "std {std}");
        }
    }

    #[test]
    fn pairing_has_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 2..40 {
            let p = derangement_pairing(n, &mut rng).unwrap();
            let mut seen = vec![false; n];
            for (i, &j) in p.iter().enumerate() {
                assert_ne!(i, j);
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
        assert_eq!(derangement_pairing(1, &mut rng), Err(Error::Pairing(1)));
    }
}
