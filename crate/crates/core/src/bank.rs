//! Negative-feature memory bank with a momentum-averaged encoder copy.
//!
//! The bank holds two FIFO queues (means and standard deviations of real
//! images encoded by the momentum copy) and the momentum copy's weights as
//! flat arrays. The tensor side runs the copy; this type owns its state.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::error::{ensure_finite, ensure_len};
use crate::latent::FeatureStats;
use crate::{Error, Result};

/// Default momentum of the shadow feature branch.
pub const DEFAULT_MOMENTUM: f64 = 0.999;

/// `shadow ← m·shadow + (1 − m)·live`, element-wise.
pub fn ema_update(shadow: &mut [f64], live: &[f64], m: f64) -> Result<()> {
    ensure_len(shadow.len(), live.len())?;
    for (s, &l) in shadow.iter_mut().zip(live) {
        *s = m * *s + (1.0 - m) * l;
    }
    Ok(())
}

fn validate_momentum(m: f64) -> Result<()> {
    if (0.0..1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "momentum",
            reason: "must lie in [0, 1)",
        })
    }
}

/// FIFO negatives plus the momentum encoder weights.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureBank {
    capacity: usize,
    momentum: f64,
    mu_queue: VecDeque<Vec<f64>>,
    sigma_queue: VecDeque<Vec<f64>>,
    shadow: Vec<Vec<f64>>,
}

impl FeatureBank {
    /// Empty bank. `shadow` seeds the momentum copy, normally with the live
    /// feature-branch weights at initialization.
    pub fn new(capacity: usize, momentum: f64, shadow: Vec<Vec<f64>>) -> Result<Self> {
        validate_momentum(momentum)?;
        if capacity == 0 {
            return Err(Error::InvalidParameter {
                name: "bank capacity",
                reason: "must be positive",
            });
        }
        Ok(Self {
            capacity,
            momentum,
            mu_queue: VecDeque::with_capacity(capacity),
            sigma_queue: VecDeque::with_capacity(capacity),
            shadow,
        })
    }

    /// Rebuilds a bank from persisted parts, oldest entry first.
    pub fn from_parts(
        capacity: usize,
        momentum: f64,
        mu: Vec<Vec<f64>>,
        sigma: Vec<Vec<f64>>,
        shadow: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mut bank = Self::new(capacity, momentum, shadow)?;
        ensure_len(mu.len(), sigma.len())?;
        if mu.len() > capacity {
            return Err(Error::Dimension {
                expected: capacity,
                actual: mu.len(),
            });
        }
        for (m, s) in mu.into_iter().zip(sigma) {
            bank.push(m, s)?;
        }
        Ok(bank)
    }

    /// Maximum number of stored entries.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Momentum factor `m`.
    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Number of stored entries.
    pub fn len(&self) -> usize {
        self.mu_queue.len()
    }

    /// Whether nothing has been enqueued yet.
    pub fn is_empty(&self) -> bool {
        self.mu_queue.is_empty()
    }

    /// Feature dimension of stored entries, if any.
    pub fn dim(&self) -> Option<usize> {
        self.mu_queue.front().map(Vec::len)
    }

    /// Momentum-encoder weights, one flat array per parameter tensor.
    pub fn shadow(&self) -> &[Vec<f64>] {
        &self.shadow
    }

    /// One EMA step of every shadow array towards the live weights.
    pub fn momentum_update<V: AsRef<[f64]>>(&mut self, live: &[V]) -> Result<()> {
        ensure_len(self.shadow.len(), live.len())?;
        for (s, l) in self.shadow.iter().zip(live) {
            ensure_len(s.len(), l.as_ref().len())?;
        }
        for (s, l) in self.shadow.iter_mut().zip(live) {
            ema_update(s, l.as_ref(), self.momentum)?;
        }
        Ok(())
    }

    fn push(&mut self, mu: Vec<f64>, sigma: Vec<f64>) -> Result<()> {
        ensure_len(mu.len(), sigma.len())?;
        if let Some(d) = self.dim() {
            ensure_len(d, mu.len())?;
        }
        ensure_finite(&mu, "bank mean")?;
        ensure_finite(&sigma, "bank sigma")?;
        if self.mu_queue.len() == self.capacity {
            self.mu_queue.pop_front();
            self.sigma_queue.pop_front();
        }
        self.mu_queue.push_back(mu);
        self.sigma_queue.push_back(sigma);
        Ok(())
    }

    /// Appends a batch of encodings, evicting the oldest past capacity.
    /// The whole batch is validated before anything is inserted.
    pub fn enqueue(&mut self, stats: &[FeatureStats]) -> Result<()> {
        let d = self.dim().or_else(|| stats.first().map(FeatureStats::dim));
        if let Some(d) = d {
            for s in stats {
                ensure_len(d, s.dim())?;
            }
        }
        for s in stats {
            self.push(s.mu().to_vec(), s.sigma())?;
        }
        Ok(())
    }

    /// Current (mean, sigma) negatives, oldest first.
    pub fn negatives(&self) -> (Vec<&[f64]>, Vec<&[f64]>) {
        (
            self.mu_queue.iter().map(Vec::as_slice).collect(),
            self.sigma_queue.iter().map(Vec::as_slice).collect(),
        )
    }

    /// Empties both queues, keeping the shadow weights.
    pub fn clear(&mut self) {
        self.mu_queue.clear();
        self.sigma_queue.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::StatsRole;
    use alloc::vec;

    fn batch(start: usize, n: usize, d: usize) -> Vec<FeatureStats> {
        (start..start + n)
            .map(|i| FeatureStats::new(vec![i as f64; d], vec![0.0; d], StatsRole::Real).unwrap())
            .collect()
    }

    #[test]
    fn zero_momentum_copies_live() {
        let mut bank = FeatureBank::new(4, 0.0, vec![vec![1.0, 2.0]]).unwrap();
        bank.momentum_update(&[vec![5.0, -3.0]]).unwrap();
        assert_eq!(bank.shadow(), &[vec![5.0, -3.0]]);
    }

    #[test]
    fn momentum_one_rejected() {
        assert!(FeatureBank::new(4, 1.0, vec![]).is_err());
        assert!(FeatureBank::new(4, -0.1, vec![]).is_err());
        assert!(FeatureBank::new(0, 0.5, vec![]).is_err());
    }

    #[test]
    fn ema_single_step() {
        let mut bank = FeatureBank::new(4, DEFAULT_MOMENTUM, vec![vec![1.0]]).unwrap();
        bank.momentum_update(&[vec![0.0]]).unwrap();
        assert_eq!(bank.shadow()[0][0], 0.999);
    }

    #[test]
    fn shadow_shape_checked() {
        let mut bank = FeatureBank::new(4, 0.5, vec![vec![1.0, 2.0]]).unwrap();
        assert!(bank.momentum_update(&[vec![0.0]]).is_err());
        assert!(bank.momentum_update(&[vec![0.0, 0.0], vec![1.0]]).is_err());
    }

    #[test]
    fn fifo_eviction() {
        let mut bank = FeatureBank::new(512, DEFAULT_MOMENTUM, vec![]).unwrap();
        bank.enqueue(&batch(0, 8, 3)).unwrap();
        assert_eq!(bank.len(), 8);

        let mut bank = FeatureBank::new(512, DEFAULT_MOMENTUM, vec![]).unwrap();
        bank.enqueue(&batch(0, 600, 3)).unwrap();
        assert_eq!(bank.len(), 512);
        let (mu, _) = bank.negatives();
        // Entries 0..88 were evicted.
        assert_eq!(mu[0][0], 88.0);
        assert_eq!(mu[511][0], 599.0);
    }

    #[test]
    fn negatives_preserve_order_and_values() {
        let mut bank = FeatureBank::new(16, 0.9, vec![]).unwrap();
        let (mu, sigma) = bank.negatives();
        assert!(mu.is_empty() && sigma.is_empty());
        let b = batch(3, 4, 2);
        bank.enqueue(&b).unwrap();
        let (mu, sigma) = bank.negatives();
        assert_eq!(mu.len(), 4);
        for (i, s) in b.iter().enumerate() {
            assert_eq!(mu[i], s.mu());
            assert_eq!(sigma[i], s.sigma().as_slice());
        }
    }

    #[test]
    fn dimension_mismatch_rejected_atomically() {
        let mut bank = FeatureBank::new(16, 0.9, vec![]).unwrap();
        bank.enqueue(&batch(0, 2, 3)).unwrap();
        let mut mixed = batch(0, 2, 3);
        mixed.extend(batch(0, 1, 4));
        assert!(bank.enqueue(&mixed).is_err());
        assert_eq!(bank.len(), 2);
    }

    #[test]
    fn stored_entries_are_snapshots() {
        let mut bank = FeatureBank::new(16, 0.9, vec![vec![0.0]]).unwrap();
        let b = batch(1, 1, 2);
        bank.enqueue(&b).unwrap();
        bank.momentum_update(&[vec![10.0]]).unwrap();
        drop(b);
        assert_eq!(bank.negatives().0[0], &[1.0, 1.0]);
    }

    #[test]
    fn from_parts_round_trip() {
        let mut bank = FeatureBank::new(3, 0.99, vec![vec![0.5, 0.25]]).unwrap();
        bank.enqueue(&batch(0, 5, 2)).unwrap();
        let (mu, sigma) = bank.negatives();
        let rebuilt = FeatureBank::from_parts(
            3,
            0.99,
            mu.iter().map(|v| v.to_vec()).collect(),
            sigma.iter().map(|v| v.to_vec()).collect(),
            bank.shadow().to_vec(),
        )
        .unwrap();
        assert_eq!(rebuilt, bank);
    }
}
