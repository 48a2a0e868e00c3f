//! Learning-rate schedules.

use alloc::vec::Vec;

/// Piecewise-constant decay: the rate is multiplied by `gamma` at each
/// milestone epoch (0-based).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepDecay {
    /// Rate before the first milestone.
    pub base_lr: f64,
    /// Epochs at which decay is applied.
    pub milestones: Vec<usize>,
    /// Multiplicative decay per milestone.
    pub gamma: f64,
}

impl StepDecay {
    /// The fine-tuning schedule: 0.003, decayed by 0.1 at epochs 30 and 80.
    pub fn finetune_default() -> Self {
        Self {
            base_lr: 0.003,
            milestones: alloc::vec![30, 80],
            gamma: 0.1,
        }
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        let mut lr = self.base_lr;
        for _ in 0..passed {
            lr *= self.gamma;
        }
        lr
    }
}
