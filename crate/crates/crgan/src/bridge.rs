//! Moves activations between the tensor graph and the `f64` loss core.
//!
//! Losses are evaluated on the host with analytic gradients. To backpropagate
//! them, each activation `T` that received a gradient `g` contributes
//! `sum(T ⊙ g)` to a surrogate scalar whose own gradient w.r.t. `T` is
//! exactly `g`. The surrogate's value is meaningless; reported loss values
//! always come from the core.

use candle_core::{DType, Device, Tensor};

use crate::Result;

/// Flattens any tensor into host `f64` values.
pub fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Builds a tensor of `dtype` from host values.
pub fn from_f64(values: &[f64], shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(values, shape, device)?.to_dtype(dtype)?)
}

/// Accumulates per-activation gradients into one surrogate scalar.
#[derive(Default)]
pub struct Surrogate {
    terms: Vec<Tensor>,
}

impl Surrogate {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `grad · scale` as the gradient of `activation`.
    pub fn push(&mut self, activation: &Tensor, grad: &[f64], scale: f64) -> Result<()> {
        if scale == 0.0 {
            return Ok(());
        }
        let scaled: Vec<f64> = grad.iter().map(|g| g * scale).collect();
        let g = from_f64(&scaled, activation.dims(), activation.dtype(), activation.device())?;
        self.terms.push((activation * g)?.sum_all()?);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Sum of all registered terms, or `None` if nothing needs gradients.
    pub fn finish(self) -> Result<Option<Tensor>> {
        let mut iter = self.terms.into_iter();
        let Some(mut acc) = iter.next() else {
            return Ok(None);
        };
        for t in iter {
            acc = (acc + t)?;
        }
        Ok(Some(acc))
    }
}
