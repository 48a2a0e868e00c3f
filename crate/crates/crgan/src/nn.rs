//! Minimal layer library over `candle-core`.
//!
//! Every layer exposes its trainable parameters and its non-trainable
//! buffers (batch-norm running statistics, spectral-norm singular vectors)
//! as named [`Var`]s, so checkpoints and optimizers address them uniformly.
//! All random initialisation comes from an explicit seeded generator.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Forward-pass regime for layers with state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated, one power iteration.
    Train,
    /// Batch statistics without touching any stored state.
    Frozen,
    /// Running statistics, stored singular vectors.
    Eval,
}

/// Named parameter or buffer.
pub type Named = (String, Var);

/// Anything holding named parameters and buffers.
pub trait Module {
    /// Trainable parameters, in a stable order.
    fn params(&self, prefix: &str, out: &mut Vec<Named>);
    /// Non-trainable state.
    fn buffers(&self, _prefix: &str, _out: &mut Vec<Named>) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Collects a module's parameters.
pub fn params_of(m: &dyn Module) -> Vec<Named> {
    let mut out = Vec::new();
    m.params("", &mut out);
    out
}

/// Collects a module's parameters followed by its buffers.
pub fn state_of(m: &dyn Module) -> Vec<Named> {
    let mut out = Vec::new();
    m.params("", &mut out);
    m.buffers("", &mut out);
    out
}

/// Overwrites every named state entry from `tensors`; all names must exist.
pub fn load_state(m: &dyn Module, tensors: &HashMap<String, Tensor>) -> Result<()> {
    for (name, var) in state_of(m) {
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Validation(format!("missing tensor `{name}`")))?;
        if t.dims() != var.dims() {
            return Err(Error::Validation(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

/// Total number of scalar parameters.
pub fn count(params: &[Named]) -> usize {
    params.iter().map(|(_, v)| v.elem_count()).sum()
}

/// Gaussian tensor from a seeded generator.
pub fn normal<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    mean: f64,
    std: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

fn var(t: Tensor) -> Result<Var> {
    Ok(Var::from_tensor(&t)?)
}

fn zeros(shape: &[usize], dtype: DType, device: &Device) -> Result<Var> {
    var(Tensor::zeros(shape, dtype, device)?)
}

/// Fully connected layer, `y = x Wᵀ + b`.
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            weight: var(normal(rng, &[d_out, d_in], 0.0, std, dtype, device)?)?,
            bias: if bias {
                Some(zeros(&[d_out], dtype, device)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, self.weight.as_tensor(), self.bias.as_ref().map(|b| b.as_tensor()))
    }

    /// Forward with substitute weights of the same shapes.
    pub fn forward_with(&self, x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let y = x.matmul(&weight.t()?)?;
        Ok(match bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Linear {
    fn params(&self, prefix: &str, out: &mut Vec<Named>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

fn l2_normalize(t: &Tensor) -> Result<Tensor> {
    let norm = t.sqr()?.sum_all()?.sqrt()?;
    Ok(t.broadcast_div(&(norm + 1e-12)?)?)
}

/// Power-iteration spectral normalisation state for one weight.
pub struct SpectralNorm {
    pub u: Var,
    pub v: Var,
}

impl SpectralNorm {
    /// Power iterations run once at construction.
    pub const WARMUP: usize = 15;
    /// Iteration cap of [`SpectralNorm::refresh`].
    pub const REFRESH_MAX: usize = 100;
    /// Relative change of the estimate at which [`SpectralNorm::refresh`] stops.
    pub const REFRESH_TOL: f64 = 1e-6;

    pub fn new<R: Rng + ?Sized>(rng: &mut R, weight: &Tensor) -> Result<Self> {
        let rows = weight.dims()[0];
        let cols = weight.elem_count() / rows;
        let u = l2_normalize(&normal(rng, &[rows], 0.0, 1.0, weight.dtype(), weight.device())?)?;
        let v = Tensor::zeros(cols, weight.dtype(), weight.device())?;
        let sn = Self { u: var(u)?, v: var(v)? };
        for _ in 0..Self::WARMUP {
            sn.power_iteration(weight)?;
        }
        Ok(sn)
    }

    fn matrix(weight: &Tensor) -> Result<Tensor> {
        let rows = weight.dims()[0];
        Ok(weight.reshape((rows, weight.elem_count() / rows))?)
    }

    /// One power-iteration refinement of `u` and `v`.
    pub fn power_iteration(&self, weight: &Tensor) -> Result<()> {
        let w = Self::matrix(&weight.detach())?;
        let v = l2_normalize(&w.t()?.matmul(&self.u.as_tensor().unsqueeze(1)?)?.squeeze(1)?)?;
        let u = l2_normalize(&w.matmul(&v.unsqueeze(1)?)?.squeeze(1)?)?;
        self.v.set(&v)?;
        self.u.set(&u)?;
        Ok(())
    }

    /// Power iterations until the estimate settles. Training dynamics keep
    /// the top singular values of a normalised weight close together, where
    /// a single warm-started iteration per step falls behind.
    pub fn refresh(&self, weight: &Tensor) -> Result<()> {
        let weight = weight.detach();
        let mut last = f64::INFINITY;
        for _ in 0..Self::REFRESH_MAX {
            self.power_iteration(&weight)?;
            let s = self.sigma(&weight)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if (s - last).abs() <= Self::REFRESH_TOL * s.abs() {
                break;
            }
            last = s;
        }
        Ok(())
    }

    /// `uᵀ W v`, differentiable in `W`.
    pub fn sigma(&self, weight: &Tensor) -> Result<Tensor> {
        let w = Self::matrix(weight)?;
        let wv = w.matmul(&self.v.as_tensor().unsqueeze(1)?)?;
        Ok(self.u.as_tensor().unsqueeze(0)?.matmul(&wv)?.reshape(())?)
    }

    /// `W / σ(W)`, refining the singular vectors first in [`Mode::Train`].
    pub fn normalize(&self, weight: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Train {
            self.power_iteration(weight)?;
        }
        Ok(weight.broadcast_div(&self.sigma(weight)?)?)
    }
}

/// Largest singular value of a weight reshaped to `(out, rest)`, by
/// `iters` power iterations from a fixed start.
pub fn top_singular_value(weight: &Tensor, iters: usize) -> Result<f64> {
    let w = SpectralNorm::matrix(&weight.to_dtype(DType::F64)?)?;
    let mut v = l2_normalize(&Tensor::ones(w.dims()[1], DType::F64, w.device())?)?;
    let mut sigma = 0.0;
    for _ in 0..iters {
        let wv = w.matmul(&v.unsqueeze(1)?)?.squeeze(1)?;
        sigma = wv.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?;
        let u = l2_normalize(&wv)?;
        v = l2_normalize(&w.t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?)?;
    }
    Ok(sigma)
}

/// 2-D convolution with optional bias and spectral normalisation.
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub sn: Option<SpectralNorm>,
}

/// Shape and behaviour of a convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub spectral: bool,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, spec: ConvSpec, std: f64, dtype: DType, device: &Device) -> Result<Self> {
        let weight = normal(
            rng,
            &[spec.c_out, spec.c_in, spec.kernel, spec.kernel],
            0.0,
            std,
            dtype,
            device,
        )?;
        let sn = if spec.spectral {
            Some(SpectralNorm::new(rng, &weight)?)
        } else {
            None
        };
        Ok(Self {
            weight: var(weight)?,
            bias: if spec.bias {
                Some(zeros(&[spec.c_out], dtype, device)?)
            } else {
                None
            },
            stride: spec.stride,
            padding: spec.padding,
            sn,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_with(
            x,
            self.weight.as_tensor(),
            self.bias.as_ref().map(|b| b.as_tensor()),
            mode,
        )
    }

    /// Forward with substitute weights; spectral state is read but only
    /// refined in [`Mode::Train`].
    pub fn forward_with(&self, x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        let w = match &self.sn {
            Some(sn) => sn.normalize(weight, mode)?,
            None => weight.clone(),
        };
        let y = x.conv2d(&w, self.padding, self.stride, 1, 1)?;
        Ok(match bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?,
            None => y,
        })
    }

    /// Re-estimates the spectral norm of the current weight.
    pub fn refresh_spectral(&self) -> Result<()> {
        match &self.sn {
            Some(sn) => sn.refresh(self.weight.as_tensor()),
            None => Ok(()),
        }
    }

    /// Spatial output side for a square input.
    pub fn out_side(&self, side: usize) -> usize {
        let k = self.weight.dims()[2];
        (side + 2 * self.padding - k) / self.stride + 1
    }

    /// Multiply-accumulates for one image of the given input side.
    pub fn macs(&self, side: usize) -> u64 {
        let o = self.out_side(side) as u64;
        o * o * self.weight.elem_count() as u64
    }
}

impl Module for Conv2d {
    fn params(&self, prefix: &str, out: &mut Vec<Named>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }

    fn buffers(&self, prefix: &str, out: &mut Vec<Named>) {
        if let Some(sn) = &self.sn {
            out.push((join(prefix, "sn_u"), sn.u.clone()));
            out.push((join(prefix, "sn_v"), sn.v.clone()));
        }
    }
}

/// Transposed 2-D convolution, weight shape `(c_in, c_out, k, k)`.
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, spec: ConvSpec, std: f64, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            weight: var(normal(
                rng,
                &[spec.c_in, spec.c_out, spec.kernel, spec.kernel],
                0.0,
                std,
                dtype,
                device,
            )?)?,
            bias: if spec.bias {
                Some(zeros(&[spec.c_out], dtype, device)?)
            } else {
                None
            },
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(self.weight.as_tensor(), self.padding, 0, self.stride, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, b.elem_count(), 1, 1))?)?,
            None => y,
        })
    }

    pub fn out_side(&self, side: usize) -> usize {
        let k = self.weight.dims()[2];
        (side - 1) * self.stride + k - 2 * self.padding
    }

    /// Multiply-accumulates for one image of the given input side.
    pub fn macs(&self, side: usize) -> u64 {
        (side * side) as u64 * self.weight.elem_count() as u64
    }
}

impl Module for ConvTranspose2d {
    fn params(&self, prefix: &str, out: &mut Vec<Named>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

/// Batch normalisation over `(N, C, H, W)` or `(N, C)` inputs.
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        gamma_std: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            gamma: var(normal(rng, &[channels], 1.0, gamma_std, dtype, device)?)?,
            beta: zeros(&[channels], dtype, device)?,
            running_mean: zeros(&[channels], dtype, device)?,
            running_var: var(Tensor::ones(channels, dtype, device)?)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.gamma.elem_count();
        let spatial = x.rank() == 4;
        let bshape: Vec<usize> = if spatial { vec![1, c, 1, 1] } else { vec![1, c] };
        let (mean, var) = match mode {
            Mode::Eval => (
                self.running_mean.as_tensor().reshape(bshape.as_slice())?,
                self.running_var.as_tensor().reshape(bshape.as_slice())?,
            ),
            Mode::Train | Mode::Frozen => {
                let mean = if spatial {
                    x.mean_keepdim((0, 2, 3))?
                } else {
                    x.mean_keepdim(0)?
                };
                let centred = x.broadcast_sub(&mean)?;
                let var = if spatial {
                    centred.sqr()?.mean_keepdim((0, 2, 3))?
                } else {
                    centred.sqr()?.mean_keepdim(0)?
                };
                if mode == Mode::Train {
                    let n = (x.elem_count() / c) as f64;
                    let unbiased = (var.detach().flatten_all()? * (n / (n - 1.0).max(1.0)))?;
                    let m = self.momentum;
                    let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                    let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                    self.running_mean.set(&rm)?;
                    self.running_var.set(&rv)?;
                }
                (mean, var)
            }
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.gamma.as_tensor().reshape(bshape.as_slice())?)?
            .broadcast_add(&self.beta.as_tensor().reshape(bshape.as_slice())?)?)
    }
}

impl Module for BatchNorm {
    fn params(&self, prefix: &str, out: &mut Vec<Named>) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }

    fn buffers(&self, prefix: &str, out: &mut Vec<Named>) {
        out.push((join(prefix, "running_mean"), self.running_mean.clone()));
        out.push((join(prefix, "running_var"), self.running_var.clone()));
    }
}

/// `max(x, slope·x)`.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// DCGAN settings: lr 2e-4, betas (0.5, 0.999).
    pub fn dcgan() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with persistent, checkpointable moment estimates.
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    params: Vec<Named>,
    m: Vec<Var>,
    v: Vec<Var>,
}

impl Adam {
    pub fn new(params: Vec<Named>, config: AdamConfig) -> Result<Self> {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (_, p) in &params {
            m.push(var(p.zeros_like()?)?);
            v.push(var(p.zeros_like()?)?);
        }
        Ok(Self {
            config,
            step: 0,
            params,
            m,
            v,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn apply(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((_, p), (m, v)) in self.params.iter().zip(self.m.iter().zip(&self.v)) {
            let Some(g) = grads.get(p.as_tensor()) else {
                continue;
            };
            let m_new = ((m.as_tensor() * beta1)? + (g * (1.0 - beta1))?)?;
            let v_new = ((v.as_tensor() * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&v_new / bc2)?.sqrt()? + eps)?;
            let update = ((&m_new / denom)? * (lr / bc1))?;
            p.set(&(p.as_tensor() - update)?)?;
            m.set(&m_new)?;
            v.set(&v_new)?;
        }
        Ok(())
    }

    /// Moment estimates as named entries `m.<param>` and `v.<param>`.
    pub fn state(&self) -> Vec<Named> {
        let mut out = Vec::with_capacity(2 * self.params.len());
        for ((name, _), (m, v)) in self.params.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("m.{name}"), m.clone()));
            out.push((format!("v.{name}"), v.clone()));
        }
        out
    }

    pub fn load(&mut self, step: u64, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.state() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Validation(format!("missing optimizer tensor `{name}`")))?;
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        self.step = step;
        Ok(())
    }
}
