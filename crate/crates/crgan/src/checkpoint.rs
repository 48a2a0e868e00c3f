//! Training checkpoints: one directory of safetensors files plus a TOML
//! manifest.
//!
//! ```text
//! iter_005000/
//!   manifest.toml
//!   generator.safetensors       parameters and batch-norm statistics
//!   discriminator.safetensors   parameters and spectral-norm vectors
//!   optimizer.safetensors       Adam moments, `g.` and `d.` prefixed
//!   bank.safetensors            queues and momentum-encoder weights, f64
//! ```
//!
//! The random stream position is stored in the manifest, so a resumed run
//! continues bit-identically.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use crgan_core::bank::FeatureBank;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::to_f64;
use crate::models::{Discriminator, Generator, GeneratorNet, ModelConfig};
use crate::nn::{load_state, state_of, Named};
use crate::trainer::{GanState, TrainConfig, Trainer};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.toml";
const GENERATOR: &str = "generator.safetensors";
const DISCRIMINATOR: &str = "discriminator.safetensors";
const OPTIMIZER: &str = "optimizer.safetensors";
const BANK: &str = "bank.safetensors";
const FORMAT_VERSION: u32 = 1;

/// Contents of `manifest.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub iteration: u64,
    pub seed: u64,
    pub dtype: String,
    /// Hex-encoded ChaCha key.
    pub rng_key: String,
    pub rng_stream: u64,
    /// Word position of the stream, as a decimal string (it exceeds 64 bits).
    pub rng_word_pos: String,
    pub g_adam_step: u64,
    pub d_adam_step: u64,
    pub bank_len: usize,
    pub elapsed_seconds: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        DType::F16 => "f16",
        DType::BF16 => "bf16",
        _ => "f32",
    }
}

pub fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Config(format!("unsupported dtype {other:?}; use f32 or f64"))),
    }
}

fn save_named(path: &Path, named: &[Named]) -> Result<()> {
    let map: HashMap<String, Tensor> = named.iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())).collect();
    candle_core::safetensors::save(&map, path).map_err(|e| Error::format(path, e))
}

fn load_map(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.is_file() {
        return Err(Error::format(path, "checkpoint file missing"));
    }
    candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::format(path, e))
}

fn rows_tensor(rows: &[&[f64]], dim: usize) -> Result<Tensor> {
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), dim), &Device::Cpu)?)
}

fn tensor_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let dim = t.dims().get(1).copied().unwrap_or(0);
    let flat = to_f64(t)?;
    Ok(if dim == 0 {
        Vec::new()
    } else {
        flat.chunks(dim).map(<[f64]>::to_vec).collect()
    })
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = toml::from_str(&text).map_err(|e| Error::format(&path, e))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported checkpoint version {}", m.format_version),
        ));
    }
    Ok(m)
}

/// Reads only the manifest of a checkpoint directory.
pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    if !dir.join(MANIFEST).is_file() {
        return Err(Error::MissingArtifact {
            what: "GAN checkpoint",
            path: dir.to_path_buf(),
            producer: "train-gan",
        });
    }
    read_manifest(dir)
}

/// Writes the complete trainer state into `dir`, creating it if needed.
pub fn save_trainer(trainer: &Trainer, dir: &Path, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let state = &trainer.state;
    save_named(&dir.join(GENERATOR), &state_of(&state.generator))?;
    save_named(&dir.join(DISCRIMINATOR), &state_of(&state.discriminator))?;
    let mut opt: Vec<Named> = Vec::new();
    opt.extend(state.g_opt.state().into_iter().map(|(n, v)| (format!("g.{n}"), v)));
    opt.extend(state.d_opt.state().into_iter().map(|(n, v)| (format!("d.{n}"), v)));
    save_named(&dir.join(OPTIMIZER), &opt)?;

    let (mu, sigma) = state.bank.negatives();
    let mut bank: HashMap<String, Tensor> = HashMap::new();
    if let Some(dim) = state.bank.dim() {
        bank.insert("mu".into(), rows_tensor(&mu, dim)?);
        bank.insert("sigma".into(), rows_tensor(&sigma, dim)?);
    }
    for (i, s) in state.bank.shadow().iter().enumerate() {
        bank.insert(format!("shadow.{i:03}"), Tensor::from_slice(s, s.len(), &Device::Cpu)?);
    }
    let bank_path = dir.join(BANK);
    candle_core::safetensors::save(&bank, &bank_path).map_err(|e| Error::format(&bank_path, e))?;

    let dtype = state.generator.params()[0].1.dtype();
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        iteration: trainer.iteration,
        seed: state.config.seed,
        dtype: dtype_name(dtype).to_string(),
        rng_key: hex::encode(trainer.rng.get_seed()),
        rng_stream: trainer.rng.get_stream(),
        rng_word_pos: trainer.rng.get_word_pos().to_string(),
        g_adam_step: state.g_opt.step,
        d_adam_step: state.d_opt.step,
        bank_len: state.bank.len(),
        elapsed_seconds: trainer.elapsed_seconds(),
        model: trainer.model.clone(),
        train: state.config.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::format(dir.join(MANIFEST), e))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn restore_rng(m: &CheckpointManifest, path: &Path) -> Result<ChaCha8Rng> {
    let key: [u8; 32] = hex::decode(&m.rng_key)
        .ok()
        .and_then(|k| k.try_into().ok())
        .ok_or_else(|| Error::format(path, "rng_key must be 64 hex digits"))?;
    let pos: u128 = m
        .rng_word_pos
        .parse()
        .map_err(|_| Error::format(path, "rng_word_pos is not an integer"))?;
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(m.rng_stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Rebuilds a generator from a checkpoint, returning it with the manifest.
pub fn load_generator(dir: &Path) -> Result<(Generator, CheckpointManifest)> {
    let m = load_manifest(dir)?;
    let dtype = parse_dtype(&m.dtype)?;
    let g = Generator::new(&m.model, &mut ChaCha8Rng::seed_from_u64(0), dtype, &Device::Cpu)?;
    load_state(&g, &load_map(&dir.join(GENERATOR))?)?;
    Ok((g, m))
}

/// Resumes a trainer from `dir` on the given training images.
pub fn load_trainer(dir: &Path, images: Vec<Vec<f32>>) -> Result<Trainer> {
    let m = load_manifest(dir)?;
    let manifest_path = dir.join(MANIFEST);
    let dtype = parse_dtype(&m.dtype)?;
    let mut init = ChaCha8Rng::seed_from_u64(0);
    let g = Generator::new(&m.model, &mut init, dtype, &Device::Cpu)?;
    let d = Discriminator::new(&m.model, &mut init, dtype, &Device::Cpu)?;
    load_state(&g, &load_map(&dir.join(GENERATOR))?)?;
    load_state(&d, &load_map(&dir.join(DISCRIMINATOR))?)?;
    let mut state = GanState::new(g, d, m.train.clone())?;

    let opt = load_map(&dir.join(OPTIMIZER))?;
    let split = |prefix: &str| -> HashMap<String, Tensor> {
        opt.iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
            .collect()
    };
    state.g_opt.load(m.g_adam_step, &split("g."))?;
    state.d_opt.load(m.d_adam_step, &split("d."))?;

    let bank_path = dir.join(BANK);
    let bank = load_map(&bank_path)?;
    let mut shadow_names: Vec<&String> = bank.keys().filter(|k| k.starts_with("shadow.")).collect();
    shadow_names.sort();
    let shadow = shadow_names
        .iter()
        .map(|k| to_f64(&bank[*k]))
        .collect::<Result<Vec<_>>>()?;
    let (mu, sigma) = match (bank.get("mu"), bank.get("sigma")) {
        (Some(mu), Some(sigma)) => (tensor_rows(mu)?, tensor_rows(sigma)?),
        _ => (Vec::new(), Vec::new()),
    };
    if mu.len() != m.bank_len {
        return Err(Error::format(
            &bank_path,
            format!("bank holds {} entries, manifest says {}", mu.len(), m.bank_len),
        ));
    }
    state.bank = FeatureBank::from_parts(m.train.bank_capacity, m.train.bank_momentum, mu, sigma, shadow)?;

    let rng = restore_rng(&m, &manifest_path)?;
    Trainer::from_parts(state, m.model.clone(), rng, m.iteration, images, m.elapsed_seconds)
}

/// SHA-256 over the tensor files of a checkpoint, in a fixed order. The
/// manifest is excluded because it records wall-clock time.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [GENERATOR, DISCRIMINATOR, OPTIMIZER, BANK] {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Checkpoint directories under `root`, ordered by iteration.
pub fn list_checkpoints(root: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !root.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join(MANIFEST).is_file() {
            out.push((read_manifest(&path)?.iteration, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Conventional directory name for the checkpoint at `iteration`.
pub fn checkpoint_dir(root: &Path, iteration: u64) -> PathBuf {
    root.join(format!("iter_{iteration:06}"))
}
