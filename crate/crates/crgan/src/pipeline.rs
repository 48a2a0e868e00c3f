//! GAN training runs and synthesis.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::artifacts::{read_csv, write_toml, SynthesisManifest, SYNTHESIS_MANIFEST, TELEMETRY};
use crate::checkpoint::{checkpoint_dir, checkpoint_hash, load_generator, save_trainer};
use crate::data::write_gray;
use crate::models::{Generator, GeneratorNet};
use crate::nn::Mode;
use crate::trainer::{TelemetryRow, Trainer};
use crate::{Error, Result};

/// Output layout of a training run.
#[derive(Debug, Clone)]
pub struct GanRun {
    pub out: PathBuf,
    pub config_hash: String,
    /// Also checkpoint the last iteration when it is off the cadence.
    pub final_checkpoint: bool,
}

impl GanRun {
    pub fn checkpoints(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    pub fn telemetry(&self) -> PathBuf {
        self.out.join(TELEMETRY)
    }
}

#[derive(Debug, Clone)]
pub struct GanSummary {
    /// Rows of this invocation only.
    pub rows: Vec<TelemetryRow>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Serialize)]
struct FailureDump<'a> {
    term: &'a str,
    iteration: u64,
    batch_indices: &'a [usize],
}

/// Runs `trainer` up to its configured iteration count, appending one
/// telemetry row per iteration and checkpointing on the cadence.
///
/// A non-finite loss stops the run and writes `nonfinite.toml` with the
/// offending batch indices next to the telemetry.
pub fn train_gan(trainer: &mut Trainer, run: &GanRun) -> Result<GanSummary> {
    fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    let telemetry_path = run.telemetry();
    let mut history: Vec<TelemetryRow> = if trainer.iteration > 0 && telemetry_path.is_file() {
        read_csv::<TelemetryRow>(&telemetry_path)?
            .into_iter()
            .filter(|r| r.iteration <= trainer.iteration)
            .collect()
    } else {
        Vec::new()
    };
    let resumed_rows = history.len();
    let mut writer = csv::Writer::from_path(&telemetry_path).map_err(|e| Error::format(&telemetry_path, e))?;
    for r in &history {
        writer.serialize(r).map_err(|e| Error::format(&telemetry_path, e))?;
    }
    let total = trainer.config().iterations;
    let every = trainer.config().checkpoint_every;
    let mut checkpoints = Vec::new();
    while trainer.iteration < total {
        let row = match trainer.step() {
            Ok(row) => row,
            Err(Error::NonFinite { term, iteration, batch }) => {
                writer.flush().map_err(|e| Error::io(&telemetry_path, e))?;
                let dump = FailureDump {
                    term: &term,
                    iteration,
                    batch_indices: &batch,
                };
                write_toml(&run.out.join("nonfinite.toml"), &dump)?;
                log::error!("non-finite {term} at iteration {iteration}, batch {batch:?}");
                return Err(Error::NonFinite { term, iteration, batch });
            }
            Err(e) => return Err(e),
        };
        writer.serialize(&row).map_err(|e| Error::format(&telemetry_path, e))?;
        writer.flush().map_err(|e| Error::io(&telemetry_path, e))?;
        let done = trainer.iteration;
        history.push(row);
        if done % every == 0 || (run.final_checkpoint && done == total) {
            let dir = checkpoint_dir(&run.checkpoints(), done);
            save_trainer(trainer, &dir, &run.config_hash)?;
            log::info!("checkpoint {}", dir.display());
            checkpoints.push(dir);
        }
        if done % 100 == 0 {
            let r = history.last().expect("row pushed above");
            log::info!(
                "iter {done}/{total} d={:.4} g={:.4} ir={:.4}",
                r.d_objective,
                r.g_objective,
                r.g_ir
            );
        }
    }
    Ok(GanSummary {
        rows: history.split_off(resumed_rows),
        checkpoints,
    })
}

/// Images from `z ~ N(0, I)` through the generator in evaluation mode.
pub fn generate(g: &Generator, count: usize, seed: u64, batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let d = g.latent_dim();
    let dtype = g.params()[0].1.dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut remaining = count;
    while remaining > 0 {
        let b = remaining.min(batch_size.max(1));
        let z: Vec<f64> = (0..b * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = Tensor::from_vec(z, (b, d), &Device::Cpu)?.to_dtype(dtype)?;
        let x = g.forward(&z, Mode::Eval)?;
        let side = x.dims()[3];
        let flat: Vec<f32> = x.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
        out.extend(flat.chunks(side * side).map(<[f32]>::to_vec));
        remaining -= b;
    }
    Ok(out)
}

/// Writes `count` generated PNGs and a manifest into `out`.
pub fn synthesize_dataset(
    checkpoint: &Path,
    count: usize,
    seed: u64,
    batch_size: usize,
    out: &Path,
    config_hash: &str,
) -> Result<SynthesisManifest> {
    let (g, m) = load_generator(checkpoint)?;
    let hash = checkpoint_hash(checkpoint)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let side = m.model.image_size;
    let images = generate(&g, count, seed, batch_size)?;
    let mut files = Vec::with_capacity(count);
    for (i, img) in images.iter().enumerate() {
        let name = format!("synth_{i:05}.png");
        write_gray(&out.join(&name), img, side)?;
        files.push(name);
    }
    let manifest = SynthesisManifest {
        config_hash: config_hash.to_string(),
        checkpoint_hash: hash,
        checkpoint_iteration: m.iteration,
        seed,
        count,
        image_size: side,
        files,
    };
    write_toml(&out.join(SYNTHESIS_MANIFEST), &manifest)?;
    Ok(manifest)
}
