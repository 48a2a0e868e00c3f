//! Files passed between pipeline stages and their manifests.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::parse_dtype;
use crate::data::read_gray;
use crate::fewshot::{Classifier, FinetuneMode};
use crate::nn::load_state;
use crate::nn::state_of;
use crate::ssl::{Backbone, BackboneConfig};
use crate::{Error, Result};

pub const TELEMETRY: &str = "telemetry.csv";
pub const SYNTHESIS_MANIFEST: &str = "synthesis.toml";
pub const BACKBONE_MANIFEST: &str = "backbone.toml";
pub const BACKBONE_WEIGHTS: &str = "backbone.safetensors";
pub const SSL_TELEMETRY: &str = "ssl_telemetry.csv";
pub const METRICS: &str = "metrics.csv";
pub const DATA_MANIFEST: &str = "dataset.toml";
pub const CLASSIFIER_MANIFEST: &str = "classifier.toml";
pub const CLASSIFIER_WEIGHTS: &str = "classifier.safetensors";
pub const FINETUNE_TELEMETRY: &str = "finetune_telemetry.csv";
pub const EVALUATION_MANIFEST: &str = "evaluation.toml";

/// Stage directories under one output root.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn gan(&self) -> PathBuf {
        self.root.join("gan")
    }

    pub fn synthetic(&self) -> PathBuf {
        self.root.join("synthetic")
    }

    pub fn encoder(&self) -> PathBuf {
        self.root.join("encoder")
    }

    pub fn finetune(&self) -> PathBuf {
        self.root.join("finetune")
    }

    pub fn evaluate(&self) -> PathBuf {
        self.root.join("evaluate")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e)))
        .collect()
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::format(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Returns `path` if it exists, otherwise an error naming the subcommand
/// that produces it.
pub fn require(path: &Path, what: &'static str, producer: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::MissingArtifact {
            what,
            path: path.to_path_buf(),
            producer,
        })
    }
}

/// Written next to a dataset produced by `make-toy-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub seed: u64,
    pub image_size: usize,
    pub classes: Vec<String>,
    pub train_chips: usize,
    pub test_chips: usize,
}

/// Written by `synthesize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisManifest {
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub checkpoint_iteration: u64,
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub files: Vec<String>,
}

impl SynthesisManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_toml(&require(
            &dir.join(SYNTHESIS_MANIFEST),
            "synthetic image set",
            "synthesize",
        )?)
    }

    /// Reads every listed image.
    pub fn images(&self, dir: &Path) -> Result<Vec<Vec<f32>>> {
        self.files
            .iter()
            .map(|f| read_gray(&dir.join(f), self.image_size))
            .collect()
    }
}

/// Written by `pretrain` next to the encoder weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneManifest {
    pub config_hash: String,
    /// Hash of the synthesis manifest the encoder was trained on.
    pub synthesis_hash: String,
    pub seed: u64,
    pub dtype: String,
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub final_nt_xent: f64,
}

pub fn save_backbone(dir: &Path, backbone: &Backbone, manifest: &BackboneManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(BACKBONE_WEIGHTS);
    candle_core::safetensors::save(&backbone.state_map()?, &path).map_err(|e| Error::format(&path, e))?;
    write_toml(&dir.join(BACKBONE_MANIFEST), manifest)
}

pub fn load_backbone(dir: &Path) -> Result<(Backbone, BackboneManifest)> {
    let manifest: BackboneManifest = read_toml(&require(
        &dir.join(BACKBONE_MANIFEST),
        "pretrained encoder",
        "pretrain",
    )?)?;
    let dtype = parse_dtype(&manifest.dtype)?;
    let backbone = Backbone::new(manifest.backbone, &mut ChaCha8Rng::seed_from_u64(0), dtype)?;
    let path = dir.join(BACKBONE_WEIGHTS);
    let tensors = candle_core::safetensors::load(&path, &Device::Cpu).map_err(|e| Error::format(&path, e))?;
    load_state(&backbone, &tensors)?;
    Ok((backbone, manifest))
}

/// Written by `finetune` next to the classifier weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierManifest {
    pub config_hash: String,
    /// Hash of the encoder weights, or `random` for a random start.
    pub backbone_hash: String,
    pub method: String,
    pub mode: FinetuneMode,
    pub k: usize,
    pub seed: u64,
    pub dtype: String,
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub class_names: Vec<String>,
    pub final_loss: f64,
}

pub fn save_classifier(dir: &Path, classifier: &Classifier, manifest: &ClassifierManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CLASSIFIER_WEIGHTS);
    let state = state_of(classifier)
        .into_iter()
        .map(|(n, v)| Ok((n, v.as_tensor().copy()?)))
        .collect::<Result<std::collections::HashMap<_, _>>>()?;
    candle_core::safetensors::save(&state, &path).map_err(|e| Error::format(&path, e))?;
    write_toml(&dir.join(CLASSIFIER_MANIFEST), manifest)
}

pub fn load_classifier(dir: &Path) -> Result<(Classifier, ClassifierManifest)> {
    let manifest: ClassifierManifest = read_toml(&require(
        &dir.join(CLASSIFIER_MANIFEST),
        "fine-tuned classifier",
        "finetune",
    )?)?;
    let dtype = parse_dtype(&manifest.dtype)?;
    let backbone = Backbone::new(manifest.backbone, &mut ChaCha8Rng::seed_from_u64(0), dtype)?;
    let classifier = Classifier::new(backbone, manifest.class_names.len(), 0)?;
    let path = dir.join(CLASSIFIER_WEIGHTS);
    let tensors = candle_core::safetensors::load(&path, &Device::Cpu).map_err(|e| Error::format(&path, e))?;
    load_state(&classifier, &tensors)?;
    Ok((classifier, manifest))
}

/// Written by `evaluate` next to the metric records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationManifest {
    pub config_hash: String,
    /// Config hash of every evaluated classifier, in record order.
    pub classifier_hashes: Vec<String>,
    pub records: usize,
}
