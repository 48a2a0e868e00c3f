//! Helpers shared by the binary-level tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crgan::config::PipelineConfig;
use crgan::models::ModelConfig;
use crgan::ssl::{BackboneConfig, BackboneKind};

/// Every stage at toy size, so the whole pipeline runs in seconds.
pub fn tiny_config() -> PipelineConfig {
    let mut c = PipelineConfig::desk();
    c.data.toy_classes = 3;
    c.data.toy_train_per_class = 4;
    c.data.toy_test_per_class = 3;
    c.model = ModelConfig {
        latent_dim: 8,
        g_base_channels: 4,
        d_base_channels: 4,
        image_size: 16,
        image_channels: 1,
    };
    c.train.iterations = 4;
    c.train.batch_size = 4;
    c.train.checkpoint_every = 2;
    c.train.bank_capacity = 16;
    c.synthesis.count = 12;
    c.ssl.backbone = BackboneConfig {
        kind: BackboneKind::SmallCnn,
        width: 4,
    };
    c.ssl.projection_dim = 8;
    c.ssl.epochs = 1;
    c.ssl.batch_size = 8;
    c.finetune.epochs = 2;
    c.finetune.shots = 2;
    c.finetune.seeds = vec![0];
    c
}

pub fn write_config(dir: &Path, cfg: &PipelineConfig) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

pub fn crgan(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crgan"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}
