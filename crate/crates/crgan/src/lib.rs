//! Consistency-regularized GAN for few-shot image augmentation.
//!
//! The pipeline has three stages: train the GAN on a handful of real
//! images, contrastively pretrain an encoder on synthesized images, then
//! fine-tune a k-shot classifier on the real images alone. Loss values and
//! their gradients come from [`crgan_core`]; this crate supplies the tensor
//! models, training loops, file formats and the `crgan` command line.

pub mod artifacts;
pub mod bridge;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod fewshot;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod ssl;
pub mod trainer;

pub use error::{Error, Result};
