//! Numerical core of the Cr-GAN few-shot augmentation pipeline.
//!
//! Everything in this crate is a pure function of its inputs plus an
//! explicit random source, and builds with `alloc` only. The companion
//! `crgan` crate layers the tensor models, file formats and CLI on top.

#![no_std]
#![deny(missing_docs)]

extern crate alloc;

pub mod bank;
mod error;
pub mod geometry;
pub mod gradcheck;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod raster;
pub mod schedule;

pub use error::{Error, Result};
pub use latent::{BinaryMask, FeatureStats, LatentCode, LatentSource, StatsRole};
pub use losses::LossWeights;
