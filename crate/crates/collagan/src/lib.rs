//! Multi-domain image imputation with a collaborative GAN.
//!
//! A single generator learns the joint manifold of N aligned image domains
//! and synthesizes any one domain from the complete set of the others,
//! trained against a single two-headed discriminator with multiple
//! cycle-consistency, least-squares adversarial, domain-classification, and
//! structural-similarity losses. A procedural multi-contrast phantom dataset
//! plus a leave-one-out essentiality study make the whole pipeline runnable
//! on a CPU in minutes.
//!
//! The crate is organized around:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode differentiation
//! - [`generator`] / [`discriminator`]: the two networks
//! - [`losses`]: every training objective
//! - [`phantom`]: dataset synthesis, preprocessing, augmentation, storage
//! - [`trainer`]: the alternating optimization loop
//! - [`metrics`]: NMSE / SSIM / Dice and the essentiality study
//! - [`cli`]: batch-operator subcommands

pub mod cli;
pub mod config;
pub mod discriminator;
pub mod generator;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod phantom;
pub mod tensor;
pub mod trainer;

pub use tensor::{Graph, Tensor, TensorError, Value};

/// Number of image domains in the default configuration.
pub const DEFAULT_NUM_DOMAINS: usize = 4;
