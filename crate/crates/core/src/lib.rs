//! Desk-scale text-to-image generation stack.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff, checkpoints.
//! - [`vae`]: residual convolutional autoencoder with semantic alignment.
//! - [`mmdit`]: joint text–image diffusion transformer with MSRoPE.
//! - [`flowmatch`]: flow-matching training stages and Euler/CFG sampling.
//! - [`distill`]: distribution-matching distillation into a few-step student.
//! - [`rlhf`]: group-relative policy optimization with composite rewards.
//! - [`datapipe`]: six-stage curation pipeline, failure router, retrieval.
//! - [`promptforge`]: (short prompt, reasoning trace, fine prompt) triplets.
//! - [`evalkit`]: PSNR/SSIM/sliced-Wasserstein and toy corpora.
//! - [`config`]: the flat key-value run configuration.
//! - [`workflow`]: end-to-end training and sampling runs from a config.

pub mod config;
pub mod datapipe;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod flowmatch;
pub mod mmdit;
pub mod promptforge;
pub mod rlhf;
pub mod tensor;
pub mod text;
pub mod vae;
pub mod workflow;

pub use error::{Error, Result};
