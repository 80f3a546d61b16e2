//! Encoder-driven masked autoencoder pre-training for volumetric data.
//!
//! The crate is organised around the pre-training pipeline:
//!
//! - [`volume`] — 3D scalar volumes: RVOL file I/O, synthesis, intensity
//!   windowing, cropping and augmentation.
//! - [`tokenizer`] — patchification, mask sampling, 3D sin-cos positional
//!   embeddings and visible/full gather-scatter.
//! - [`autodiff`] — dense tensors with reverse-mode differentiation and a
//!   finite-difference gradient checker.
//! - [`encoder`] / [`decoder`] — the ViT encoder over visible tokens with
//!   intermediate taps, and the cross-attention dense decoder (plus the
//!   self-attention-only baseline decoder).
//! - [`trainer`] — AdamW with warmup-cosine schedule, the deterministic
//!   training loop and bit-exact checkpointing.
//! - [`diagnostics`] — singular spectra and effective rank of layer values,
//!   attention-map extraction, the analytic MAC cost model and a wall-clock
//!   decoder benchmark.

pub mod attention;
pub mod autodiff;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod matrix;
pub mod model;
pub mod params;
pub mod rng;
pub mod tokenizer;
pub mod trainer;
pub mod volume;

pub use autodiff::{Graph, GraphError, Real, Tensor};
pub use matrix::Matrix;
pub use rng::SeededRng;
pub use tokenizer::{MaskPlan, PatchGrid, PosEmbed3D};
pub use volume::{AugmentPolicy, Volume};
