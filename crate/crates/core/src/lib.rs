//! Backend-pluggable toolkit for recoverable face privacy protection on
//! diffusion models.
//!
//! The library is organized around three stages:
//!
//! 1. **Key learning** — [`msi`] trains a per-image multi-scale inversion
//!    network that emits a set of ten stage-wise conditional embeddings
//!    (*key-E*).
//! 2. **Protection** — [`pipelines`] noises the image latent, then denoises
//!    it with energy-based identity guidance ([`guidance`]) and a two-phase
//!    embedding schedule ([`strategy`]), producing anonymized or
//!    visually-hidden images plus an inverted terminal latent (*key-I*).
//! 3. **Recovery** — deterministic DDIM sampling from key-I conditioned on
//!    key-E reconstructs the original image; [`eval`] measures how well.
//!
//! All diffusion arithmetic lives in [`schedule`] and is exact enough to be
//! tested against closed forms. Learned components are abstracted behind the
//! traits in [`adapters`]; the built-in backends (an analytic linear-Gaussian
//! oracle and a tiny trainable cross-attention predictor) make the whole
//! pipeline runnable and testable at desk scale without pretrained weights.

pub mod adapters;
pub mod autodiff;
pub mod eval;
pub mod guidance;
pub mod image;
pub mod msi;
pub mod optim;
pub mod pipelines;
pub mod schedule;
pub mod strategy;

pub use adapters::{Backends, IdentityEmbedding, Metric};
pub use image::Image;
pub use msi::{ConditionalEmbeddingSet, StageEmbedding};
pub use pipelines::{NoiseKey, RunConfig, RunKind};
pub use schedule::{LatentCode, NoiseSchedule, Step};
