//! Patch-based self-supervised pretraining for time series.
//!
//! The crate is organized bottom-up:
//! - [`matrix`], [`ops`], [`rng`], [`gradcheck`]: a minimal dense f64 kernel
//!   with hand-derived backward passes and a finite-difference oracle.
//! - [`data`]: CSV ingestion, chronological splits, windowing, instance
//!   normalization, patchification, complementary masking, toy generators.
//! - [`model`]: encoder (linear / two-layer MLP / MLP-mixer) and the
//!   reconstruction, forecast and classification heads.
//! - [`pretrain`]: the patch reconstruction objective, hierarchical
//!   contrastive loss, baselines, Adam, and the pretraining loop.
//! - [`finetune`]: linear probing, end-to-end fine-tuning, supervised
//!   training, and evaluation metrics.
//! - [`experiments`]: packaged toy-data studies (distribution shift and
//!   class-structure probing).

pub mod data;
pub mod error;
pub mod experiments;
pub mod finetune;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod ops;
pub mod pretrain;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rng::RngStream;
