//! Dual-encoder contrastive vision-language toolkit.
//!
//! Two towers — a transformer text encoder and a ViT image encoder — map
//! captions and images into one shared, L2-normalized embedding space.
//! On top of that joint space the crate provides:
//!
//! - byte-level BPE tokenization with a fixed context window ([`tokenizer`])
//! - image preprocessing and patch-grid geometry ([`vision`])
//! - the towers themselves with hand-written forward/backward passes ([`encoders`], [`nn`])
//! - symmetric contrastive training with warmup+cosine scheduling,
//!   resolution-change fine-tuning and a frozen-backbone adapter regime ([`training`])
//! - zero-shot classification via prompt templates and the metric family
//!   used to evaluate it ([`zeroshot`])
//! - linear-probe few-shot evaluation ([`probe`])
//! - inference throughput measurement ([`bench`])
//! - self-describing single-file checkpoints and the preset registry ([`persistence`])
//!
//! All numeric code is generic over [`float::Real`] so the same model runs
//! in f32 for normal work and in f64 for gradient checks.

pub mod bench;
pub mod data;
pub mod encoders;
pub mod error;
pub mod float;
pub mod nn;

pub mod persistence;
pub mod probe;
pub mod tokenizer;
pub mod training;
pub mod util;
pub mod vision;
pub mod zeroshot;

pub use error::{Error, Result};
pub use float::Real;
