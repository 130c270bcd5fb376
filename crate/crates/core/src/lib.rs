//! Synthetic fungal growth-stage images paired with class captions, a small
//! contrastive dual encoder trained on them, and zero-shot evaluation.
//!
//! The numeric core ([`embed`], [`train`], [`zeroshot`]) is generic over a [`Scalar`]
//! (`f32` or `f64`); the aliases below name the concrete instantiations.

pub mod captions;
pub mod config;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod morphology;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod train;
pub mod zeroshot;

pub use error::{Error, Result};
pub use morphology::{Canvas, StageClass, StageParams, StructureGraph};
pub use scalar::Scalar;

pub type EncoderPairF32 = embed::EncoderPair<f32>;
pub type EncoderPairF64 = embed::EncoderPair<f64>;
pub type GradientsF32 = embed::Gradients<f32>;
pub type GradientsF64 = embed::Gradients<f64>;
pub type CheckpointF32 = embed::Checkpoint<f32>;
pub type CheckpointF64 = embed::Checkpoint<f64>;
pub type TrainerF32<'a> = train::Trainer<'a, f32>;
pub type TrainerF64<'a> = train::Trainer<'a, f64>;
