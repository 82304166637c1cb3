//! Structure-observation contrastive pretraining and report generation for
//! paired 3-D volumes and free-text reports.
//!
//! The numerical stack is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the training commands use.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod module;
pub mod optim;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod ten;
pub mod text_embed;
pub mod vision;
pub mod volume;

pub use error::{Error, Result};
pub use module::Module;
pub use scalar::Scalar;

pub type Matrix = ten::Matrix<f64>;
pub type DiffArray = ten::DiffArray<f64>;
pub type Tape = ten::Tape<f64>;
pub type Volume = volume::Volume<f64>;
pub type TextEmbedder = text_embed::TextEmbedder<f64>;
pub type VisionModel = vision::VisionModel<f64>;
pub type ProjectionHeads = align::ProjectionHeads<f64>;
pub type DiversityQueue = align::DiversityQueue<f64>;
pub type DecoderModel = decoder::DecoderModel<f64>;
