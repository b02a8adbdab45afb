//! Unpaired two-modality segmentation with shared convolutions,
//! modality-specific batch normalization and a class-specific affinity
//! consistency loss, on a small reverse-mode autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod autograd;
pub mod config;
pub mod csa;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use config::TrainConfig;
pub use csa::{AffinityMatrix, ClassMaskSet, CsaConfig, Reduction};
pub use error::{Error, Result};
pub use losses::LossWeights;
pub use metrics::SegReport;
pub use model::{DualStreamModel, ModelSpec, Setting, Sharing};
pub use nn::{ModalityId, Mode};
pub use rng::SeedTree;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Model64 = DualStreamModel<f64>;
pub type Model32 = DualStreamModel<f32>;
pub type Sample64 = data::Sample<f64>;
pub type Sample32 = data::Sample<f32>;
