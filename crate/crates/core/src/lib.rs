//! Video emotion recognition with three levels of attention (spatial,
//! channel, frame) over a grouped-convolution residual backbone, trained
//! with noisy-student self-training.
//!
//! All math runs in `f64` on a small reverse-mode autodiff engine
//! ([`autograd::Graph`]).

pub mod attention;
pub mod augment;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod selftrain;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use autograd::{Activation, Graph, Var};
pub use backbone::BackboneConfig;
pub use error::{Error, Result};
pub use model::{Classification, Components, Model, ModelConfig, ModelParams, Region, NUM_CLASSES};
pub use rng::Rng;
pub use tensor::Tensor;
