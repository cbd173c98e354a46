//! Joint stage segmentation and transferability prediction for time-lapse
//! embryo videos with a dual-branch temporal transformer.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod matching;
pub mod mhi;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod videodata;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type Params32 = model::Parameters<f32>;
pub type Params64 = model::Parameters<f64>;
pub type Sample32 = trainer::Sample<f32>;
pub type Sample64 = trainer::Sample<f64>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
