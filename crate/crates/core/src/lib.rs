//! Multimodal UI-control detection: a small tape autodiff engine, a
//! YOLO-style detector with optional text cross-attention, a synthetic
//! screenshot generator, text embedding, training and evaluation.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` for training,
//! `f64` for gradient checks); the aliases below name the common choices.

pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod parallel;
pub mod scalar;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
/// The detector as trained and served.
pub type Detector = model::DetectorModel<f32>;
