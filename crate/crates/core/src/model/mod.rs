//! Detector structure: parameter registry, blocks, configuration and the assembled model.

pub mod blocks;
pub mod config;
pub mod detector;
pub mod params;

pub use config::{DetectorConfig, HeadGeometry, DEFAULT_ANCHORS, STRIDES};
pub use detector::{baseline_param_formula, DetectorModel, ForwardOutput, InsertionPoint, ParamCounts, INSERTION_ORDER};
pub use params::{Bound, ParamId, ParamStore};
