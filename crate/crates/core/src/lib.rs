//! Level-set loss for semantic segmentation, with a Chan-Vese baseline, a
//! small trainable network and synthetic data generation.

pub mod chan_vese;
pub mod curves;
pub mod data_synth;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod heaviside;
pub mod ls_loss;
pub mod metrics;
pub mod pgm;
pub mod tinynet;
pub mod train;

pub use error::{Error, Result};
pub use grid::{BinaryMask, Grid, Image, LabelMap, ProbMaps};
pub use heaviside::HeavisideKind;
