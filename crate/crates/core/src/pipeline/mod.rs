//! End-to-end stages: data, training, synthesis, evaluation, folds.

pub mod config;
pub mod data;
pub mod eval;
pub mod synth;
pub mod train;

pub use config::*;
pub use data::*;
pub use eval::*;
pub use synth::*;
pub use train::*;
