//! Joint classification and jigsaw-puzzle training for domain generalization
//! and adaptation.

pub mod datasets;
mod error;
pub mod evalkit;
pub mod model;
pub mod patchwork;
pub mod permgen;
pub mod trainer;

pub use error::{Error, Result};
