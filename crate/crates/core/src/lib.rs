//! Desk-scale laboratory for patch-wise robustness of patch-based vision models.
//!
//! Trains micro ViT / ResNet / Mixer classifiers, perturbs individual input
//! patches with natural corruptions or optimized adversarial noise, and
//! quantifies how attention mediates robustness, including a
//! temperature-smoothed attention defense.

pub mod analysis;
pub mod attack;
pub mod corrupt;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, FormatError, Result};
pub use tensor::{Tape, Tensor, Var};
