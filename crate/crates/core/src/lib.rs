//! Hybrid CNN-transformer building blocks in training (multi-branch) and
//! deployed (single-operator) form, the reparameterization engine that
//! converts between them, and analysis and toy-training tooling.

pub mod analyzer;
pub mod blocks;
pub mod error;
pub mod reparam;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
