//! Core of the distillation toolkit: training recipes and job specs, the
//! logits- and feature-based distillation losses, the data pipeline, and
//! analysis helpers (CKA, gap tables, grids, reports).

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod run;

pub use error::{Error, ErrorCategory, Result};
