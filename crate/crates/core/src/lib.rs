//! Desk-scale laboratory for studying neural-network normalizers.
//!
//! The crate bundles a small reverse-mode tensor engine, every normalizer
//! under study, MLP and WideResNet-style models, the signal-propagation and
//! curvature diagnostics, an SGD trainer and the experiment harness behind
//! the `normlab` binary.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod models;
pub mod normalizers;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
