//! Domain generalization with domain-specific aggregation modules.
//!
//! A shared backbone feeds one aggregation module per source domain. Each
//! module is trained only on its own domain; validation scores a sample with
//! every module except its own domain's, and test-time predictions sum the
//! logits of all modules.

pub mod aggregation;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod evaluation;
pub mod experiment;
pub mod error;
pub mod feature_map;
pub mod features;
pub mod init;
pub mod model;
pub mod ops;
pub mod training;

pub use error::{DsamError, Result};
