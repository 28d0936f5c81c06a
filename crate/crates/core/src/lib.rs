//! Multi-view progressive adaptation for cross-domain few-shot segmentation.

pub mod dmp;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod hpa;
pub mod proto_seg;
pub mod synthbench;

pub use error::{MpaError, Result};
pub use mpa_autodiff as autodiff;
