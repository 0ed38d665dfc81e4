//! Evidential tri-branch consistency learning for semi-supervised
//! segmentation.
//!
//! The crate bundles a small reverse-mode autodiff engine, Dirichlet
//! evidence utilities, the training objectives, Dempster-Shafer fusion of
//! two evidential branches, a three-decoder segmentation network, a
//! synthetic shape dataset, segmentation metrics and the training loop.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evidence;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{EtcError, Result};
pub use tensor::Tensor;
