//! Unsupervised domain adaptation for aerial semantic segmentation.
//!
//! The crate trains a segmenter on a labeled source domain, learns an
//! unpaired cycle-consistent translation between source and target imagery,
//! translates the labeled source set into the target style and fine-tunes
//! the segmenter on it.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Adam, AdamConfig, AdamState, Element, Graph, Tensor, Var};
