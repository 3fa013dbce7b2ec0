//! Federated-learning simulator built on a small reverse-mode autodiff core.
//!
//! The crate trains a compact convolutional classifier across simulated
//! clients holding skewed, class-imbalanced shards, and layers four
//! self-adjusting mechanisms on top of plain federated averaging:
//!
//! - [`cro`]: server-side class rectification from per-class head gradients
//!   measured on a small balanced monitoring set;
//! - [`fau`]: divergence-aware blending of client and global backbones, with
//!   divergence measured by linear centred kernel alignment;
//! - [`dmr`]: cosine schedules that hand influence from the global model to
//!   class rectification as training progresses;
//! - [`ace`]: per-client context embeddings driving a sampled foreground mask.
//!
//! [`runtime::run_training`] ties them together; [`report`] writes the
//! per-round CSV/JSON logs.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ace;
pub mod autodiff;
pub mod cro;
pub mod data;
pub mod dmr;
pub mod error;
pub mod fau;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod runtime;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/configuration.md")]
    struct Configuration;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/mechanisms.md")]
    struct Mechanisms;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    struct Reproducibility;
}
