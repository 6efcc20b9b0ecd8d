//! Image forgery localization with a two-stream convolutional network.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, a tape-based reverse-mode graph, Adam,
//!   finite-difference checking and a binary checkpoint format.
//! - [`imgproc`]: images, PNM I/O, the guided-noise extractor and distortions.
//! - [`backbone`], [`fam`], [`arpm`], [`localizer`]: network components.
//! - [`network`]: the full model, its ablation switches and the training loop.
//! - [`datagen`]: a seeded synthetic forgery generator.
//! - [`metrics`]: AUC, F1, IoU and the evaluation driver.

mod error;

pub mod arpm;
pub mod backbone;
pub mod config;
pub mod datagen;
pub mod fam;
pub mod imgproc;
pub mod localizer;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/images.md")]
    mod images {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
