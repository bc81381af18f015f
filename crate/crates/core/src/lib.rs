//! Boundary-aware plain Vision Transformer for vessel segmentation.
//!
//! The crate is organised along the segmentation pipeline:
//!
//! 1. [`imgproc`] – grayscale grids, normalisation and the augmentation suite
//!    (flips, rotation, CLAHE, gamma, elastic deformation).
//! 2. [`sdt`] – exact signed Euclidean distance maps and the boundary loss.
//! 3. [`vit`] – patch embedding, pre-norm transformer encoder, upsampling
//!    decoder, forward/backward passes, parameter and FLOP counts, checkpoints.
//! 4. [`train`] – cross-entropy + boundary compound loss, Adam with decoupled
//!    weight decay, cosine schedule and the epoch/batch training loop.
//! 5. [`metrics`] – confusion counts, Sen/Spe/F1/Acc/IoU and ROC AUC.
//! 6. [`phantom`] – synthetic branching-vessel images with exact masks.
//!
//! Data-parallel loops (per-sample gradients, distance-transform passes,
//! batch evaluation) go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Every
//! reduction is performed in a fixed order, so results are bit-identical
//! regardless of thread count.

pub mod config;
pub mod error;
pub mod experiment;
pub mod imgproc;
pub mod io;
pub mod metrics;
pub mod par;
pub mod phantom;
pub mod rng;
pub mod sdt;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use imgproc::{ImageGrid, MaskGrid};
