//! Spectral-token vision transformers.
//!
//! Images are projected onto an ordered spectral basis (PCA eigenimages,
//! Fourier modes or graph-Laplacian eigenvectors); each coefficient becomes one
//! token of a compact self-attention classifier. A parameter-balanced
//! patch-based ViT shares the same backbone for comparison.

pub mod datagen;
pub mod embed;
pub mod error;
pub mod experiments;
pub mod gradcore;
pub mod metrics;
pub mod model;
pub mod spectra;
pub mod training;

pub use error::{Error, Result};
