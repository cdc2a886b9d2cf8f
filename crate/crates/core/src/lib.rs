//! Emulation of non-ideal memristive crossbar matrix-vector multiplication.
//!
//! - [`fixedpoint`]: fixed-point formats, weight slicing, input streaming.
//! - [`circuit`]: ideal MVM, linear parasitic nodal analysis and the
//!   nonlinear device solve that serve as ground truth.
//! - [`datagen`]: sampled `(V, G)` corpora labeled with the distortion ratio.
//! - [`surrogate`]: the two-layer network predicting the distortion ratio.
//! - [`funcsim`]: tiled, bit-sliced layer execution over pluggable backends.

pub mod circuit;
pub mod datagen;
pub mod error;
pub mod fixedpoint;
pub mod funcsim;
pub mod surrogate;

pub use error::{Error, Result};
