//! Illumination compensation for eye-fundus-like images.
//!
//! The crate has two halves. The classical half removes shadows from an
//! image by white balancing, inverting intensities, dehazing the inverted
//! image with the Dark Channel Prior, and inverting back. The learned half
//! replaces the heuristic transmission estimate with a small U-Net whose
//! output feeds a differentiable shadow removal layer, so the whole
//! preprocessing step can be trained end-to-end against a classification
//! loss plus a regression term toward a dataset-averaged reference map.
//!
//! All pixel intensities are `f64` in `[0, 1]`. All tensors are dense
//! row-major `f64`.

pub mod autodiff;
pub mod data;
pub mod dehaze;
pub mod gradcheck;
pub mod imgproc;
pub mod models;
pub mod shadow;
pub mod trainer;

pub use imgproc::{GrayMap, Image, WhiteBalanceResult};
