//! Self-supervised masking for unsupervised anomaly detection.
//!
//! A conditional encoder–decoder is trained to restore randomly masked grid
//! cells of normal images. At inference the mask is initialized with
//! complementary checkerboards and then progressively refined towards the
//! patches whose restoration error stays above a validation threshold.

pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod inference;
pub mod masking;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use image::{Image, MaskPlane, Plane, ScoreMap};
