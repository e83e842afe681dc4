//! Conditional restoration network: a convolutional encoder–decoder with
//! skip connections, mask attention blocks in front of the decoder stages
//! and separate image and mask heads. Forward and backward passes are
//! written out by hand over im2col + GEMM convolutions.

mod model;
mod params;
mod tensor;

pub use model::{
    batch_gradients, batch_loss, compose, mam_forward, triplet_loss_grad, BatchLoss, Tape,
};
pub use params::{ArchConfig, ModelParams, ParamTensor, DECODER_STAGES, ENCODER_LEVELS};
pub use tensor::{Scalar, Tensor};

use crate::error::Result;
use crate::image::{Image, MaskPlane};

/// Anything that fills in the masked pixels of an image.
pub trait Restorer: Sync {
    /// Returns the raw restoration `I'` for `masked = I ⊙ M`.
    fn restore(&self, masked: &Image, mask: &MaskPlane) -> Result<Image>;
}

impl<T: Scalar> Restorer for ModelParams<T> {
    fn restore(&self, masked: &Image, mask: &MaskPlane) -> Result<Image> {
        Ok(self.forward(masked, mask)?.0)
    }
}
