//! Missing-modality reconstruction: a fusion transformer over the two
//! available (frozen) embeddings and a decoder for the absent modality.

pub mod loss;
pub mod model;
pub mod ssim;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::modality::Modality;

pub use loss::{
    recon_loss, recon_loss_audio, recon_loss_audio_with_grad, recon_loss_image, recon_loss_image_with_grad,
    recon_loss_text, recon_loss_text_with_grad, ReconstructionPair,
};
pub use model::{fuse_available, Decoded, MmrModel, DECODER_GROUP, FUSION_GROUP};
pub use ssim::{ssim, ssim_multichannel, ssim_with_grad, SsimParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub delta: f64,
    pub eta: f64,
    pub theta: f64,
    pub missing: Modality,
    pub fusion_depth: usize,
    pub fusion_width: usize,
    pub fusion_heads: usize,
    /// Channels of the first transposed-convolution stage; halved per stage.
    pub decoder_channels: usize,
    pub ssim: SsimParams,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            delta: 0.75,
            eta: 1.0,
            theta: 0.25,
            missing: Modality::Audio,
            fusion_depth: 2,
            fusion_width: 64,
            fusion_heads: 4,
            decoder_channels: 32,
            ssim: SsimParams::default(),
        }
    }
}

impl ReconConfig {
    pub fn for_missing(missing: Modality) -> Self {
        Self { missing, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("delta", self.delta), ("theta", self.theta)] {
            if !(0.0..=1.0).contains(&w) {
                return config(format!("{name} must lie in [0, 1], got {w}"));
            }
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return config(format!("eta must be non-negative, got {}", self.eta));
        }
        if self.fusion_depth == 0 || self.fusion_width == 0 {
            return config("fusion depth and width must be positive");
        }
        if self.fusion_heads == 0 || !self.fusion_width.is_multiple_of(self.fusion_heads) {
            return config(format!(
                "fusion width {} is not divisible by {} heads",
                self.fusion_width, self.fusion_heads
            ));
        }
        if self.decoder_channels < 4 {
            return config("decoder needs at least 4 channels in its first stage");
        }
        Ok(())
    }
}
