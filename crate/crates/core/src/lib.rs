//! Tri-modal contrastive alignment of images, captions and mel
//! spectrograms, with missing-modality reconstruction on top of the frozen
//! encoders.

pub mod alignment;
pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod mmr;
pub mod modality;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use modality::Modality;
