//! Context-aware emotion recognition: a ViT image encoder, text embedding and
//! a Q-Former that fuses them, trained with a small reverse-mode autograd.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod describe;
pub mod error;
pub mod fuzzing;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod qformer;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use model::{EmotionModel, ModelConfig, ModelInput};
pub use tensor::{RngState, Tensor};
