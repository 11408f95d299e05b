//! Dual encoders, their decoders, and parameter initialization.

mod config;
mod network;
mod params;

pub use config::{Config, EncoderKind};
pub use network::{decode_image, decode_text, encode_image, encode_text, BoundModel, VisualForward, VisualOutput};
pub use params::{init_params, Architecture, ModelParams, DECODER_CHANNELS, ENCODER_CHANNELS};
