//! Contrastive vision-language anomaly detection at desk scale.
//!
//! A small convolutional visual encoder and a bag-of-words textual encoder
//! are trained so that normal images land near the embedding of their
//! object description; the exponential of the negative squared distance is
//! the anomaly score, and Grad-CAM over the last convolutional layer
//! localizes defects.

pub mod error;
pub mod numerics;
pub mod rng;

pub use error::{CladError, Result};
pub mod data;
pub mod model;
pub mod losses;
pub mod scoring;
pub mod training;
pub mod evaluation;
pub mod cli;
