//! Adversarial trajectory-ensemble active learning for point-supervised
//! saliency segmentation.

pub mod adversary;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod grid;
pub mod gridnet;
pub mod labels;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod sampling;
pub mod superpixel;
pub mod trajectory;
pub mod uncertainty;

pub use error::{Error, Result};
