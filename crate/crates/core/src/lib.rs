//! Learning image degradations from unpaired clean and corrupted image sets.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnose;
pub mod error;
pub mod evaluate;
pub mod image;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod preprocess;
pub mod rng;
pub mod synthesis;
pub mod toy;
pub mod train;

pub use error::{CoreError, Result};
pub use image::ImageTensor;
pub use model::{LatentContent, LatentDegradation, Model, ModelConfig};
