//! Explanation-guided learning: an image classifier trained jointly on labels,
//! Grad-CAM supervision from sparse masks, distribution consistency on
//! unannotated images, and a text decoder grounded in the classifier features.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod grounding;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod saliency;
pub mod supervision;
pub mod trainer;
pub mod types;

pub use config::{load_config, seed_everything, ExperimentConfig, SeedBank};
pub use error::{MeglError, Result};
pub use types::{ImageTensor, LossBreakdown, Normalization, SaliencyMap, Sample};
