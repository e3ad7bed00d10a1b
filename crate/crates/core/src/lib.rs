//! Detector for AI-generated images built from hybrid features: DCT-graded
//! extreme patches encoded through SRM residuals, fused with a semantic
//! embedding and scored by a small MLP.

pub mod data;
pub mod error;
pub mod eval;
pub mod frequency;
pub mod imageio;
pub mod model;
pub mod nn;
pub mod perturb;
pub mod seeding;
pub mod srm;

pub use error::{Error, Result};
pub use imageio::RgbImage;
pub use model::{AideConfig, Checkpoint};
