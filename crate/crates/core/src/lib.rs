//! Structural image inpainting at desk scale.
//!
//! The crate trains a context encoder to predict the missing center of an
//! image from its periphery, first with a structural (pixel + deep feature)
//! reconstruction loss and then with an added adversarial phase, and refines
//! predictions with patch-correspondence optimization under total-variation
//! regularization. Everything runs on a self-contained `f64` tensor core with
//! reverse-mode gradients.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod refine;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
