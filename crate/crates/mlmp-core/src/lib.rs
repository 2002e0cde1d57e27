//! Test-time adaptation for open-vocabulary semantic segmentation.
//!
//! The library adapts a frozen vision-language segmentation model to each
//! test batch by minimizing entropy over the normalization parameters of the
//! vision encoder, fusing intermediate encoder layers weighted by their
//! prediction confidence and averaging the objective across several prompt
//! templates. Around that core sit a corruption benchmark generator, dataset
//! plumbing for the standard segmentation label spaces, a confusion-matrix
//! evaluator, and a config-driven experiment runner.

pub mod adapt;
pub mod autodiff;
pub mod backbone;
pub mod corrupt;
pub mod data;
pub mod error;
pub mod eval;
pub mod imgproc;
pub mod objective;
pub mod plot;
pub mod runner;
pub mod tensor;

pub use error::{MlmpError, Result};
