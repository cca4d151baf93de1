//! Few-shot segmentation with hierarchically decoupled matching, built on a
//! small reverse-mode autodiff engine over `f64` tensors.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod distillation;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pnm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{HdmNet, ModelConfig};
pub use tensor::{Layout, Tensor};
