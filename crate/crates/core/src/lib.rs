//! FTHNet: a windowed-attention backbone whose multi-scale distortion vector
//! is scored by a target network with per-image generated parameters.

pub mod attention;
pub mod bench;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, GraphMode, ParamId, Var};
pub use tensor::{Real, Tensor};
