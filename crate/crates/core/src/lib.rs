//! Collaborative RGB/PBR diffusion at desk scale.

pub mod checkpoint;
pub mod checks;
pub mod collab;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod shading;
pub mod tensor;
pub mod training;
pub mod vae;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{Graph, ParamStore, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
