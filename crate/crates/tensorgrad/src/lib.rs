//! Dense-tensor reverse-mode automatic differentiation sized for small volumetric networks:
//! 3D convolutions, batch norm, pooling/upsampling, point feature gathering, the Jaccard,
//! MSE and BCE losses, and Adam.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod layers;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use error::{GradError, Result};
pub use graph::{GatherRow, Graph, Var};
pub use layers::{apply_all, Layer};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use scalar::Real;
pub use tensor::Tensor;
