//! Networks for conditioned implicit shape segmentation: a configurable 3D UNet (edge
//! detector and image-to-mask baseline) and the edge-map-conditioned occupancy model.

pub mod error;
pub mod net;
pub mod points;
pub mod shape;
pub mod shape_train;
pub mod unet;
pub mod unet_train;

pub use error::{ModelError, Result};
pub use shape::{FeaturePyramid, LevelGrid, PointFeatureConfig, ShapeConfig, ShapeModel};
pub use shape_train::{train_shape_model, ShapeAugment, ShapeTrainConfig};
pub use unet::{OutActivation, UNet, UNetConfig, UNetRole};
pub use unet_train::{train_baseline, train_edge_detector, EpochLog, Trained, UNetTrainConfig};
