//! Joint depth and surface-normal refinement with a multi-patch geometry
//! transformer, trained end to end on synthetic desk-scale scenes.

pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod normals;
pub mod pfm;
pub mod scene;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
