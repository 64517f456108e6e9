//! Geometry and interpolation primitives shared by the rest of the crate.
//!
//! Everything here works in meters and `f64`. Types are immutable once
//! built, and every free function is pure.

mod camera;
mod grid;
pub(crate) mod mesh;
mod rotation;

pub use camera::{perspective_project, Camera, CameraDoc, Projection};
pub use grid::{bilinear_sample, trilinear_sample, FeatureMap2D, TrilinearStencil, VoxelGrid};
pub use mesh::{read_obj, write_obj, SurfaceSampler, TriangleMesh};
pub use rotation::{Quat, RigidTransform, Rotation};

use thiserror::Error;

/// Positions in meters, directions unitless.
pub type Vec3 = nalgebra::Vector3<f64>;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point at or behind the camera plane (camera-space z = {0})")]
    BehindCamera(f64),
    #[error("face {face} references vertex {index} but mesh has {count} vertices")]
    FaceIndexOutOfRange { face: usize, index: u32, count: usize },
    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("OBJ parse error on line {line}: {msg}")]
    Obj { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Global up axis. The world frame is z-up, with the ground at z = 0.
pub const UP: Vec3 = Vec3::new(0.0, 0.0, 1.0);

pub(crate) fn is_finite(v: &Vec3) -> bool {
    v.iter().all(|c| c.is_finite())
}
