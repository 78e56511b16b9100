//! Registration of a photograph (plus depth map) to an untextured triangle
//! mesh by refining an error-prone initial camera pose.
//!
//! The pipeline renders the mesh under Gaussian perturbations of the initial
//! pose, converts renders and query image into average-shading-gradient
//! images, matches them densely with a SIFT-flow style matcher, lifts the
//! consistent matches to 2D-3D correspondences, refines each coarse pose with
//! RANSAC-wrapped DLT (or EPnP when intrinsics are known), and accepts the
//! result only when enough refined poses mutually agree.

pub mod asg;
pub mod camera;
pub mod error;
pub mod flow;
pub mod icp;
pub mod mesh;
pub mod pipeline;
pub mod pose;
pub mod raster;
pub mod render;
pub mod synthetic;
pub mod verify;

pub use camera::{
    compose_projection, project_point, CameraIntrinsics, CameraPose, DepthSign, ProjectionMatrix,
};
pub use error::{Error, Result};
pub use mesh::TriangleMesh;
pub use raster::{DepthMap, DerivativeKernel, GradientImage, IntensityImage, NormalMap};
