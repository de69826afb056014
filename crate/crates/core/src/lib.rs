//! Hand-conditioned semantic radiance fields for single-image hand-object
//! scene reconstruction.
//!
//! The pipeline, end to end: a synthetic grasp-scene generator renders
//! multi-view supervision; a small convolutional encoder lifts the input view
//! to pixel-aligned features; hand face centroids and masked object pixels
//! rasterize into a sparse voxel feature volume; a sparse 3D convolutional
//! network turns that volume into multi-scale interaction features; a field
//! head maps per-point features to density, color, and class logits, rendered
//! by emission-absorption quadrature; training backpropagates a photometric +
//! semantic loss through the whole stack with hand-written reverse-mode
//! gradients; reconstruction extracts semantic meshes by marching cubes; and
//! the evaluation module scores images and meshes.
//!
//! Everything numeric is generic over [`scalar::Real`] (f32 or f64). The
//! training pipeline and checkpoints run at f32; gradient checks instantiate
//! the same code at f64.

pub mod error;
pub mod feature_volume;
pub mod geometry;
pub mod image_encoder;
pub mod interaction_encoder;
pub mod math;
pub mod mesh;
pub mod nn;
pub mod raster;
pub mod reconstruction;
pub mod rng;
pub mod scalar;
pub mod scene;
pub mod semantic_field;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

/// Concrete aliases for the two supported precisions.
pub type Vec3f = math::Vec3<f32>;
pub type Vec3d = math::Vec3<f64>;
pub type Mat3f = math::Mat3<f32>;
pub type Mat3d = math::Mat3<f64>;
pub type Aabbf = math::Aabb<f32>;
pub type Aabbd = math::Aabb<f64>;
pub type CameraF = geometry::Camera<f32>;
pub type CameraD = geometry::Camera<f64>;
