//! Camera models, projection, ray generation, depth sampling, and positional
//! encodings shared by every other module.

pub mod camera;
pub mod encoding;
pub mod sampling;

pub use camera::{Camera, Ray, DEFAULT_FAR, DEFAULT_NEAR, MIN_DEPTH};
pub use encoding::PositionalEncoding;
pub use sampling::{sample_along_ray, sample_along_ray_with, RaySamples};
