//! Pinhole camera model and ray generation.
//!
//! Convention: right-handed frames, +z forward in the camera frame, pixel
//! origin at the image's top-left corner. A continuous pixel coordinate (u, v)
//! equal to an integer pair lies at that pixel's center.

use crate::error::{Error, Result};
use crate::math::{vec3, Mat3, Vec3};
use crate::scalar::Real;

/// Depth at or below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

/// Default metric depth range assigned to freshly cast rays; rendering
/// replaces it with the ray's intersection against the feature-volume bounds.
pub const DEFAULT_NEAR: f64 = 1e-3;
pub const DEFAULT_FAR: f64 = 10.0;

#[derive(Clone, Copy, Debug)]
pub struct Camera<S> {
    pub fx: S,
    pub fy: S,
    pub cx: S,
    pub cy: S,
    /// World-to-camera rotation.
    pub rotation: Mat3<S>,
    /// World-to-camera translation: x_cam = R x_world + t.
    pub translation: Vec3<S>,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Ray<S> {
    pub origin: Vec3<S>,
    /// Unit direction.
    pub direction: Vec3<S>,
    pub near: S,
    pub far: S,
}

impl<S: Real> Camera<S> {
    pub fn new(
        fx: S,
        fy: S,
        cx: S,
        cy: S,
        rotation: Mat3<S>,
        translation: Vec3<S>,
        width: usize,
        height: usize,
    ) -> Self {
        Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        }
    }

    /// Camera at `eye` looking toward `target`, image +y pointing down-world
    /// relative to `up`.
    pub fn look_at(
        eye: Vec3<S>,
        target: Vec3<S>,
        up: Vec3<S>,
        fx: S,
        fy: S,
        cx: S,
        cy: S,
        width: usize,
        height: usize,
    ) -> Self {
        let fwd = (target - eye).normalized();
        let right = fwd.cross(up).normalized();
        let down = fwd.cross(right);
        let rotation = Mat3::from_rows(right.to_array(), down.to_array(), fwd.to_array());
        let translation = -rotation.mul_vec(eye);
        Camera::new(fx, fy, cx, cy, rotation, translation, width, height)
    }

    pub fn to_camera_frame(&self, p_world: Vec3<S>) -> Vec3<S> {
        self.rotation.mul_vec(p_world) + self.translation
    }

    /// Camera center in the world frame.
    pub fn center(&self) -> Vec3<S> {
        -self.rotation.transpose().mul_vec(self.translation)
    }

    /// Camera forward axis (+z of the camera frame) in the world frame.
    pub fn forward(&self) -> Vec3<S> {
        self.rotation.transpose().mul_vec(vec3(S::zero(), S::zero(), S::one()))
    }

    /// Perspective projection to continuous pixel coordinates, restricted to
    /// the image bounds.
    pub fn project(&self, p_world: Vec3<S>) -> Result<(S, S)> {
        let (u, v) = self.project_any(p_world)?;
        if u < S::zero() || u >= S::of(self.width as f64) || v < S::zero() || v >= S::of(self.height as f64) {
            return Err(Error::OutOfImage {
                u: u.f64(),
                v: v.f64(),
                width: self.width,
                height: self.height,
            });
        }
        Ok((u, v))
    }

    /// Perspective projection without the image-bounds check; still rejects
    /// points at or behind the camera plane.
    pub fn project_any(&self, p_world: Vec3<S>) -> Result<(S, S)> {
        let pc = self.to_camera_frame(p_world);
        if pc.z <= S::of(MIN_DEPTH) {
            return Err(Error::BehindCamera { depth: pc.z.f64() });
        }
        let u = self.fx * pc.x / pc.z + self.cx;
        let v = self.fy * pc.y / pc.z + self.cy;
        Ok((u, v))
    }

    /// Pixel whose center is nearest the projection, or None when the point
    /// is behind the camera or lands outside the image. Pixel (ix, iy) covers
    /// the continuous square [ix, ix+1) x [iy, iy+1), so this is a floor.
    pub fn project_nearest_pixel(&self, p_world: Vec3<S>) -> Option<(usize, usize)> {
        let (u, v) = self.project_any(p_world).ok()?;
        let (ui, vi) = (u.floor().f64() as i64, v.floor().f64() as i64);
        if ui < 0 || vi < 0 || ui >= self.width as i64 || vi >= self.height as i64 {
            return None;
        }
        Some((ui as usize, vi as usize))
    }

    /// Ray through a continuous pixel coordinate, carrying the default depth
    /// range.
    pub fn cast_ray(&self, u: S, v: S) -> Result<Ray<S>> {
        if u < S::zero() || u >= S::of(self.width as f64) || v < S::zero() || v >= S::of(self.height as f64) {
            return Err(Error::OutOfImage {
                u: u.f64(),
                v: v.f64(),
                width: self.width,
                height: self.height,
            });
        }
        let dir_cam = vec3((u - self.cx) / self.fx, (v - self.cy) / self.fy, S::one());
        let direction = self.rotation.transpose().mul_vec(dir_cam).normalized();
        Ok(Ray {
            origin: self.center(),
            direction,
            near: S::of(DEFAULT_NEAR),
            far: S::of(DEFAULT_FAR),
        })
    }

    pub fn checked(self) -> Result<Self> {
        if !self.rotation.is_orthonormal(S::of(1e-6)) {
            return Err(Error::Parse {
                what: "camera rotation".into(),
                detail: "matrix is not orthonormal".into(),
            });
        }
        if self.fx <= S::zero() || self.fy <= S::zero() {
            return Err(Error::Parse {
                what: "camera intrinsics".into(),
                detail: "focal lengths must be positive".into(),
            });
        }
        Ok(self)
    }
}

impl<S: Real> Ray<S> {
    pub fn at(&self, t: S) -> Vec3<S> {
        self.origin + self.direction * t
    }

    /// Same ray with near/far replaced by the intersection with `bounds`
    /// (clamped below by the current near); None when the ray misses.
    pub fn clipped_to(&self, bounds: &crate::math::Aabb<S>) -> Option<Ray<S>> {
        let (t0, t1) = bounds.clip_ray(self.origin, self.direction)?;
        let near = t0.max(self.near);
        if t1 - near <= S::of(1e-9) {
            return None;
        }
        Some(Ray {
            near,
            far: t1,
            ..*self
        })
    }
}
