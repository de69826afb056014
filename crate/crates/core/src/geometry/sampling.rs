//! Depth sampling along rays.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::camera::Ray;
use crate::math::Vec3;
use crate::rng::{stream, Stream, StreamTag};
use crate::scalar::Real;

/// Ordered depth samples along one ray. `delta[k]` is the gap to the next
/// sample; the last delta closes the interval at the ray's far bound.
#[derive(Clone, Debug)]
pub struct RaySamples<S> {
    pub t: Vec<S>,
    pub delta: Vec<S>,
    pub near: S,
    pub far: S,
}

impl<S: Real> RaySamples<S> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn points(&self, ray: &Ray<S>) -> impl Iterator<Item = Vec3<S>> + '_ {
        let (o, d) = (ray.origin, ray.direction);
        self.t.iter().map(move |&t| o + d * t)
    }
}

/// Splits [near, far] into n equal bins and samples one depth per bin:
/// the midpoint when `stratified` is false, a seeded uniform draw otherwise.
pub fn sample_along_ray<S: Real>(
    ray: &Ray<S>,
    n: usize,
    stratified: bool,
    seed: u64,
) -> Result<RaySamples<S>> {
    let mut rng = stream(seed, StreamTag::RaySamples, 0);
    sample_along_ray_with(ray, n, stratified, &mut rng)
}

/// Same as [`sample_along_ray`] but drawing jitter from a caller-held stream,
/// which lets the training loop sample many rays from one per-iteration
/// generator.
pub fn sample_along_ray_with<S: Real>(
    ray: &Ray<S>,
    n: usize,
    stratified: bool,
    rng: &mut Stream,
) -> Result<RaySamples<S>> {
    let (near, far) = (ray.near, ray.far);
    if n == 0 || (far - near).f64() < 1e-9 {
        return Err(Error::DegenerateRange {
            near: near.f64(),
            far: far.f64(),
        });
    }
    let width = (far - near) / S::of(n as f64);
    let mut t = Vec::with_capacity(n);
    for k in 0..n {
        let u = if stratified {
            S::of(rng.gen::<f64>())
        } else {
            S::of(0.5)
        };
        t.push(near + width * (S::of(k as f64) + u));
    }
    let mut delta = Vec::with_capacity(n);
    for k in 0..n {
        let next = if k + 1 < n { t[k + 1] } else { far };
        delta.push(next - t[k]);
    }
    Ok(RaySamples {
        t,
        delta,
        near,
        far,
    })
}
