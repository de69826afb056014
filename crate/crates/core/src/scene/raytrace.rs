//! Exact ray-traced ground truth: first-hit semantics, Lambertian shading
//! with one fixed directional light plus ambient, no shadows.

use rayon::prelude::*;

use crate::geometry::Camera;
use crate::math::Vec3;
use crate::mesh::TriMesh;
use crate::raster::{DepthMap, Label, LabelMask, RgbImage};
use crate::scalar::Real;

/// World-frame direction toward the light.
pub fn light_direction<S: Real>() -> Vec3<S> {
    Vec3::of(0.35, -0.45, 0.82).normalized()
}

pub const AMBIENT: f64 = 0.35;
pub const DIFFUSE: f64 = 0.65;

pub struct ShadedMesh<'a, S> {
    pub mesh: &'a TriMesh<S>,
    pub label: Label,
    pub albedo: [S; 3],
}

#[derive(Clone, Debug)]
pub struct ViewRender<S> {
    pub image: RgbImage<S>,
    pub mask: LabelMask,
    pub depth: DepthMap<S>,
}

/// Renders first-hit ground truth for a list of labeled meshes. Pixels are
/// sampled at their centers; depth is Euclidean distance from the camera
/// center; misses get the background color and label 0.
pub fn render_meshes<S: Real>(
    meshes: &[ShadedMesh<'_, S>],
    background: [S; 3],
    camera: &Camera<S>,
) -> ViewRender<S> {
    let (w, h) = (camera.width, camera.height);
    let light = light_direction::<S>();
    let ambient = S::of(AMBIENT);
    let diffuse = S::of(DIFFUSE);

    let rows: Vec<Vec<(S, u8, [S; 3])>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let ray = camera
                    .cast_ray(S::of(x as f64 + 0.5), S::of(y as f64 + 0.5))
                    .expect("pixel centers are in bounds");
                let mut best: Option<(S, usize, usize)> = None;
                for (mi, sm) in meshes.iter().enumerate() {
                    if let Some((t, face)) = sm.mesh.raycast(ray.origin, ray.direction, S::zero())
                    {
                        if best.map_or(true, |(bt, _, _)| t < bt) {
                            best = Some((t, mi, face));
                        }
                    }
                }
                match best {
                    Some((t, mi, face)) => {
                        let sm = &meshes[mi];
                        let mut n = sm.mesh.face_normal(face);
                        if n.dot(ray.direction) > S::zero() {
                            n = -n;
                        }
                        let lambert = ambient + diffuse * n.dot(light).max(S::zero());
                        let shade = sm.albedo.map(|a| (a * lambert).min(S::one()));
                        row.push((t, sm.label as u8, shade));
                    }
                    None => row.push((S::infinity(), 0, background)),
                }
            }
            row
        })
        .collect();

    let mut image = RgbImage::new(w, h);
    let mut mask = LabelMask::new(w, h);
    let mut depth = DepthMap::new(w, h);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (t, label, rgb)) in row.into_iter().enumerate() {
            image.set(x, y, rgb);
            mask.set(x, y, label);
            depth.set(x, y, t);
        }
    }
    ViewRender { image, mask, depth }
}
