//! Multi-view capture of a grasp scene: a jittered ring of inward-looking
//! cameras, each rendering color, labels, and depth.

use rand::Rng;

use crate::error::Result;
use crate::geometry::Camera;
use crate::math::{vec3, Vec3};
use crate::raster::{DepthMap, Label, LabelMask, RgbImage};
use crate::rng::{stream, StreamTag};
use crate::scalar::Real;

use super::grasp::{hand_albedo, Scene};
use super::raytrace::{render_meshes, ShadedMesh};

/// Horizontal field of view is 45 degrees: fx = width / (2 tan 22.5) = 1.2071 width.
pub const FOCAL_PER_WIDTH: f64 = 1.207_106_781_186_547_6;
/// Camera ring radius (meters) and jitter.
pub const RING_RADIUS: f64 = 0.45;
const RADIUS_JITTER: f64 = 0.04;
/// Camera ring elevation above the desk plane (radians) and jitter.
pub const RING_ELEVATION: f64 = 0.55;
const ELEVATION_JITTER: f64 = 0.15;

#[derive(Clone, Debug)]
pub struct SceneView<S> {
    pub camera: Camera<S>,
    pub image: RgbImage<S>,
    pub mask: LabelMask,
    pub depth: DepthMap<S>,
}

#[derive(Clone, Debug)]
pub struct SceneDataset<S> {
    pub scene: Scene<S>,
    pub views: Vec<SceneView<S>>,
}

/// Cameras evenly spaced in azimuth around the scene centroid, with
/// per-view jitter in azimuth, elevation, and radius. Deterministic in seed.
pub fn camera_ring<S: Real>(
    target: Vec3<S>,
    num_views: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Vec<Camera<S>> {
    let focal = FOCAL_PER_WIDTH * width as f64;
    let tf = target.map(|v: S| v.f64());
    (0..num_views)
        .map(|i| {
            let mut rng = stream(seed, StreamTag::Cameras, i as u64);
            let base_az = 2.0 * std::f64::consts::PI * i as f64 / num_views as f64;
            let az_jitter = 0.3 * 2.0 * std::f64::consts::PI / num_views as f64;
            let az = base_az + az_jitter * (2.0 * rng.gen::<f64>() - 1.0);
            let el = RING_ELEVATION + ELEVATION_JITTER * (2.0 * rng.gen::<f64>() - 1.0);
            let radius = RING_RADIUS + RADIUS_JITTER * (2.0 * rng.gen::<f64>() - 1.0);
            let eye = tf
                + vec3(
                    radius * el.cos() * az.cos(),
                    radius * el.cos() * az.sin(),
                    radius * el.sin(),
                );
            Camera::look_at(
                Vec3::of(eye.x, eye.y, eye.z),
                target,
                vec3(S::zero(), S::zero(), S::one()),
                S::of(focal),
                S::of(focal),
                S::of(width as f64 / 2.0),
                S::of(height as f64 / 2.0),
                width,
                height,
            )
        })
        .collect()
}

/// Renders `num_views` calibrated views of the scene. Deterministic in
/// (scene, seed); depth maps are kept in memory for evaluation.
pub fn make_dataset<S: Real>(
    scene: &Scene<S>,
    num_views: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<SceneDataset<S>> {
    let hand_mesh = scene.hand.as_mesh();
    let meshes = [
        ShadedMesh {
            mesh: &hand_mesh,
            label: Label::Hand,
            albedo: hand_albedo(),
        },
        ShadedMesh {
            mesh: &scene.object,
            label: Label::Object,
            albedo: scene.object_spec.albedo,
        },
    ];
    let target = scene_centroid(scene);
    let views = camera_ring(target, num_views, width, height, seed)
        .into_iter()
        .map(|camera| {
            let render = render_meshes(&meshes, scene.background, &camera);
            SceneView {
                camera,
                image: render.image,
                mask: render.mask,
                depth: render.depth,
            }
        })
        .collect();
    Ok(SceneDataset {
        scene: scene.clone(),
        views,
    })
}

/// Midpoint of the combined hand and object bounds.
pub fn scene_centroid<S: Real>(scene: &Scene<S>) -> Vec3<S> {
    let hand_mesh = scene.hand.as_mesh();
    let mut bounds = hand_mesh.aabb().expect("hand mesh is nonempty");
    if let Some(ob) = scene.object.aabb() {
        bounds = bounds.union(&ob);
    }
    bounds.center()
}
