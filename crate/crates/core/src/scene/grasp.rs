//! Deterministic grasp synthesis: poses the procedural hand around an object
//! so that fingertips make contact without interpenetration.
//!
//! Each grasp family fixes an approach strategy and open/closed finger
//! poses; the search walks a closing parameter until just before the hand
//! would penetrate the object deeper than the 2 mm contact tolerance, then
//! verifies that at least two fingertip segments lie within 5 mm of the
//! object surface.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{vec3, Mat3, Vec3};
use crate::mesh::TriMesh;
use crate::rng::{stream, StreamTag};
use crate::scalar::Real;

use super::hand::{generate_hand, HandMesh, NUM_FINGERS, POSE_DIM};
use super::object::ObjectSpec;

/// Hand/object interpenetration tolerance (meters).
pub const CONTACT_TOLERANCE: f64 = 0.002;
/// A fingertip segment within this distance of the surface counts as contact.
pub const FINGERTIP_CONTACT: f64 = 0.005;
/// Fingertip contacts required for a valid grasp.
pub const MIN_CONTACTS: usize = 2;
/// Grasp families in the catalogue.
pub const NUM_GRASPS: usize = 5;

pub const GRASP_NAMES: [&str; NUM_GRASPS] = ["power", "pinch", "lateral", "tripod", "hook"];

#[derive(Clone, Debug)]
pub struct Scene<S> {
    pub hand: HandMesh<S>,
    pub object: TriMesh<S>,
    pub object_spec: ObjectSpec<S>,
    pub grasp_id: usize,
    pub background: [S; 3],
}

pub fn default_background<S: Real>() -> [S; 3] {
    [S::of(0.82), S::of(0.82), S::of(0.85)]
}

pub fn hand_albedo<S: Real>() -> [S; 3] {
    [S::of(0.87), S::of(0.65), S::of(0.52)]
}

struct Family {
    /// Base azimuth/elevation of the approach direction (hand toward object).
    azimuth: f64,
    elevation: f64,
    /// Extra palm standoff beyond the object's support radius (meters).
    standoff: f64,
    /// Point the fingers along the approach (reaching past the object, for
    /// hooking over it) instead of across it.
    finger_forward: bool,
    /// Fingers that close during the search (true) vs stay at `open`.
    active: [bool; NUM_FINGERS],
    open: [[f64; 4]; NUM_FINGERS],
    closed: [[f64; 4]; NUM_FINGERS],
    /// Max object width across the grasp aperture for feasibility (meters).
    max_width: f64,
}

// Pose rows are (spread, mcp, pip, dip) for thumb, index, middle, ring, pinky.
fn family(id: usize) -> Family {
    const T: bool = true;
    const F: bool = false;
    match id {
        // Power: palm wraps, all fingers close around the object.
        0 => Family {
            azimuth: 0.0,
            elevation: 0.15,
            standoff: 0.020,
            finger_forward: false,
            active: [T, T, T, T, T],
            open: [
                [0.0, 0.10, 0.05, 0.05],
                [0.0, 0.10, 0.05, 0.05],
                [0.0, 0.10, 0.05, 0.05],
                [0.0, 0.10, 0.05, 0.05],
                [0.0, 0.10, 0.05, 0.05],
            ],
            closed: [
                [0.0, 1.10, 1.10, 0.90],
                [0.0, 1.40, 1.50, 1.20],
                [0.0, 1.40, 1.50, 1.20],
                [0.0, 1.40, 1.50, 1.20],
                [0.0, 1.40, 1.50, 1.20],
            ],
            max_width: 0.16,
        },
        // Pinch: thumb opposes the index; remaining fingers tucked away.
        1 => Family {
            azimuth: 0.35,
            elevation: 0.55,
            standoff: 0.052,
            finger_forward: false,
            active: [T, T, F, F, F],
            open: [
                [0.0, 0.15, 0.10, 0.10],
                [0.0, 0.20, 0.15, 0.10],
                [0.0, 1.40, 1.50, 1.20],
                [0.0, 1.40, 1.50, 1.20],
                [0.0, 1.40, 1.50, 1.20],
            ],
            closed: [
                [0.0, 1.15, 1.10, 1.00],
                [0.0, 1.30, 1.45, 1.25],
                [0.0, 1.40, 1.50, 1.20],
                [0.0, 1.40, 1.50, 1.20],
                [0.0, 1.40, 1.50, 1.20],
            ],
            max_width: 0.085,
        },
        // Lateral: thumb presses toward the side of a curled index.
        2 => Family {
            azimuth: -0.5,
            elevation: 0.35,
            standoff: 0.040,
            finger_forward: false,
            active: [T, T, F, F, F],
            open: [
                [-0.20, 0.10, 0.10, 0.10],
                [0.0, 0.60, 0.90, 0.70],
                [0.0, 1.10, 1.30, 1.10],
                [0.0, 1.20, 1.40, 1.15],
                [0.0, 1.25, 1.45, 1.20],
            ],
            closed: [
                [0.25, 1.20, 1.15, 1.05],
                [0.0, 1.05, 1.35, 1.10],
                [0.0, 1.10, 1.30, 1.10],
                [0.0, 1.20, 1.40, 1.15],
                [0.0, 1.25, 1.45, 1.20],
            ],
            max_width: 0.075,
        },
        // Tripod: thumb, index, and middle close; ring and pinky tucked.
        3 => Family {
            azimuth: 0.2,
            elevation: 0.75,
            standoff: 0.048,
            finger_forward: false,
            active: [T, T, T, F, F],
            open: [
                [0.0, 0.15, 0.10, 0.10],
                [-0.12, 0.20, 0.15, 0.10],
                [0.12, 0.20, 0.15, 0.10],
                [0.0, 1.40, 1.50, 1.20],
                [0.0, 1.40, 1.50, 1.20],
            ],
            closed: [
                [0.0, 1.15, 1.10, 1.00],
                [-0.12, 1.30, 1.45, 1.25],
                [0.12, 1.30, 1.45, 1.25],
                [0.0, 1.40, 1.50, 1.20],
                [0.0, 1.40, 1.50, 1.20],
            ],
            max_width: 0.085,
        },
        // Hook: four fingers hook over the object, thumb stays out.
        4 => Family {
            azimuth: 0.0,
            elevation: 0.95,
            standoff: 0.030,
            finger_forward: true,
            active: [F, T, T, T, T],
            open: [
                [-0.30, 0.20, 0.10, 0.10],
                [0.0, 0.35, 0.60, 0.40],
                [0.0, 0.35, 0.60, 0.40],
                [0.0, 0.35, 0.60, 0.40],
                [0.0, 0.35, 0.60, 0.40],
            ],
            closed: [
                [-0.30, 0.20, 0.10, 0.10],
                [0.0, 0.95, 1.50, 1.30],
                [0.0, 0.95, 1.50, 1.30],
                [0.0, 0.95, 1.50, 1.30],
                [0.0, 0.95, 1.50, 1.30],
            ],
            max_width: 0.14,
        },
        _ => panic!("grasp id {id} outside catalogue of {NUM_GRASPS}"),
    }
}

fn lerp_pose<S: Real>(fam: &Family, lambda: f64) -> Vec<S> {
    let mut pose = Vec::with_capacity(POSE_DIM);
    for f in 0..NUM_FINGERS {
        let l = if fam.active[f] { lambda } else { 0.0 };
        for j in 0..4 {
            let v = fam.open[f][j] + (fam.closed[f][j] - fam.open[f][j]) * l;
            pose.push(S::of(v));
        }
    }
    pose
}

/// Deepest penetration (meters, >= 0) of hand sample points into the object.
/// Samples vertices, face centroids, and edge midpoints: spacing under 1 cm,
/// so a curved surface cannot dip between samples by more than ~0.3 mm.
fn penetration<S: Real>(hand: &HandMesh<S>, spec: &ObjectSpec<S>) -> S {
    let mut worst = S::zero();
    let mut probe = |p: Vec3<S>| {
        let d = spec.signed_distance(p);
        if d < -worst {
            worst = -d;
        }
    };
    for &v in &hand.vertices {
        probe(v);
    }
    let half = S::of(0.5);
    for (i, f) in hand.faces.iter().enumerate() {
        probe(hand.face_centroid(i));
        let [a, b, c] = f.map(|k| hand.vertices[k as usize]);
        probe((a + b) * half);
        probe((b + c) * half);
        probe((c + a) * half);
    }
    worst
}

/// Number of fingertip segments with a sample point within the contact
/// threshold of the object surface.
pub fn contact_count<S: Real>(hand: &HandMesh<S>, object: &TriMesh<S>) -> usize {
    let threshold = S::of(FINGERTIP_CONTACT);
    HandMesh::<S>::fingertip_segments()
        .iter()
        .filter(|&&seg| {
            let verts = hand.segment_vertices(seg);
            let centroid = verts
                .iter()
                .fold(Vec3::zero(), |a, &b| a + b)
                / S::of(verts.len() as f64);
            verts
                .iter()
                .copied()
                .chain(std::iter::once(centroid))
                .any(|p| object.distance_to_point(p) <= threshold)
        })
        .count()
}

/// Rigid transform placing the hand so its palm faces the object along the
/// approach direction. Fingers run across the approach by default; with
/// `finger_forward` they reach past the object so curling hooks over it.
fn hand_placement<S: Real>(
    approach: Vec3<f64>,
    roll: f64,
    palm_target: Vec3<f64>,
    finger_forward: bool,
) -> (Mat3<S>, Vec3<S>) {
    let z = -approach; // palm front (-z in hand frame) faces the object
    let horizontal = vec3(approach.x, approach.y, 0.0);
    let mut y = if finger_forward && horizontal.norm() > 1e-6 {
        let h = horizontal.normalized();
        h - z * h.dot(z)
    } else {
        vec3(0.0, 0.0, 1.0).cross(z)
    };
    if y.norm() < 1e-6 {
        y = vec3(1.0, 0.0, 0.0);
    }
    y = y.normalized();
    let rolled = rotate_about(y, z, roll);
    let y = rolled.normalized();
    let x = y.cross(z);
    let r = Mat3::from_rows(
        [x.x, y.x, z.x],
        [x.y, y.y, z.y],
        [x.z, y.z, z.z],
    );
    // Palm center sits at (0, 0.048, 0) in the hand frame.
    let origin = palm_target - r.mul_vec(vec3(0.0, 0.048, 0.0));
    let rs = Mat3::from_rows(
        r.rows[0].map(S::of),
        r.rows[1].map(S::of),
        r.rows[2].map(S::of),
    );
    (rs, Vec3::of(origin.x, origin.y, origin.z))
}

fn rotate_about(v: Vec3<f64>, axis: Vec3<f64>, angle: f64) -> Vec3<f64> {
    let (s, c) = angle.sin_cos();
    v * c + axis.cross(v) * s + axis * (axis.dot(v) * (1.0 - c))
}

/// Poses the hand around the object for the given grasp family. Deterministic
/// in (object_spec, grasp_id, seed).
pub fn generate_grasp_scene<S: Real>(
    object_spec: &ObjectSpec<S>,
    grasp_id: usize,
    seed: u64,
) -> Result<Scene<S>> {
    if grasp_id >= NUM_GRASPS {
        return Err(Error::GraspInfeasible {
            reason: format!("grasp id {grasp_id} outside catalogue of {NUM_GRASPS}"),
        });
    }
    let fam = family(grasp_id);
    let object = object_spec.mesh();

    // Feasibility gate: the object must fit the family's aperture.
    let bounds = object
        .aabb()
        .ok_or(Error::EmptyMesh)?;
    let extent = bounds.extent();
    let min_width = extent.x.min(extent.y).min(extent.z).f64();
    if min_width > fam.max_width {
        return Err(Error::GraspInfeasible {
            reason: format!(
                "{} grasp aperture {:.3} m cannot span object width {:.3} m",
                GRASP_NAMES[grasp_id], fam.max_width, min_width
            ),
        });
    }

    let mut rng = stream(seed, StreamTag::Grasp, grasp_id as u64);
    let az = fam.azimuth + 0.10 * (2.0 * rng.gen::<f64>() - 1.0);
    let el = fam.elevation + 0.08 * (2.0 * rng.gen::<f64>() - 1.0);
    let roll = 0.15 * (2.0 * rng.gen::<f64>() - 1.0);
    let hand_seed = rng.gen::<u64>();
    // Approach direction from the hand toward the object.
    let approach = vec3(el.cos() * az.cos(), el.cos() * az.sin(), -el.sin()).normalized();

    let center = object_spec.translation.map(|v| v.f64());
    let support = object_spec
        .support(&object, Vec3::of(-approach.x, -approach.y, -approach.z))
        .f64();

    let mut standoff = fam.standoff;
    for _attempt in 0..8 {
        let palm_target = center - approach * (support + standoff);
        let (r, t) = hand_placement::<S>(approach, roll, palm_target, fam.finger_forward);

        // Close until just before tolerance-violating penetration.
        let mut best: Option<HandMesh<S>> = None;
        for step in 0..=60 {
            let lambda = step as f64 / 60.0;
            let local = generate_hand::<S>(&lerp_pose(&fam, lambda), hand_seed)?;
            let posed = local.transformed(&r, t);
            if penetration(&posed, object_spec).f64() > CONTACT_TOLERANCE {
                break;
            }
            best = Some(posed);
        }
        if let Some(hand) = best {
            if contact_count(&hand, &object) >= MIN_CONTACTS {
                return Ok(Scene {
                    hand,
                    object,
                    object_spec: object_spec.clone(),
                    grasp_id,
                    background: default_background(),
                });
            }
        }
        standoff -= 0.004;
        if standoff < 0.0 {
            break;
        }
    }
    Err(Error::GraspInfeasible {
        reason: format!(
            "{} grasp found fewer than {MIN_CONTACTS} fingertip contacts",
            GRASP_NAMES[grasp_id]
        ),
    })
}
