//! Procedural fixed-topology articulated hand.
//!
//! The hand is a rigid palm block plus five fingers of three box segments
//! each: 16 boxes, 192 faces, constant across all poses and seeds. Face index
//! therefore carries stable anatomical identity (face / 12 is the segment).
//!
//! Hand frame: wrist at the origin, fingers extending +y, back of the hand
//! facing +z (fingers curl toward -z), thumb on the +x side. Units are meters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{vec3, Mat3, Vec3};
use crate::mesh::TriMesh;
use crate::rng::{stream, StreamTag};
use crate::scalar::Real;

pub const NUM_FINGERS: usize = 5;
pub const SEGMENTS_PER_FINGER: usize = 3;
/// Palm + 15 finger segments.
pub const NUM_SEGMENTS: usize = 1 + NUM_FINGERS * SEGMENTS_PER_FINGER;
pub const FACES_PER_SEGMENT: usize = 12;
/// Fixed face count of every generated hand.
pub const NUM_FACES: usize = NUM_SEGMENTS * FACES_PER_SEGMENT;
/// Per finger: (spread, mcp curl, pip curl, dip curl).
pub const POSE_DIM: usize = NUM_FINGERS * 4;

pub const FINGER_NAMES: [&str; NUM_FINGERS] = ["thumb", "index", "middle", "ring", "pinky"];
const JOINT_NAMES: [&str; 4] = ["spread", "mcp", "pip", "dip"];

/// Joint limits in radians, chosen so that the all-max fist stays clear of
/// the palm block (checked by the self-intersection oracle in tests).
pub fn joint_limits(finger: usize, joint: usize) -> (f64, f64) {
    if finger == 0 {
        match joint {
            0 => (-0.50, 0.50),
            1 => (-0.30, 1.20),
            2 => (-0.05, 1.20),
            _ => (-0.05, 1.10),
        }
    } else {
        match joint {
            0 => (-0.35, 0.35),
            1 => (-0.25, 1.45),
            2 => (-0.05, 1.55),
            _ => (-0.05, 1.35),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HandMesh<S> {
    pub vertices: Vec<Vec3<S>>,
    pub faces: Vec<[u32; 3]>,
    pub pose_params: Vec<S>,
    pub seed: u64,
}

impl<S: Real> HandMesh<S> {
    pub fn as_mesh(&self) -> TriMesh<S> {
        TriMesh::new(self.vertices.clone(), self.faces.clone())
    }

    pub fn face_centroid(&self, i: usize) -> Vec3<S> {
        let [a, b, c] = self.faces[i];
        (self.vertices[a as usize] + self.vertices[b as usize] + self.vertices[c as usize])
            / S::of(3.0)
    }

    pub fn face_centroids(&self) -> Vec<Vec3<S>> {
        (0..self.faces.len()).map(|i| self.face_centroid(i)).collect()
    }

    /// Segment owning a face (0 = palm, then finger-major proximal to distal).
    pub fn face_segment(face: usize) -> usize {
        face / FACES_PER_SEGMENT
    }

    /// Segment indices of the five fingertips (distal segments).
    pub fn fingertip_segments() -> [usize; NUM_FINGERS] {
        [3, 6, 9, 12, 15]
    }

    pub fn segment_vertices(&self, segment: usize) -> &[Vec3<S>] {
        &self.vertices[segment * 8..(segment + 1) * 8]
    }

    pub fn transformed(&self, r: &Mat3<S>, t: Vec3<S>) -> HandMesh<S> {
        HandMesh {
            vertices: self.vertices.iter().map(|&v| r.mul_vec(v) + t).collect(),
            faces: self.faces.clone(),
            pose_params: self.pose_params.clone(),
            seed: self.seed,
        }
    }
}

struct FingerShape {
    /// Knuckle position on the palm.
    base: Vec3<f64>,
    /// Base orientation (local +y is the straight-finger direction).
    orient: Mat3<f64>,
    lengths: [f64; 3],
    width: f64,
    thickness: f64,
}

fn finger_shapes(seed: u64) -> (Vec3<f64>, Vec<FingerShape>) {
    let mut rng = stream(seed, StreamTag::HandShape, 0);
    let scale = 1.0 + 0.04 * (2.0 * rng.gen::<f64>() - 1.0);
    let jitter: Vec<f64> = (0..NUM_FINGERS)
        .map(|_| 1.0 + 0.03 * (2.0 * rng.gen::<f64>() - 1.0))
        .collect();

    let palm_half = vec3(0.042, 0.048, 0.012) * scale;
    let palm_top = 2.0 * palm_half.y;

    let mut shapes = Vec::with_capacity(NUM_FINGERS);
    // Thumb: anchored low on the +x palm edge, pointing out and forward,
    // pre-rotated so its curl axis opposes the fingers.
    shapes.push(FingerShape {
        base: vec3(palm_half.x, 0.30 * palm_top, -0.004) * 1.0,
        orient: Mat3::rotation_z(-0.95).mul_mat(&Mat3::rotation_y(-0.65)),
        lengths: [0.042, 0.032, 0.026].map(|l| l * scale * jitter[0]),
        width: 0.020 * scale,
        thickness: 0.017 * scale,
    });
    let bases_x = [0.0315, 0.0105, -0.0105, -0.0315];
    let lengths = [
        [0.040, 0.026, 0.020],
        [0.044, 0.028, 0.022],
        [0.040, 0.026, 0.020],
        [0.032, 0.020, 0.017],
    ];
    for f in 0..4 {
        shapes.push(FingerShape {
            base: vec3(bases_x[f] * scale, palm_top, 0.0),
            orient: Mat3::identity(),
            lengths: lengths[f].map(|l| l * scale * jitter[f + 1]),
            width: 0.015 * scale,
            thickness: 0.014 * scale,
        });
    }
    (palm_half, shapes)
}

fn check_limits<S: Real>(pose: &[S]) -> Result<()> {
    if pose.len() != POSE_DIM {
        return Err(Error::ShapeMismatch {
            expected: format!("{POSE_DIM} pose parameters"),
            got: format!("{}", pose.len()),
        });
    }
    for finger in 0..NUM_FINGERS {
        for joint in 0..4 {
            let v = pose[finger * 4 + joint].f64();
            let (lo, hi) = joint_limits(finger, joint);
            if v < lo || v > hi {
                return Err(Error::JointLimit {
                    joint: format!("{}.{}", FINGER_NAMES[finger], JOINT_NAMES[joint]),
                    value: v,
                    lo,
                    hi,
                });
            }
        }
    }
    Ok(())
}

/// Box segment extending from the local origin along +y, under a rigid
/// transform; vertices in the fixed cuboid order.
fn push_segment<S: Real>(
    out: &mut Vec<Vec3<S>>,
    rot: &Mat3<f64>,
    origin: Vec3<f64>,
    length: f64,
    width: f64,
    thickness: f64,
) {
    let base = TriMesh::<f64>::cuboid(vec3(width * 0.5, length * 0.5, thickness * 0.5));
    for v in base.vertices {
        let p = rot.mul_vec(v + vec3(0.0, length * 0.5, 0.0)) + origin;
        out.push(Vec3::of(p.x, p.y, p.z));
    }
}

/// Builds the articulated hand at the given pose. Deterministic in both
/// arguments; the seed drives small per-hand size variation only.
pub fn generate_hand<S: Real>(pose_params: &[S], seed: u64) -> Result<HandMesh<S>> {
    check_limits(pose_params)?;
    let (palm_half, shapes) = finger_shapes(seed);

    let mut vertices: Vec<Vec3<S>> = Vec::with_capacity(NUM_SEGMENTS * 8);
    let palm_base = TriMesh::<f64>::cuboid(palm_half);
    for v in palm_base.vertices {
        let p = v + vec3(0.0, palm_half.y, 0.0);
        vertices.push(Vec3::of(p.x, p.y, p.z));
    }

    for (finger, shape) in shapes.iter().enumerate() {
        let spread = pose_params[finger * 4].f64();
        let curls = [
            pose_params[finger * 4 + 1].f64(),
            pose_params[finger * 4 + 2].f64(),
            pose_params[finger * 4 + 3].f64(),
        ];
        // Spread abducts about the palm normal; each curl flexes about the
        // local x axis, sending the segment toward the palm side (-z).
        let mut rot = shape.orient.mul_mat(&Mat3::rotation_z(spread));
        let mut origin = shape.base;
        for (seg, &curl) in curls.iter().enumerate() {
            rot = rot.mul_mat(&Mat3::rotation_x(-curl));
            push_segment(
                &mut vertices,
                &rot,
                origin,
                shape.lengths[seg],
                shape.width,
                shape.thickness,
            );
            origin = origin + rot.mul_vec(vec3(0.0, shape.lengths[seg], 0.0));
        }
    }

    let cuboid_faces = TriMesh::<f64>::cuboid(vec3(1.0, 1.0, 1.0)).faces;
    let mut faces = Vec::with_capacity(NUM_FACES);
    for segment in 0..NUM_SEGMENTS {
        let base = (segment * 8) as u32;
        faces.extend(cuboid_faces.iter().map(|f| f.map(|i| i + base)));
    }

    Ok(HandMesh {
        vertices,
        faces,
        pose_params: pose_params.to_vec(),
        seed,
    })
}

/// Flat open hand.
pub fn neutral_pose<S: Real>() -> Vec<S> {
    vec![S::zero(); POSE_DIM]
}
