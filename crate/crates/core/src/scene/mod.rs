//! Synthetic desk-scale scenes: a procedural articulated hand grasping a
//! primitive object, rendered from a ring of calibrated cameras.

pub mod dataset;
pub mod grasp;
pub mod hand;
pub mod object;
pub mod raytrace;

pub use dataset::{camera_ring, make_dataset, scene_centroid, SceneDataset, SceneView};
pub use grasp::{
    contact_count, default_background, generate_grasp_scene, hand_albedo, Scene, GRASP_NAMES,
    NUM_GRASPS,
};
pub use hand::{generate_hand, neutral_pose, HandMesh, NUM_FINGERS, NUM_SEGMENTS, POSE_DIM};
pub use object::{ObjectSpec, PrimitiveKind};
pub use raytrace::{render_meshes, ShadedMesh, ViewRender};
