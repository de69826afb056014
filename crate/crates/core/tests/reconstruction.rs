//! Surface extraction: grid sampling against direct field evaluation,
//! analytic iso-surfaces with known geometry, watertightness, semantic
//! splitting, and the small-component filter.

use std::collections::HashMap;
use std::path::PathBuf;

use rand::Rng;

use graspfield::geometry::Camera;
use graspfield::image_encoder::{FeatureMap, ImageEncoder, ImageEncoderConfig};
use graspfield::interaction_encoder::{MultiScaleVolumes, SparseGrid};
use graspfield::math::{vec3, Aabb, Vec3};
use graspfield::mesh::TriMesh;
use graspfield::nn::Parameterized;
use graspfield::raster::{Label, RgbImage};
use graspfield::reconstruction::{
    extract_grid, marching_cubes, remove_small_components, split_semantic, DensityGrid,
    LabeledMesh, SemanticTag, DEFAULT_DENSITY_VOXEL, DEFAULT_ISO,
};
use graspfield::rng::{stream, StreamTag};
use graspfield::semantic_field::{eval_field, FieldHead, FieldHeadConfig};

/// A small trained-shape fixture: random CNN features over a random image,
/// empty interaction volumes, and a randomly initialized head.
fn field_fixture() -> (
    FieldHead<f64>,
    MultiScaleVolumes<f64>,
    FeatureMap<f64>,
    Camera<f64>,
) {
    let mut rng = stream(11, StreamTag::Generic, 0);
    let mut image = RgbImage::new(16, 16);
    for py in 0..16 {
        for px in 0..16 {
            image.set(
                px,
                py,
                [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ],
            );
        }
    }
    let encoder = ImageEncoder::<f64>::init(
        ImageEncoderConfig {
            hidden: [2, 3, 3],
            channels: 4,
        },
        &mut stream(11, StreamTag::WeightInit, 0),
    );
    let fmap = encoder.encode(&image).unwrap();

    let origin = vec3(-0.06, -0.06, -0.06);
    let volumes = MultiScaleVolumes {
        scales: [
            SparseGrid::new_empty(origin, 0.012, [10, 10, 10], 2),
            SparseGrid::new_empty(origin, 0.024, [5, 5, 5], 2),
            SparseGrid::new_empty(origin, 0.048, [3, 3, 3], 2),
        ],
    };

    let head = FieldHead::init(
        4,
        volumes.interaction_dim(),
        FieldHeadConfig {
            hidden: 8,
            color_hidden: 4,
            use_image_feature: true,
            use_interaction: true,
        },
        &mut stream(11, StreamTag::WeightInit, 2),
    );

    let camera = Camera::look_at(
        vec3(0.0, 0.0, -0.4),
        vec3(0.0, 0.0, 0.0),
        vec3(0.0, 1.0, 0.0),
        30.0,
        30.0,
        8.0,
        8.0,
        16,
        16,
    );
    (head, volumes, fmap, camera)
}

fn argmax3(v: &[f64; 3]) -> u8 {
    let mut best = 0;
    for i in 1..3 {
        if v[i] > v[best] {
            best = i;
        }
    }
    best as u8
}

fn signed_volume(mesh: &TriMesh<f64>) -> f64 {
    let mut six_v = 0.0;
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
        six_v += a.dot(b.cross(c));
    }
    six_v / 6.0
}

/// Every directed triangle edge must appear exactly once in each direction;
/// this is closedness plus consistent winding in one check.
fn assert_watertight(mesh: &TriMesh<f64>) {
    let mut count: HashMap<(u32, u32), usize> = HashMap::new();
    for f in &mesh.faces {
        for k in 0..3 {
            let e = (f[k], f[(k + 1) % 3]);
            assert_ne!(e.0, e.1, "degenerate edge in face {f:?}");
            *count.entry(e).or_insert(0) += 1;
        }
    }
    for (&(a, b), &n) in &count {
        assert_eq!(n, 1, "directed edge ({a},{b}) used {n} times");
        assert_eq!(
            count.get(&(b, a)),
            Some(&1),
            "edge ({a},{b}) has no opposite"
        );
    }
    assert!(mesh.is_closed());
}

fn assert_positive_areas(mesh: &TriMesh<f64>) {
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
        assert!(
            (b - a).cross(c - a).norm() > 0.0,
            "zero-area triangle {f:?}"
        );
    }
}

#[test]
fn grid_resolution_rounds_up_to_cover_the_bounds() {
    let (head, volumes, fmap, camera) = field_fixture();
    let voxel = 0.004;
    // Extents at an exact multiple, a half step, and a fraction of a voxel.
    let min = vec3(-0.02, -0.01, -0.015);
    let bounds = Aabb::new(
        min,
        min + vec3(voxel * 8.0, voxel * 4.5, voxel * 0.25),
    );
    let grid = extract_grid(&head, &volumes, &fmap, &camera, &bounds, voxel);
    assert_eq!(grid.dims, [8, 5, 1]);
    assert_eq!(grid.len(), 40);
    assert_eq!(grid.sigma.len(), 40);
    assert_eq!(grid.labels.len(), 40);
    assert_eq!(grid.voxel_size, voxel);
    assert!(grid.sigma.iter().all(|&s| s >= 0.0), "sigma must stay nonnegative");
    assert!(grid.labels.iter().all(|&l| l <= 2), "labels must stay in 0..=2");
    // First voxel center sits half a voxel inside the box.
    let c = grid.center(0, 0, 0);
    assert!((c.x - (min.x + 0.002)).abs() < 1e-12);
}

#[test]
fn zero_weight_head_reads_as_empty_space() {
    let (mut head, volumes, fmap, camera) = field_fixture();
    head.visit_params("", &mut |p| p.value.data.fill(0.0));
    let bounds = Aabb::new(vec3(-0.02, -0.02, -0.02), vec3(0.02, 0.02, 0.02));
    let grid = extract_grid(
        &head,
        &volumes,
        &fmap,
        &camera,
        &bounds,
        DEFAULT_DENSITY_VOXEL,
    );
    assert_eq!(grid.dims, [20, 20, 20]);
    // All-zero weights leave the pre-activation at the shift, so sigma is
    // softplus(-1) everywhere and occupancy at 2 mm is far below the level.
    let expect = (1.0f64 + (-1.0f64).exp()).ln();
    for i in 0..grid.len() {
        assert!((grid.sigma[i] - expect).abs() < 1e-12);
        assert!(grid.occupancy(i) < 1e-3);
        assert_eq!(grid.labels[i], 0, "tied logits argmax to the first class");
    }
    match marching_cubes(&grid, DEFAULT_ISO) {
        Err(graspfield::error::Error::EmptyMesh) => {}
        other => panic!("expected EmptyMesh, got {other:?}"),
    }
}

#[test]
fn extracted_samples_match_direct_field_evaluation() {
    let (head, volumes, fmap, camera) = field_fixture();
    let voxel = 0.007;
    let bounds = Aabb::new(vec3(-0.03, -0.03, -0.03), vec3(0.03, 0.03, 0.03));
    let grid = extract_grid(&head, &volumes, &fmap, &camera, &bounds, voxel);
    assert_eq!(grid.dims, [9, 9, 9]);

    let mut img_feat = vec![0.0; 4];
    for (ix, iy, iz) in [(0, 0, 0), (4, 4, 4), (8, 1, 6), (2, 7, 3), (5, 5, 0)] {
        let p = grid.center(ix, iy, iz);
        match camera.project_any(p) {
            Ok((u, v)) => fmap.sample_into(u, v, &mut img_feat),
            Err(_) => img_feat.fill(0.0),
        }
        // Empty volumes answer zero interaction features everywhere.
        let interaction = vec![0.0; volumes.interaction_dim()];
        let xn = volumes.scales[0].normalize(p);
        let sample = eval_field(
            &head,
            xn,
            vec3(0.0, 0.0, 1.0),
            Some(&img_feat),
            Some(&interaction),
        )
        .unwrap();
        let flat = grid.flat(ix, iy, iz);
        assert_eq!(
            grid.sigma[flat].to_bits(),
            sample.sigma.to_bits(),
            "sigma mismatch at voxel ({ix},{iy},{iz})"
        );
        assert_eq!(grid.labels[flat], argmax3(&sample.label_logits));
    }
}

#[test]
fn analytic_injection_evaluates_exactly_at_voxel_centers() {
    let origin = vec3(-0.05, -0.04, -0.03);
    let voxel = 0.01;
    let f = |p: Vec3<f64>| (p.x.abs() * 100.0 + p.y * p.y, u8::from(p.z > 0.0));
    let grid = DensityGrid::from_fn(origin, voxel, [7, 6, 5], f);
    assert_eq!(grid.len(), 7 * 6 * 5);
    for iz in 0..5 {
        for iy in 0..6 {
            for ix in 0..7 {
                let p = grid.center(ix, iy, iz);
                let (s, l) = f(p);
                let flat = grid.flat(ix, iy, iz);
                assert_eq!(grid.sigma[flat].to_bits(), s.to_bits());
                assert_eq!(grid.labels[flat], l);
            }
        }
    }
}

#[test]
fn uniform_zero_density_has_no_surface() {
    let grid = DensityGrid::from_fn(vec3(0.0, 0.0, 0.0), 0.002, [8, 8, 8], |_| (0.0, 0));
    match marching_cubes(&grid, DEFAULT_ISO) {
        Err(graspfield::error::Error::EmptyMesh) => {}
        other => panic!("expected EmptyMesh, got {other:?}"),
    }
}

#[test]
fn sphere_surface_stays_within_one_voxel_of_the_true_radius() {
    let r = 0.05;
    let voxel = 0.002;
    let grid = DensityGrid::from_fn(Vec3::splat(-0.07), voxel, [70, 70, 70], |p| {
        if p.norm() < r {
            (3000.0, Label::Object as u8)
        } else {
            (0.0, 0)
        }
    });
    let out = marching_cubes(&grid, DEFAULT_ISO).unwrap();
    assert_eq!(out.tag, SemanticTag::Whole);
    assert_eq!(out.vertex_anchor.len(), out.mesh.vertices.len());
    assert!(out.mesh.faces.len() > 1000);

    let worst = out
        .mesh
        .vertices
        .iter()
        .map(|v| (v.norm() - r).abs())
        .fold(0.0f64, f64::max);
    assert!(worst < voxel, "max radial error {worst} exceeds one voxel");

    // Every anchor names an interior voxel of the sphere.
    for (&anchor, _) in out.vertex_anchor.iter().zip(&out.mesh.vertices) {
        assert!(grid.occupancy(anchor) > DEFAULT_ISO);
    }

    assert_watertight(&out.mesh);
    assert_positive_areas(&out.mesh);

    let vol = signed_volume(&out.mesh).abs();
    let truth = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
    assert!(
        (vol - truth).abs() / truth < 0.15,
        "enclosed volume {vol} vs analytic {truth}"
    );
}

#[test]
fn lone_voxel_produces_a_small_closed_mesh() {
    let voxel = 0.01;
    let grid = DensityGrid::from_fn(vec3(0.0, 0.0, 0.0), voxel, [5, 5, 5], |p| {
        let c = vec3(0.025, 0.025, 0.025);
        if (p - c).norm() < 1e-9 {
            (1000.0, Label::Hand as u8)
        } else {
            (0.0, 0)
        }
    });
    assert_eq!(grid.occupied_count(DEFAULT_ISO, None), 1);
    let out = marching_cubes(&grid, DEFAULT_ISO).unwrap();
    // One interior sample gives one crossing on each of its six grid edges
    // and one triangle per touching cell.
    assert_eq!(out.mesh.vertices.len(), 6);
    assert_eq!(out.mesh.faces.len(), 8);
    assert_watertight(&out.mesh);
    assert_positive_areas(&out.mesh);

    let center = vec3(0.025, 0.025, 0.025);
    let center_flat = grid.flat(2, 2, 2);
    for (v, &a) in out.mesh.vertices.iter().zip(&out.vertex_anchor) {
        assert!((*v - center).norm() <= voxel * 0.75);
        assert_eq!(a, center_flat);
    }
}

#[test]
fn random_interiors_mesh_watertight_and_consistently_oriented() {
    let mut nonempty = 0;
    for seed in 0..24u64 {
        let mut rng = stream(seed, StreamTag::Generic, 1);
        let dims = [6, 6, 6];
        let mut sigma = Vec::new();
        for iz in 0..dims[2] {
            for iy in 0..dims[1] {
                for ix in 0..dims[0] {
                    let interior = (1..5).contains(&ix) && (1..5).contains(&iy) && (1..5).contains(&iz);
                    // Uniform draws straddle the level, hitting many cell
                    // masks including both ambiguous diagonal cases.
                    sigma.push(if interior { rng.gen_range(0.0..140.0) } else { 0.0 });
                }
            }
        }
        let mut it = sigma.into_iter();
        let grid = DensityGrid::from_fn(vec3(0.0, 0.0, 0.0), 0.01, dims, |_| {
            (it.next().unwrap(), 0)
        });
        match marching_cubes(&grid, DEFAULT_ISO) {
            Ok(out) => {
                nonempty += 1;
                assert_watertight(&out.mesh);
                assert_positive_areas(&out.mesh);
            }
            Err(graspfield::error::Error::EmptyMesh) => {}
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }
    assert!(nonempty >= 12, "only {nonempty} of 24 random fields produced a mesh");
}

#[test]
fn raising_the_iso_level_never_grows_the_enclosed_volume() {
    let grid = DensityGrid::from_fn(Vec3::splat(-0.06), 0.002, [60, 60, 60], |p: Vec3<f64>| {
        (2000.0 * (1.0 - p.norm() / 0.05).max(0.0), 0)
    });
    let mut previous = f64::INFINITY;
    for iso in [0.3, 0.6, 0.8] {
        let out = marching_cubes(&grid, iso).unwrap();
        assert_watertight(&out.mesh);
        let vol = signed_volume(&out.mesh).abs();
        assert!(
            vol < previous,
            "volume {vol} at iso {iso} did not shrink (previous {previous})"
        );
        previous = vol;
    }
}

/// Hand blob around (-0.05, 0, 0) and object blob around (0.05, 0, 0), both
/// of radius 0.02, on a 5 mm grid.
fn two_blob_grid(hand_label: u8, object_label: u8) -> DensityGrid<f64> {
    DensityGrid::from_fn(
        vec3(-0.1, -0.05, -0.05),
        0.005,
        [40, 20, 20],
        |p| {
            if (p - vec3(-0.05, 0.0, 0.0)).norm() < 0.02 {
                (2000.0, hand_label)
            } else if (p - vec3(0.05, 0.0, 0.0)).norm() < 0.02 {
                (2000.0, object_label)
            } else {
                (0.0, 0)
            }
        },
    )
}

#[test]
fn split_keeps_disjoint_blobs_apart() {
    let grid = two_blob_grid(Label::Hand as u8, Label::Object as u8);
    let (hand, object) = split_semantic(&grid, DEFAULT_ISO);
    assert_eq!(hand.tag, SemanticTag::Hand);
    assert_eq!(object.tag, SemanticTag::Object);
    assert!(!hand.mesh.faces.is_empty());
    assert!(!object.mesh.faces.is_empty());
    assert_watertight(&hand.mesh);
    assert_watertight(&object.mesh);

    // Anchors carry the label that produced each pass.
    for &a in &hand.vertex_anchor {
        assert_eq!(grid.labels[a], Label::Hand as u8);
    }
    for &a in &object.vertex_anchor {
        assert_eq!(grid.labels[a], Label::Object as u8);
    }

    // Surfaces stay separated by at least the blob gap less one voxel.
    let gap = 0.1 - 2.0 * 0.02;
    let mut min_dist = f64::INFINITY;
    for h in &hand.mesh.vertices {
        for o in &object.mesh.vertices {
            min_dist = min_dist.min((*h - *o).norm());
        }
    }
    assert!(
        min_dist >= gap - 0.005,
        "blob meshes only {min_dist} apart (gap {gap})"
    );
}

#[test]
fn hand_only_grids_give_an_empty_object_mesh() {
    let grid = DensityGrid::from_fn(Vec3::splat(-0.04), 0.004, [20, 20, 20], |p| {
        if p.norm() < 0.02 {
            (2000.0, Label::Hand as u8)
        } else {
            (0.0, 0)
        }
    });
    let (hand, object) = split_semantic(&grid, DEFAULT_ISO);
    assert!(!hand.mesh.faces.is_empty());
    assert!(object.mesh.faces.is_empty());
    assert!(object.mesh.vertices.is_empty());
    assert!(object.vertex_anchor.is_empty());
    assert_eq!(object.tag, SemanticTag::Object);
}

#[test]
fn relabeling_swaps_the_split_outputs() {
    let grid = two_blob_grid(Label::Hand as u8, Label::Object as u8);
    let swapped = two_blob_grid(Label::Object as u8, Label::Hand as u8);
    let (hand, object) = split_semantic(&grid, DEFAULT_ISO);
    let (hand2, object2) = split_semantic(&swapped, DEFAULT_ISO);

    let bits = |m: &TriMesh<f64>| {
        (
            m.vertices
                .iter()
                .map(|v| [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()])
                .collect::<Vec<_>>(),
            m.faces.clone(),
        )
    };
    assert_eq!(bits(&hand.mesh), bits(&object2.mesh));
    assert_eq!(bits(&object.mesh), bits(&hand2.mesh));
    assert_eq!(hand.vertex_anchor, object2.vertex_anchor);
    assert_eq!(object.vertex_anchor, hand2.vertex_anchor);
}

/// Axis-aligned box blob helper: occupied iff the voxel index lies in the
/// half-open ranges.
fn box_blob(
    dims: [usize; 3],
    voxel: f64,
    boxes: &[([usize; 3], [usize; 3])],
) -> DensityGrid<f64> {
    let boxes = boxes.to_vec();
    let mut idx = 0usize;
    DensityGrid::from_fn(vec3(0.0, 0.0, 0.0), voxel, dims, move |_| {
        let ix = idx % dims[0];
        let iy = idx / dims[0] % dims[1];
        let iz = idx / (dims[0] * dims[1]);
        idx += 1;
        let inside = boxes
            .iter()
            .any(|(lo, hi)| {
                (lo[0]..hi[0]).contains(&ix)
                    && (lo[1]..hi[1]).contains(&iy)
                    && (lo[2]..hi[2]).contains(&iz)
            });
        if inside {
            (2000.0, Label::Object as u8)
        } else {
            (0.0, 0)
        }
    })
}

#[test]
fn floaters_below_ten_percent_support_are_removed() {
    // A 10x10x10 main blob and a detached 5x5x2 floater: 1050 input voxels,
    // so survival takes at least 105 supporting voxels.
    let grid = box_blob(
        [24, 14, 14],
        0.005,
        &[([1, 1, 1], [11, 11, 11]), ([16, 1, 1], [21, 6, 3])],
    );
    assert_eq!(grid.occupied_count(DEFAULT_ISO, None), 1050);
    let out = marching_cubes(&grid, DEFAULT_ISO).unwrap();
    assert_eq!(out.mesh.connected_components().len(), 2);

    let kept = remove_small_components(&out, 1050);
    assert_eq!(kept.mesh.connected_components().len(), 1);
    assert!(kept.mesh.faces.len() < out.mesh.faces.len());
    assert_eq!(kept.tag, out.tag);
    assert_eq!(kept.vertex_anchor.len(), kept.mesh.vertices.len());
    // Only the main blob remains: nothing past its right face.
    let max_x = kept
        .mesh
        .vertices
        .iter()
        .map(|v| v.x)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(max_x < 12.0 * 0.005);
    assert_watertight(&kept.mesh);
}

#[test]
fn support_exactly_at_ten_percent_is_kept() {
    // An 18-voxel blob supports all 18 voxels (every voxel touches the
    // outside), so with input count 180 it sits exactly at the threshold.
    let grid = box_blob([7, 7, 6], 0.005, &[([2, 2, 2], [5, 5, 4])]);
    assert_eq!(grid.occupied_count(DEFAULT_ISO, None), 18);
    let out = marching_cubes(&grid, DEFAULT_ISO).unwrap();

    let kept = remove_small_components(&out, 180);
    assert_eq!(kept.mesh.faces.len(), out.mesh.faces.len());

    let removed = remove_small_components(&out, 181);
    assert!(removed.mesh.faces.is_empty());
    assert!(removed.mesh.vertices.is_empty());
    assert!(removed.vertex_anchor.is_empty());
}

#[test]
fn single_component_meshes_pass_through_unchanged() {
    let grid = box_blob([8, 8, 8], 0.005, &[([2, 2, 2], [6, 6, 6])]);
    let out = marching_cubes(&grid, DEFAULT_ISO).unwrap();
    let kept = remove_small_components(&out, grid.occupied_count(DEFAULT_ISO, None));
    assert_eq!(kept.mesh.faces, out.mesh.faces);
    assert_eq!(kept.vertex_anchor, out.vertex_anchor);
    let same = kept
        .mesh
        .vertices
        .iter()
        .zip(&out.mesh.vertices)
        .all(|(a, b)| a.x.to_bits() == b.x.to_bits() && a.y.to_bits() == b.y.to_bits() && a.z.to_bits() == b.z.to_bits());
    assert!(same);
}

#[test]
fn meshes_round_trip_through_obj_files() {
    let grid = two_blob_grid(Label::Hand as u8, Label::Object as u8);
    let (hand, _) = split_semantic(&grid, DEFAULT_ISO);

    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!(
        "roundtrip_{}.obj",
        hand.tag.name()
    ));
    hand.mesh.write_obj(&path).unwrap();
    let back = TriMesh::<f64>::read_obj(&path).unwrap();
    assert_eq!(back.faces, hand.mesh.faces);
    assert_eq!(back.vertices.len(), hand.mesh.vertices.len());
    for (a, b) in back.vertices.iter().zip(&hand.mesh.vertices) {
        assert_eq!(a.x.to_bits(), b.x.to_bits());
        assert_eq!(a.y.to_bits(), b.y.to_bits());
        assert_eq!(a.z.to_bits(), b.z.to_bits());
    }
}

/// Narrow the generic surface once so the suite exercises the f32 path too.
#[test]
fn extraction_works_at_single_precision() {
    let r = 0.03f32;
    let grid = DensityGrid::from_fn(Vec3::splat(-0.05f32), 0.002f32, [50, 50, 50], |p| {
        if p.norm() < r {
            (3000.0f32, Label::Object as u8)
        } else {
            (0.0f32, 0)
        }
    });
    let out = marching_cubes(&grid, 0.5f32).unwrap();
    assert!(out.mesh.is_closed());
    let worst = out
        .mesh
        .vertices
        .iter()
        .map(|v| (v.norm() - r).abs())
        .fold(0.0f32, f32::max);
    assert!(worst < 0.002, "f32 radial error {worst}");
    let _: &LabeledMesh<f32> = &out;
}
