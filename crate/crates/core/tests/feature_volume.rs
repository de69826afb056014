//! Feature volume oracles: bounds arithmetic, code immutability, branch
//! precedence against an independently recomputed partition, and the two
//! training augmentations.

use graspfield::error::Error;
use graspfield::feature_volume::{
    assemble_volume, compute_bounds, dims_for, feature_dim_for, perturb_object_entries,
    random_rotation_angles, rotate_volume, CodeBook, EntrySource, SparseFeatureVolume,
    CODE_DIM, ROTATION_CAP,
};
use graspfield::geometry::{Camera, PositionalEncoding};
use graspfield::image_encoder::FeatureMap;
use graspfield::math::{vec3, Aabb, Mat3, Vec3};
use graspfield::raster::{Label, LabelMask};
use graspfield::rng::{gaussian, stream, StreamTag};
use graspfield::scene::hand::HandMesh;
use graspfield::scene::{generate_hand, neutral_pose};

fn point_hand(p: Vec3<f64>) -> HandMesh<f64> {
    // Three vertices averaging exactly to p: a degenerate one-face "hand".
    let a = vec3(1e-4, 0.0, 0.0);
    let b = vec3(0.0, 1e-4, 0.0);
    HandMesh {
        vertices: vec![p + a, p + b, p - a - b],
        faces: vec![[0, 1, 2]],
        pose_params: vec![],
        seed: 0,
    }
}

#[test]
fn bounds_of_a_point_hand_form_a_margin_cube() {
    let hand = point_hand(vec3(0.3, -0.2, 0.1));
    let b = compute_bounds(&hand, 0.1);
    let e = b.extent();
    assert!((e.x - 0.2).abs() < 1e-9);
    assert!((e.y - 0.2).abs() < 1e-9);
    assert!((e.z - 0.2).abs() < 1e-9);

    let tight = compute_bounds(&hand, 0.0);
    assert!(tight.extent().norm() < 1e-3, "zero margin must be tight");
}

#[test]
fn default_margin_dims_match_extent_arithmetic() {
    let hand = generate_hand::<f64>(&neutral_pose(), 1).unwrap();
    let bounds = compute_bounds(&hand, 0.25);
    let dims = dims_for(&bounds, 0.005);

    let e = bounds.extent();
    for (axis, extent) in [e.x, e.y, e.z].into_iter().enumerate() {
        assert_eq!(dims[axis], (extent / 0.005).ceil() as usize);
        assert!(
            (100..=170).contains(&dims[axis]),
            "dim {axis} = {} out of expected band",
            dims[axis]
        );
    }
    for c in hand.face_centroids() {
        assert!(bounds.contains(c), "centroid outside bounds");
    }
}

#[test]
fn codebook_is_deterministic_and_unit_gaussian() {
    let a = CodeBook::<f32>::new(42);
    let b = CodeBook::<f32>::new(42);
    for i in 0..192 {
        assert_eq!(a.face_code(i), b.face_code(i));
    }
    assert_eq!(a.object_code(), b.object_code());

    let c = CodeBook::<f32>::new(43);
    assert_ne!(a.face_code(0), c.face_code(0));
    assert_ne!(a.face_code(0), a.face_code(1));

    let all: Vec<f64> = (0..192)
        .flat_map(|i| a.face_code(i).iter().map(|&v| v as f64))
        .collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    assert!(mean.abs() < 0.06, "code mean {mean}");
    assert!((0.85..1.15).contains(&var), "code variance {var}");
}

// ---------------------------------------------------------------------------
// Controlled assembly scenario: identity camera, hand-written mask and map.

struct Scenario {
    hand: HandMesh<f64>,
    mask: LabelMask,
    camera: Camera<f64>,
    fmap: FeatureMap<f64>,
    codes: CodeBook<f64>,
    bounds: Aabb<f64>,
}

fn scenario() -> Scenario {
    let camera = Camera::new(
        100.0,
        100.0,
        32.0,
        32.0,
        Mat3::identity(),
        Vec3::zero(),
        64,
        64,
    );
    // Face 0 centroid projects to pixel (32, 32); face 1 to (36, 32).
    let mut hand = point_hand(vec3(0.0, 0.0, 0.5));
    let other = point_hand(vec3(0.02, 0.0, 0.5));
    hand.vertices.extend(other.vertices);
    hand.faces.push([3, 4, 5]);

    let mut mask = LabelMask::new(64, 64);
    // Object block covering both face projections (tests precedence) plus
    // margin to the right; a hand-labeled strip that must NOT fill voxels.
    for y in 28..38 {
        for x in 28..44 {
            mask.set(x, y, Label::Object as u8);
        }
        for x in 10..16 {
            mask.set(x, y, Label::Hand as u8);
        }
    }

    let fmap = FeatureMap {
        height: 16,
        width: 16,
        channels: 4,
        stride: 4,
        values: (0..16 * 16)
            .flat_map(|i| {
                let (ix, iy) = (i % 16, i / 16);
                [ix as f64, iy as f64, (ix + iy) as f64, 1.0]
            })
            .collect(),
    };

    Scenario {
        hand,
        mask,
        camera,
        fmap,
        codes: CodeBook::new(7),
        bounds: Aabb::new(vec3(-0.1, -0.1, 0.4), vec3(0.1, 0.1, 0.6)),
    }
}

fn assemble(s: &Scenario) -> SparseFeatureVolume<f64> {
    assemble_volume(
        &s.hand,
        &s.mask,
        &s.camera,
        &s.fmap,
        &s.codes,
        &s.bounds,
        0.005,
    )
    .unwrap()
}

#[test]
fn assembly_partitions_voxels_by_branch_precedence() {
    let s = scenario();
    let vol = assemble(&s);
    assert_eq!(vol.dims, [40, 40, 40]);
    assert_eq!(vol.feature_dim, feature_dim_for(4));
    assert_eq!(vol.image_dim, 4);

    // Independent partition oracle over every voxel.
    let centroids = s.hand.face_centroids();
    let mut expected_hand = std::collections::BTreeMap::new();
    for (face, c) in centroids.iter().enumerate() {
        let coord = [
            ((c.x + 0.1) / 0.005).floor() as u16,
            ((c.y + 0.1) / 0.005).floor() as u16,
            ((c.z - 0.4) / 0.005).floor() as u16,
        ];
        expected_hand.entry(coord).or_insert(face);
    }
    let mut expected_total = expected_hand.len();
    for z in 0..40u16 {
        for y in 0..40u16 {
            for x in 0..40u16 {
                let coord = [x, y, z];
                let center = vec3(
                    -0.1 + 0.005 * (x as f64 + 0.5),
                    -0.1 + 0.005 * (y as f64 + 0.5),
                    0.4 + 0.005 * (z as f64 + 0.5),
                );
                let u = 100.0 * center.x / center.z + 32.0;
                let v = 100.0 * center.y / center.z + 32.0;
                let object_pixel = u >= 0.0
                    && v >= 0.0
                    && (u.floor() as usize) < 64
                    && (v.floor() as usize) < 64
                    && s.mask.get(u.floor() as usize, v.floor() as usize)
                        == Label::Object as u8;

                let row = vol.row_at(coord);
                match (expected_hand.get(&coord), object_pixel) {
                    (Some(&face), _) => {
                        let row = row.expect("hand voxel missing");
                        assert_eq!(vol.source(row), EntrySource::HandFace(face as u32));
                    }
                    (None, true) => {
                        let row = row.expect("object voxel missing");
                        assert_eq!(vol.source(row), EntrySource::Object);
                        expected_total += 1;
                    }
                    (None, false) => assert!(row.is_none(), "spurious entry at {coord:?}"),
                }
            }
        }
    }
    assert_eq!(vol.len(), expected_total);
    assert!(expected_total > expected_hand.len(), "no object entries");

    // Face 0's voxel lies inside the object mask yet must be hand-branch,
    // with the face code and the image feature sampled at its projection.
    let c0 = centroids[0];
    let coord0 = vol.voxel_of(c0).unwrap();
    let row0 = vol.row_at(coord0).unwrap();
    assert_eq!(vol.source(row0), EntrySource::HandFace(0));
    let f = vol.feature(row0);
    assert_eq!(&f[vol.feature_dim - CODE_DIM..], s.codes.face_code(0));
    let mut h = vec![0.0; 4];
    s.fmap.sample_into(32.0, 32.0, &mut h);
    assert_eq!(&f[..4], &h[..]);

    // The positional slice is the encoding of the normalized position.
    let pe = PositionalEncoding::for_coordinates();
    let mut expect_pe = Vec::new();
    pe.encode_into(&vol.normalize(c0).to_array(), &mut expect_pe);
    assert_eq!(&f[4..vol.feature_dim - CODE_DIM], &expect_pe[..]);

    // An object row carries the shared code and sits at its voxel center.
    let obj_row = (0..vol.len())
        .find(|&r| vol.source(r) == EntrySource::Object)
        .unwrap();
    let fo = vol.feature(obj_row);
    assert_eq!(&fo[vol.feature_dim - CODE_DIM..], s.codes.object_code());
    let center = vol.center_of(vol.coord(obj_row));
    assert!((vol.position(obj_row) - center).norm() < 1e-12);
}

#[test]
fn empty_inputs_are_rejected() {
    let s = scenario();
    let empty_hand = HandMesh::<f64> {
        vertices: vec![],
        faces: vec![],
        pose_params: vec![],
        seed: 0,
    };
    let blank = LabelMask::new(64, 64);
    match assemble_volume(
        &empty_hand,
        &blank,
        &s.camera,
        &s.fmap,
        &s.codes,
        &s.bounds,
        0.005,
    ) {
        Err(Error::EmptyVolume) => {}
        other => panic!("expected EmptyVolume, got {:?}", other.map(|v| v.len())),
    }
}

#[test]
fn zero_sigma_perturbation_is_identity() {
    let s = scenario();
    let vol = assemble(&s);
    let same = perturb_object_entries(&vol, 0.0, 123);
    assert_eq!(vol.len(), same.len());
    for r in 0..vol.len() {
        assert_eq!(vol.coord(r), same.coord(r));
        assert_eq!(vol.source(r), same.source(r));
        assert_eq!(vol.feature(r), same.feature(r));
    }

    let a = perturb_object_entries(&vol, 0.005, 9);
    let b = perturb_object_entries(&vol, 0.005, 9);
    assert_eq!(a.len(), b.len());
    for r in 0..a.len() {
        assert_eq!(a.coord(r), b.coord(r));
        assert_eq!(a.feature(r), b.feature(r));
    }
    let c = perturb_object_entries(&vol, 0.005, 10);
    let moved = a.len() != c.len()
        || (0..a.len()).any(|r| a.coord(r) != c.coord(r));
    assert!(moved, "different seeds should shuffle object voxels");
}

#[test]
fn perturbation_noise_is_gaussian_and_leaves_hand_alone() {
    let s = scenario();
    let vol = assemble(&s);
    let sigma = 0.005f64;
    let obj_rows: Vec<usize> = (0..vol.len())
        .filter(|&r| vol.source(r) == EntrySource::Object)
        .collect();
    assert!(obj_rows.len() >= 150, "need entries for statistics");

    let mut draws = Vec::new();
    let mut seeds_used = 0u64;
    while draws.len() < 10_000 {
        let seed = 1000 + seeds_used;
        seeds_used += 1;
        let out = perturb_object_entries(&vol, sigma, seed);

        // Replay the published noise stream to get the true displacements.
        let mut rng = stream(seed, StreamTag::Perturb, 0);
        let mut moved_positions = Vec::new();
        for &r in &obj_rows {
            let d = vec3(
                gaussian(&mut rng),
                gaussian(&mut rng),
                gaussian(&mut rng),
            );
            draws.push(d.x);
            draws.push(d.y);
            draws.push(d.z);
            moved_positions.push(vol.position(r) + d * sigma);
        }

        // Hand entries must be untouched, byte for byte.
        for r in 0..vol.len() {
            if let EntrySource::HandFace(face) = vol.source(r) {
                let or = (0..out.len())
                    .find(|&q| out.source(q) == EntrySource::HandFace(face))
                    .expect("hand entry lost");
                assert_eq!(out.coord(or), vol.coord(r));
                assert_eq!(out.feature(or), vol.feature(r));
            }
        }

        // Every surviving object entry's position is original + drawn noise,
        // and its voxel shift is bounded by the noise magnitude.
        for q in 0..out.len() {
            if out.source(q) != EntrySource::Object {
                continue;
            }
            let p = out.position(q);
            let hit = moved_positions
                .iter()
                .position(|&m| (m - p).norm() < 1e-12)
                .expect("object entry at unexplained position");
            let src = vol.coord(obj_rows[hit]);
            let dst = out.coord(q);
            for axis in 0..3 {
                let shift = (src[axis] as i32 - dst[axis] as i32).abs();
                assert!(shift <= 6, "voxel shift {shift} too large for 1-voxel sigma");
            }
        }
    }

    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    assert!(mean.abs() < 0.04, "noise mean {mean}");
    assert!((0.9..1.1).contains(&var), "noise variance {var}");
    let within3 = draws.iter().filter(|d| d.abs() <= 3.0).count() as f64 / n;
    assert!(within3 > 0.995, "only {within3} of draws within 3 sigma");
    assert!(draws.iter().all(|d| d.abs() < 5.5), "outlier beyond 5.5 sigma");
}

#[test]
fn zero_rotation_is_identity_and_full_turn_nearly_so() {
    let s = scenario();
    let vol = assemble(&s);

    let same = rotate_volume(&vol, vec3(0.0, 0.0, 0.0));
    assert_eq!(vol.len(), same.len());
    for r in 0..vol.len() {
        assert_eq!(vol.coord(r), same.coord(r));
        assert_eq!(vol.feature(r), same.feature(r));
    }

    let turn = rotate_volume(&vol, vec3(2.0 * std::f64::consts::PI, 0.0, 0.0));
    assert!(turn.len() as f64 >= 0.95 * vol.len() as f64, "entries lost in a full turn");
    let mut moved = 0;
    for q in 0..turn.len() {
        let c = turn.coord(q);
        // Match by source identity where unique (hand faces).
        if let EntrySource::HandFace(face) = turn.source(q) {
            let r = (0..vol.len())
                .find(|&r| vol.source(r) == EntrySource::HandFace(face))
                .unwrap();
            let orig = vol.coord(r);
            for axis in 0..3 {
                let d = (orig[axis] as i32 - c[axis] as i32).abs();
                assert!(d <= 1, "face {face} drifted {d} voxels over a full turn");
            }
            if orig != c {
                moved += 1;
            }
        }
    }
    assert!(moved <= 1, "full turn should re-rasterize almost everywhere equal");
}

#[test]
fn rotation_moves_points_and_recomputes_their_encodings() {
    let s = scenario();
    let vol = assemble(&s);
    let angles = vec3(0.3, -0.25, 0.2);
    let out = rotate_volume(&vol, angles);
    assert!(!out.is_empty());

    let r = Mat3::rotation_zyx(angles.x, angles.y, angles.z);
    let c = vol.grid_center();
    let pe = PositionalEncoding::for_coordinates();

    let mut object_seen = 0;
    for q in 0..out.len() {
        // Stored coordinate matches the stored position.
        assert_eq!(out.voxel_of(out.position(q)), Some(out.coord(q)));

        // Encoding slice follows the moved position.
        let mut expect = Vec::new();
        pe.encode_into(&out.normalize(out.position(q)).to_array(), &mut expect);
        let f = out.feature(q);
        assert_eq!(&f[out.image_dim..out.feature_dim - CODE_DIM], &expect[..]);

        match out.source(q) {
            EntrySource::HandFace(face) => {
                let orig = (0..vol.len())
                    .find(|&r| vol.source(r) == EntrySource::HandFace(face))
                    .unwrap();
                let expect_p = c + r.mul_vec(vol.position(orig) - c);
                assert!((out.position(q) - expect_p).norm() < 1e-12);
                let of = vol.feature(orig);
                assert_eq!(&f[..out.image_dim], &of[..vol.image_dim], "image slice changed");
                assert_eq!(
                    &f[out.feature_dim - CODE_DIM..],
                    &of[vol.feature_dim - CODE_DIM..],
                    "code slice changed"
                );
            }
            EntrySource::Object => {
                object_seen += 1;
                assert_eq!(&f[out.feature_dim - CODE_DIM..], s.codes.object_code());
            }
        }
    }
    assert!(object_seen > 0);

    // The physical point set is rotated, so some voxel coords must change.
    let changed = (0..out.len().min(vol.len()))
        .any(|i| out.coord(i) != vol.coord(i));
    assert!(changed, "rotation changed nothing");
}

#[test]
fn drawn_rotation_angles_respect_the_cap() {
    for i in 0..100 {
        let a = random_rotation_angles::<f64>(5, i);
        for v in [a.x, a.y, a.z] {
            assert!(v.abs() <= ROTATION_CAP + 1e-12);
        }
    }
    let a = random_rotation_angles::<f64>(5, 3);
    let b = random_rotation_angles::<f64>(5, 3);
    assert_eq!(a.to_array(), b.to_array());
    let c = random_rotation_angles::<f64>(5, 4);
    assert_ne!(a.to_array(), c.to_array());
}
