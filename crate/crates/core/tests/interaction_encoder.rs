//! Sparse CNN oracles: identity kernels, dense-convolution equivalence,
//! finite-difference gradients through encoding and querying, trilinear
//! interpolation rules, and submanifold translation covariance.

use graspfield::error::Error;
use graspfield::interaction_encoder::{
    query_interaction, query_interaction_backward, sparse_conv, InteractionEncoder,
    InteractionEncoderConfig, MultiScaleVolumes, SparseConvLayer, SparseGrid,
};
use graspfield::math::vec3;
use graspfield::nn::Parameterized;
use graspfield::rng::{stream, StreamTag};
use rand::Rng;

fn grid(dims: [usize; 3], channels: usize) -> SparseGrid<f64> {
    SparseGrid::new_empty(vec3(0.0, 0.0, 0.0), 0.01, dims, channels)
}

/// Deterministic filler values, distinct per (row, channel).
fn fill(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, StreamTag::Generic, 0);
    (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
}

fn randomize_layer(layer: &mut SparseConvLayer<f64>, seed: u64) {
    let w = fill(seed, layer.w.data.len());
    layer.w.data.copy_from_slice(&w);
    let b = fill(seed + 1, layer.b.data.len());
    layer.b.data.copy_from_slice(&b);
}

#[test]
fn identity_kernel_passes_values_through() {
    let mut rng = stream(1, StreamTag::WeightInit, 0);
    let c = 5;
    let mut layer = SparseConvLayer::<f64>::init(c, c, 1, 2.0, &mut rng);
    layer.w.data.fill(0.0);
    layer.b.data.fill(0.0);
    // Center offset (0,0,0) is flat index 13; set its block to the identity.
    for i in 0..c {
        layer.w.data[(13 * c + i) * c + i] = 1.0;
    }

    let mut g = grid([9, 9, 9], c);
    g.push([4, 4, 4], &fill(2, c));
    g.push([4, 5, 4], &fill(3, c));
    g.push([0, 0, 0], &fill(4, c));

    let out = sparse_conv(&layer, &g).unwrap();
    assert_eq!(out.len(), g.len());
    for r in 0..g.len() {
        assert_eq!(out.coord(r), g.coord(r));
        assert_eq!(out.value(r), g.value(r));
    }
}

#[test]
fn empty_grids_convolve_to_empty_grids() {
    let mut rng = stream(1, StreamTag::WeightInit, 1);
    let g = grid([8, 8, 8], 3);
    let subm = SparseConvLayer::<f64>::init(3, 4, 1, 2.0, &mut rng);
    assert!(sparse_conv(&subm, &g).unwrap().is_empty());
    let down = SparseConvLayer::<f64>::init(3, 4, 2, 2.0, &mut rng);
    let out = sparse_conv(&down, &g).unwrap();
    assert!(out.is_empty());
    assert_eq!(out.dims, [4, 4, 4]);
    assert!((out.voxel_size - 0.02).abs() < 1e-15);
}

#[test]
fn channel_mismatch_is_rejected() {
    let mut rng = stream(1, StreamTag::WeightInit, 2);
    let layer = SparseConvLayer::<f64>::init(7, 4, 1, 2.0, &mut rng);
    let g = grid([4, 4, 4], 3);
    match sparse_conv(&layer, &g) {
        Err(Error::DimMismatch { .. }) => {}
        other => panic!("expected DimMismatch, got {:?}", other.map(|g| g.len())),
    }
}

/// Dense 3D convolution reference: zero padding, kernel offsets enumerated
/// x-fastest to match the layer's weight layout.
fn dense_conv(
    input: &dyn Fn([usize; 3]) -> Vec<f64>,
    dims: [usize; 3],
    c_in: usize,
    layer: &SparseConvLayer<f64>,
    out_coord: [usize; 3],
) -> Vec<f64> {
    let c_out = layer.out_c;
    let mut acc = layer.b.data.clone();
    for o in 0..27 {
        let d = [(o % 3) as i64 - 1, ((o / 3) % 3) as i64 - 1, (o / 9) as i64 - 1];
        let mut src = [0usize; 3];
        let mut ok = true;
        for axis in 0..3 {
            let v = (layer.stride * out_coord[axis]) as i64 + d[axis];
            if v < 0 || v >= dims[axis] as i64 {
                ok = false;
                break;
            }
            src[axis] = v as usize;
        }
        if !ok {
            continue;
        }
        let x = input(src);
        for ci in 0..c_in {
            for co in 0..c_out {
                acc[co] += layer.w.data[(o * c_in + ci) * c_out + co] * x[ci];
            }
        }
    }
    acc
}

#[test]
fn dense_grid_matches_dense_convolution_reference() {
    let dims = [8, 8, 8];
    let (c_in, c_out) = (5, 4);
    let mut g = grid(dims, c_in);
    let all = fill(10, dims[0] * dims[1] * dims[2] * c_in);
    let flat = |c: [usize; 3]| (c[2] * dims[1] + c[1]) * dims[0] + c[0];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = flat([x, y, z]);
                g.push(
                    [x as u16, y as u16, z as u16],
                    &all[i * c_in..(i + 1) * c_in],
                );
            }
        }
    }
    let input = |c: [usize; 3]| all[flat(c) * c_in..(flat(c) + 1) * c_in].to_vec();

    let mut rng = stream(2, StreamTag::WeightInit, 0);
    let mut subm = SparseConvLayer::<f64>::init(c_in, c_out, 1, 2.0, &mut rng);
    randomize_layer(&mut subm, 20);
    let out = sparse_conv(&subm, &g).unwrap();
    assert_eq!(out.len(), 512);
    for r in 0..out.len() {
        let c = out.coord(r);
        let expect = dense_conv(&input, dims, c_in, &subm, [c[0] as usize, c[1] as usize, c[2] as usize]);
        for (a, e) in out.value(r).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-6, "subm deviates: {a} vs {e}");
        }
    }

    let mut down = SparseConvLayer::<f64>::init(c_in, c_out, 2, 2.0, &mut rng);
    randomize_layer(&mut down, 21);
    let out = sparse_conv(&down, &g).unwrap();
    assert_eq!(out.len(), 64);
    assert_eq!(out.dims, [4, 4, 4]);
    for r in 0..out.len() {
        let c = out.coord(r);
        let expect = dense_conv(&input, dims, c_in, &down, [c[0] as usize, c[1] as usize, c[2] as usize]);
        for (a, e) in out.value(r).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-6, "strided deviates: {a} vs {e}");
        }
    }
}

#[test]
fn single_entry_supports_all_three_scales() {
    let mut rng = stream(3, StreamTag::WeightInit, 0);
    let cfg = InteractionEncoderConfig { channels: [4, 5, 6] };
    let enc = InteractionEncoder::<f64>::init(3, cfg, &mut rng);

    let mut g = grid([11, 11, 11], 3);
    g.push([6, 7, 5], &fill(30, 3));
    let msv = enc.encode_grid(&g).unwrap();

    assert_eq!(msv.scales[0].coords(), &[[6, 7, 5]]);
    assert_eq!(msv.scales[1].coords(), &[[3, 3, 2]]);
    assert_eq!(msv.scales[2].coords(), &[[1, 1, 1]]);
    assert_eq!(msv.interaction_dim(), 15);
    assert_eq!(cfg.interaction_dim(), 15);

    // Scale geometry: shared origin, doubled voxels, ceil-halved dims.
    for (k, g) in msv.scales.iter().enumerate() {
        assert_eq!(g.origin.to_array(), [0.0, 0.0, 0.0]);
        let scale = (1 << k) as f64;
        assert!((g.voxel_size - 0.01 * scale).abs() < 1e-15);
    }
    assert_eq!(msv.scales[0].dims, [11, 11, 11]);
    assert_eq!(msv.scales[1].dims, [6, 6, 6]);
    assert_eq!(msv.scales[2].dims, [3, 3, 3]);

    let again = enc.encode_grid(&g).unwrap();
    for k in 0..3 {
        assert_eq!(msv.scales[k].values(), again.scales[k].values());
    }

    match enc.encode_grid(&grid([11, 11, 11], 3)) {
        Err(Error::EmptyVolume) => {}
        other => panic!("empty input must be rejected, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn trilinear_queries_follow_center_and_linearity_rules() {
    // Unit voxels make every weight binary-exact, so centers read exactly.
    let unit_grid = |dims: [usize; 3], voxel: f64, channels: usize| {
        SparseGrid::<f64>::new_empty(vec3(0.0, 0.0, 0.0), voxel, dims, channels)
    };
    // Fine scale: two active voxels adjacent along x.
    let mut fine = unit_grid([8, 8, 8], 1.0, 2);
    let a = [1.0, -2.0];
    let b = [3.0, 5.0];
    fine.push([3, 4, 4], &a);
    fine.push([4, 4, 4], &b);
    // Coarse-1 extends one cell past the fine box along x (ceil-rounded
    // dims do this in encoder outputs).
    let mut coarse1 = unit_grid([5, 4, 4], 2.0, 3);
    let coarse2 = unit_grid([2, 2, 2], 4.0, 4);
    coarse1.push([1, 2, 2], &[7.0, 8.0, 9.0]);
    coarse1.push([4, 2, 2], &[-1.0, 2.0, 0.5]);
    let msv = MultiScaleVolumes {
        scales: [fine, coarse1, coarse2],
    };
    assert_eq!(msv.interaction_dim(), 9);

    // Exactly at the (3,4,4) center: neighbor (4,4,4) carries weight zero
    // there, so the read is exact despite its presence.
    let center = vec3(3.5, 4.5, 4.5);
    let q = query_interaction(&msv, center);
    assert_eq!(&q[..2], &a);

    // Midway between the two centers: their mean.
    let mid = vec3(4.0, 4.5, 4.5);
    let q = query_interaction(&msv, mid);
    assert_eq!(q[0], 2.0);
    assert_eq!(q[1], 1.5);

    // Linearity along the segment between the centers.
    for lambda in [0.25, 0.7] {
        let x = vec3(3.5 + lambda, 4.5, 4.5);
        let q = query_interaction(&msv, x);
        for ch in 0..2 {
            let expect = (1.0 - lambda) * a[ch] + lambda * b[ch];
            assert!((q[ch] - expect).abs() < 1e-12);
        }
    }

    // The coarse-1 voxel center reads back exactly in its own slice.
    let c1 = vec3(3.0, 5.0, 5.0);
    let q = query_interaction(&msv, c1);
    assert_eq!(&q[2..5], &[7.0, 8.0, 9.0]);

    // Far outside every scale's box: all zeros.
    let q = query_interaction(&msv, vec3(-1.0, 0.0, 0.0));
    assert!(q.iter().all(|&v| v == 0.0));

    // Past the fine box along x but inside coarse-1: the per-scale rule
    // zeroes the fine slice while the coarse voxel at (4,2,2), centered at
    // x = 9, reads back exactly.
    let q = query_interaction(&msv, vec3(9.0, 5.0, 5.0));
    assert!(q[..2].iter().all(|&v| v == 0.0));
    assert_eq!(&q[2..5], &[-1.0, 2.0, 0.5]);
}

#[test]
fn translation_by_one_voxel_shifts_submanifold_outputs_exactly() {
    let mut rng = stream(4, StreamTag::WeightInit, 0);
    let mut layer = SparseConvLayer::<f64>::init(3, 4, 1, 2.0, &mut rng);
    randomize_layer(&mut layer, 40);

    let sites: [[u16; 3]; 5] = [[2, 2, 2], [3, 2, 2], [3, 3, 2], [5, 5, 5], [2, 3, 3]];
    let mut g0 = grid([9, 9, 9], 3);
    let mut g1 = grid([9, 9, 9], 3);
    for (i, &c) in sites.iter().enumerate() {
        let v = fill(50 + i as u64, 3);
        g0.push(c, &v);
        g1.push([c[0] + 1, c[1] + 1, c[2] + 1], &v);
    }
    let y0 = sparse_conv(&layer, &g0).unwrap();
    let y1 = sparse_conv(&layer, &g1).unwrap();
    for r in 0..y0.len() {
        let c = y0.coord(r);
        let shifted = y1.row_at([c[0] + 1, c[1] + 1, c[2] + 1]).unwrap();
        assert_eq!(y0.value(r), y1.value(shifted), "covariance broken at {c:?}");
    }

    // And through the full stack's stride-1 scale.
    let cfg = InteractionEncoderConfig { channels: [3, 4, 4] };
    let enc = InteractionEncoder::<f64>::init(3, cfg, &mut rng);
    let s0 = enc.encode_grid(&g0).unwrap();
    let s1 = enc.encode_grid(&g1).unwrap();
    for r in 0..s0.scales[0].len() {
        let c = s0.scales[0].coord(r);
        let shifted = s1.scales[0].row_at([c[0] + 1, c[1] + 1, c[2] + 1]).unwrap();
        assert_eq!(s0.scales[0].value(r), s1.scales[0].value(shifted));
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let mut rng = stream(5, StreamTag::WeightInit, 0);
    let cfg = InteractionEncoderConfig { channels: [3, 4, 5] };
    let mut enc = InteractionEncoder::<f64>::init(3, cfg, &mut rng);

    let mut g = grid([6, 6, 6], 3);
    for (i, c) in [
        [2u16, 2, 2],
        [3, 2, 2],
        [2, 3, 2],
        [3, 3, 3],
        [4, 4, 4],
        [1, 4, 3],
        [5, 1, 1],
    ]
    .into_iter()
    .enumerate()
    {
        g.push(c, &fill(60 + i as u64, 3));
    }

    // Scalar readout: random projections of the interaction feature at
    // three query points spanning fine and coarse cells.
    let points = [
        vec3(0.025, 0.025, 0.025),
        vec3(0.031, 0.028, 0.027),
        vec3(0.044, 0.041, 0.038),
    ];
    let readouts: Vec<Vec<f64>> = (0..points.len())
        .map(|i| fill(70 + i as u64, cfg.interaction_dim()))
        .collect();
    let loss = |enc: &InteractionEncoder<f64>, g: &SparseGrid<f64>| -> f64 {
        let msv = enc.encode_grid(g).unwrap();
        points
            .iter()
            .zip(&readouts)
            .map(|(&x, r)| {
                query_interaction(&msv, x)
                    .iter()
                    .zip(r)
                    .map(|(&v, &w)| v * w)
                    .sum::<f64>()
            })
            .sum()
    };

    let (msv, cache) = enc.encode_grid_with_cache(&g).unwrap();
    let mut d_scales = msv.zero_grads();
    for (&x, r) in points.iter().zip(&readouts) {
        query_interaction_backward(&msv, x, r, &mut d_scales);
    }
    enc.zero_grads();
    let d_input = enc.backward(&cache, &d_scales);
    assert_eq!(d_input.len(), g.values().len());

    let mut analytic = Vec::new();
    enc.visit_params("", &mut |p| {
        for (i, &gr) in p.grad.data.iter().enumerate() {
            analytic.push((p.name.clone(), i, gr));
        }
    });

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for (name, idx, grad) in &analytic {
        let probe = |delta: f64, enc: &mut InteractionEncoder<f64>| {
            enc.visit_params("", &mut |p| {
                if &p.name == name {
                    p.value.data[*idx] += delta;
                }
            });
            let v = loss(enc, &g);
            enc.visit_params("", &mut |p| {
                if &p.name == name {
                    p.value.data[*idx] -= delta;
                }
            });
            v
        };
        let fd = (probe(eps, &mut enc) - probe(-eps, &mut enc)) / (2.0 * eps);
        // The floor absorbs finite-difference roundoff on near-zero
        // gradients; a genuinely wrong gradient still exceeds it by orders.
        let rel = (grad - fd).abs() / grad.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
        if grad.abs() > 1e-12 {
            nonzero += 1;
        }
        assert!(
            rel < 1e-4,
            "{name}[{idx}]: analytic {grad:.6e} vs fd {fd:.6e} (rel {rel:.2e})"
        );
    }
    assert!(nonzero > analytic.len() / 4, "too few live gradients");

    // Gradient w.r.t. the input grid's values.
    for row in 0..g.len() {
        for ch in 0..3 {
            let idx = row * 3 + ch;
            let mut probe = |delta: f64| {
                g.values_mut()[idx] += delta;
                let v = loss(&enc, &g);
                g.values_mut()[idx] -= delta;
                v
            };
            let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
            let rel = (d_input[idx] - fd).abs() / d_input[idx].abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
            assert!(
                rel < 1e-4,
                "d_input[{idx}]: analytic {:.6e} vs fd {fd:.6e}",
                d_input[idx]
            );
        }
    }
    println!(
        "checked {} weights + {} inputs, worst rel err {worst:.2e}",
        analytic.len(),
        g.values().len()
    );
}

#[test]
fn query_scatter_is_the_exact_adjoint() {
    // <d, query(x)> must equal <scatter(d), values> for every scale.
    let mut rng = stream(6, StreamTag::WeightInit, 0);
    let cfg = InteractionEncoderConfig { channels: [3, 3, 3] };
    let enc = InteractionEncoder::<f64>::init(2, cfg, &mut rng);
    let mut g = grid([7, 7, 7], 2);
    for (i, c) in [[2u16, 3, 3], [3, 3, 3], [4, 2, 3], [3, 4, 4]].into_iter().enumerate() {
        g.push(c, &fill(80 + i as u64, 2));
    }
    let msv = enc.encode_grid(&g).unwrap();

    for (pi, x) in [
        vec3(0.033, 0.034, 0.036),
        vec3(0.025, 0.035, 0.035),
        vec3(0.051, 0.049, 0.032),
    ]
    .into_iter()
    .enumerate()
    {
        let d = fill(90 + pi as u64, msv.interaction_dim());
        let q = query_interaction(&msv, x);
        let lhs: f64 = q.iter().zip(&d).map(|(&a, &b)| a * b).sum();

        let mut grads = msv.zero_grads();
        query_interaction_backward(&msv, x, &d, &mut grads);
        let rhs: f64 = msv
            .scales
            .iter()
            .zip(&grads)
            .map(|(s, gr)| s.values().iter().zip(gr).map(|(&a, &b)| a * b).sum::<f64>())
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "adjoint identity broken: {lhs} vs {rhs}");
    }
}
