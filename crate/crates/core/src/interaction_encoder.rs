//! Sparse 3D CNN over the feature volume. Stride-1 layers use the
//! submanifold convention (output support equals input support); stride-2
//! layers halve the grid. Taps after each resolution yield three feature
//! scales whose trilinear queries concatenate into the interaction feature.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::error::{Error, Result};
use crate::feature_volume::SparseFeatureVolume;
use crate::math::{vec3, Vec3};
use crate::nn::{
    matmul_acc, matmul_at_acc, matmul_bt_acc, silu, silu_grad, ParamRef, Parameterized, Tensor,
};
use crate::rng::gaussian;
use crate::scalar::Real;

pub const NUM_SCALES: usize = 3;

/// Sparse voxel grid of channel vectors: the working representation between
/// convolution layers. Rows are insertion-ordered; the index maps occupied
/// coordinates to rows.
#[derive(Clone, Debug)]
pub struct SparseGrid<S> {
    pub origin: Vec3<S>,
    pub voxel_size: S,
    pub dims: [usize; 3],
    pub channels: usize,
    coords: Vec<[u16; 3]>,
    values: Vec<S>,
    index: BTreeMap<[u16; 3], u32>,
}

impl<S: Real> SparseGrid<S> {
    pub fn new_empty(origin: Vec3<S>, voxel_size: S, dims: [usize; 3], channels: usize) -> Self {
        SparseGrid {
            origin,
            voxel_size,
            dims,
            channels,
            coords: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Shares the volume's geometry; rows keep the volume's order, so row r
    /// here is entry r there.
    pub fn from_volume(v: &SparseFeatureVolume<S>) -> Self {
        let mut g = SparseGrid::new_empty(v.origin, v.voxel_size, v.dims, v.feature_dim);
        for r in 0..v.len() {
            g.push(v.coord(r), v.feature(r));
        }
        g
    }

    /// Appends a row unless the voxel is taken.
    pub fn push(&mut self, coord: [u16; 3], value: &[S]) -> bool {
        use std::collections::btree_map::Entry;
        assert_eq!(value.len(), self.channels);
        let row = self.coords.len() as u32;
        match self.index.entry(coord) {
            Entry::Occupied(_) => return false,
            Entry::Vacant(v) => v.insert(row),
        };
        self.coords.push(coord);
        self.values.extend_from_slice(value);
        true
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coord(&self, row: usize) -> [u16; 3] {
        self.coords[row]
    }

    pub fn coords(&self) -> &[[u16; 3]] {
        &self.coords
    }

    pub fn value(&self, row: usize) -> &[S] {
        &self.values[row * self.channels..(row + 1) * self.channels]
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn row_at(&self, coord: [u16; 3]) -> Option<usize> {
        self.index.get(&coord).map(|&r| r as usize)
    }

    /// World-space box covered by the grid (occupied or not).
    pub fn world_box(&self) -> crate::math::Aabb<S> {
        let extent = vec3(
            S::of(self.dims[0] as f64) * self.voxel_size,
            S::of(self.dims[1] as f64) * self.voxel_size,
            S::of(self.dims[2] as f64) * self.voxel_size,
        );
        crate::math::Aabb::new(self.origin, self.origin + extent)
    }

    /// Point mapped into [-1, 1] per axis across the grid extent: the same
    /// domain the feature volume uses for positional encodings.
    pub fn normalize(&self, p: Vec3<S>) -> Vec3<S> {
        let two = S::of(2.0);
        let rel = p - self.origin;
        vec3(
            two * rel.x / (S::of(self.dims[0] as f64) * self.voxel_size) - S::one(),
            two * rel.y / (S::of(self.dims[1] as f64) * self.voxel_size) - S::one(),
            two * rel.z / (S::of(self.dims[2] as f64) * self.voxel_size) - S::one(),
        )
    }
}

/// Kernel offset for flat index o in 0..27; x varies fastest.
#[inline]
fn offset(o: usize) -> [i32; 3] {
    [
        (o % 3) as i32 - 1,
        ((o / 3) % 3) as i32 - 1,
        (o / 9) as i32 - 1,
    ]
}

/// One 3x3x3 sparse convolution. Weights are stored offset-major as
/// [27*in_c, out_c], so the per-offset block is a contiguous GEMM operand.
#[derive(Clone, Debug)]
pub struct SparseConvLayer<S> {
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub dw: Tensor<S>,
    pub db: Tensor<S>,
}

impl<S: Real> SparseConvLayer<S> {
    pub fn init(in_c: usize, out_c: usize, stride: usize, gain: f64, rng: &mut impl Rng) -> Self {
        assert!(stride == 1 || stride == 2);
        let fan_in = 27 * in_c;
        let std = (gain / fan_in as f64).sqrt();
        let data = (0..fan_in * out_c)
            .map(|_| S::of(gaussian(rng) * std))
            .collect();
        SparseConvLayer {
            in_c,
            out_c,
            stride,
            w: Tensor::from_vec(&[fan_in, out_c], data),
            b: Tensor::zeros(&[out_c]),
            dw: Tensor::zeros(&[fan_in, out_c]),
            db: Tensor::zeros(&[out_c]),
        }
    }

    fn w_block(&self, o: usize) -> &[S] {
        &self.w.data[o * self.in_c * self.out_c..(o + 1) * self.in_c * self.out_c]
    }
}

/// Per-offset (output_row, input_row) gather lists.
type Pairs = Vec<Vec<(u32, u32)>>;

/// Output coordinates of a stride-2 layer: each active site maps to its
/// half-resolution cell; the coarse grid keeps the origin, doubles the voxel
/// edge, and halves the dims rounding up.
fn coarse_coords(g: &SparseGrid<impl Real>) -> Vec<[u16; 3]> {
    let set: BTreeSet<[u16; 3]> = g
        .coords
        .iter()
        .map(|c| [c[0] / 2, c[1] / 2, c[2] / 2])
        .collect();
    set.into_iter().collect()
}

fn build_pairs<S: Real>(input: &SparseGrid<S>, out_coords: &[[u16; 3]], stride: usize) -> Pairs {
    let mut pairs: Pairs = vec![Vec::new(); 27];
    for (i, q) in out_coords.iter().enumerate() {
        for (o, list) in pairs.iter_mut().enumerate() {
            let d = offset(o);
            let mut c = [0u16; 3];
            let mut ok = true;
            for axis in 0..3 {
                let v = stride as i32 * q[axis] as i32 + d[axis];
                if v < 0 || v >= input.dims[axis] as i32 {
                    ok = false;
                    break;
                }
                c[axis] = v as u16;
            }
            if !ok {
                continue;
            }
            if let Some(j) = input.row_at(c) {
                list.push((i as u32, j as u32));
            }
        }
    }
    pairs
}

/// Gather-GEMM-scatter forward: bias plus the 27 per-offset products.
/// Pre-activation values, fixed accumulation order.
fn conv_forward<S: Real>(
    layer: &SparseConvLayer<S>,
    x: &[S],
    n_out: usize,
    pairs: &Pairs,
) -> Vec<S> {
    let (in_c, out_c) = (layer.in_c, layer.out_c);
    let mut y = Vec::with_capacity(n_out * out_c);
    for _ in 0..n_out {
        y.extend_from_slice(&layer.b.data);
    }
    let mut xg = Vec::new();
    let mut yg = Vec::new();
    for (o, list) in pairs.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        xg.clear();
        for &(_, j) in list {
            xg.extend_from_slice(&x[j as usize * in_c..(j as usize + 1) * in_c]);
        }
        yg.clear();
        yg.resize(list.len() * out_c, S::zero());
        matmul_acc(&mut yg, &xg, layer.w_block(o), list.len(), in_c, out_c);
        for (k, &(i, _)) in list.iter().enumerate() {
            let dst = &mut y[i as usize * out_c..(i as usize + 1) * out_c];
            for (a, &v) in dst.iter_mut().zip(&yg[k * out_c..(k + 1) * out_c]) {
                *a += v;
            }
        }
    }
    y
}

/// Adjoint of `conv_forward`: accumulates dW/db and returns d-input.
fn conv_backward<S: Real>(
    layer: &mut SparseConvLayer<S>,
    x: &[S],
    d_pre: &[S],
    pairs: &Pairs,
) -> Vec<S> {
    let (in_c, out_c) = (layer.in_c, layer.out_c);
    for row in d_pre.chunks_exact(out_c) {
        for (g, &d) in layer.db.data.iter_mut().zip(row) {
            *g += d;
        }
    }
    let mut dx = vec![S::zero(); x.len()];
    let mut xg = Vec::new();
    let mut gg = Vec::new();
    let mut dxg = Vec::new();
    for (o, list) in pairs.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        xg.clear();
        gg.clear();
        for &(i, j) in list {
            xg.extend_from_slice(&x[j as usize * in_c..(j as usize + 1) * in_c]);
            gg.extend_from_slice(&d_pre[i as usize * out_c..(i as usize + 1) * out_c]);
        }
        let dw_block =
            &mut layer.dw.data[o * in_c * out_c..(o + 1) * in_c * out_c];
        matmul_at_acc(dw_block, &xg, &gg, list.len(), in_c, out_c);
        dxg.clear();
        dxg.resize(list.len() * in_c, S::zero());
        matmul_bt_acc(
            &mut dxg,
            &gg,
            &layer.w.data[o * in_c * out_c..(o + 1) * in_c * out_c],
            list.len(),
            in_c,
            out_c,
        );
        for (k, &(_, j)) in list.iter().enumerate() {
            let dst = &mut dx[j as usize * in_c..(j as usize + 1) * in_c];
            for (a, &v) in dst.iter_mut().zip(&dxg[k * in_c..(k + 1) * in_c]) {
                *a += v;
            }
        }
    }
    dx
}

/// One bare sparse convolution (no nonlinearity). Stride 1 keeps the active
/// set; stride 2 emits the half-resolution sites of the input's support.
pub fn sparse_conv<S: Real>(
    layer: &SparseConvLayer<S>,
    volume: &SparseGrid<S>,
) -> Result<SparseGrid<S>> {
    if layer.in_c != volume.channels {
        return Err(Error::DimMismatch {
            what: format!(
                "conv expects {} input channels, volume has {}",
                layer.in_c, volume.channels
            ),
        });
    }
    let (out, pairs) = out_grid_and_pairs(layer, volume);
    let values = conv_forward(layer, &volume.values, out.coords.len(), &pairs);
    Ok(SparseGrid { values, ..out })
}

fn out_grid_and_pairs<S: Real>(
    layer: &SparseConvLayer<S>,
    input: &SparseGrid<S>,
) -> (SparseGrid<S>, Pairs) {
    let (coords, origin, voxel, dims) = if layer.stride == 1 {
        (
            input.coords.clone(),
            input.origin,
            input.voxel_size,
            input.dims,
        )
    } else {
        (
            coarse_coords(input),
            input.origin,
            input.voxel_size * S::of(2.0),
            input.dims.map(|d| d.div_ceil(2)),
        )
    };
    let pairs = build_pairs(input, &coords, layer.stride);
    let index = coords
        .iter()
        .enumerate()
        .map(|(r, &c)| (c, r as u32))
        .collect();
    let out = SparseGrid {
        origin,
        voxel_size: voxel,
        dims,
        channels: layer.out_c,
        coords,
        values: Vec::new(),
        index,
    };
    (out, pairs)
}

/// Channel widths of the three scales; their sum is the interaction feature
/// dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InteractionEncoderConfig {
    pub channels: [usize; 3],
}

impl Default for InteractionEncoderConfig {
    fn default() -> Self {
        InteractionEncoderConfig {
            channels: [32, 64, 64],
        }
    }
}

impl InteractionEncoderConfig {
    pub fn interaction_dim(&self) -> usize {
        self.channels.iter().sum()
    }
}

/// Three feature grids at strides 1, 2, and 4 of the input grid.
#[derive(Clone, Debug)]
pub struct MultiScaleVolumes<S> {
    pub scales: [SparseGrid<S>; NUM_SCALES],
}

impl<S: Real> MultiScaleVolumes<S> {
    pub fn interaction_dim(&self) -> usize {
        self.scales.iter().map(|g| g.channels).sum()
    }

    /// Zeroed per-scale gradient buffers matching the value arrays.
    pub fn zero_grads(&self) -> [Vec<S>; NUM_SCALES] {
        [
            vec![S::zero(); self.scales[0].values.len()],
            vec![S::zero(); self.scales[1].values.len()],
            vec![S::zero(); self.scales[2].values.len()],
        ]
    }
}

/// Layer stack: two submanifold convolutions per resolution with a tap after
/// the second, stride-2 transitions between resolutions. SiLU follows every
/// layer except the taps, whose raw values feed both the scale output and
/// the next layer.
#[derive(Clone, Debug)]
pub struct InteractionEncoder<S> {
    pub config: InteractionEncoderConfig,
    pub layers: Vec<SparseConvLayer<S>>,
}

const TAPS: [usize; NUM_SCALES] = [1, 4, 7];

/// Forward state needed by the backward pass: each layer's consumed input,
/// gather lists, and pre-activation output.
pub struct EncodeCache<S> {
    inputs: Vec<Vec<S>>,
    pairs: Vec<Pairs>,
    pre: Vec<Vec<S>>,
}

impl<S: Real> InteractionEncoder<S> {
    pub fn init(input_dim: usize, config: InteractionEncoderConfig, rng: &mut impl Rng) -> Self {
        let [c1, c2, c3] = config.channels;
        let plan = [
            (input_dim, c1, 1),
            (c1, c1, 1),
            (c1, c2, 2),
            (c2, c2, 1),
            (c2, c2, 1),
            (c2, c3, 2),
            (c3, c3, 1),
            (c3, c3, 1),
        ];
        let layers = plan
            .iter()
            .map(|&(i, o, s)| SparseConvLayer::init(i, o, s, 2.0, rng))
            .collect();
        InteractionEncoder { config, layers }
    }

    pub fn encode(&self, v: &SparseFeatureVolume<S>) -> Result<MultiScaleVolumes<S>> {
        self.encode_grid(&SparseGrid::from_volume(v))
    }

    pub fn encode_with_cache(
        &self,
        v: &SparseFeatureVolume<S>,
    ) -> Result<(MultiScaleVolumes<S>, EncodeCache<S>)> {
        self.encode_grid_with_cache(&SparseGrid::from_volume(v))
    }

    pub fn encode_grid(&self, grid: &SparseGrid<S>) -> Result<MultiScaleVolumes<S>> {
        self.run(grid, None)
    }

    pub fn encode_grid_with_cache(
        &self,
        grid: &SparseGrid<S>,
    ) -> Result<(MultiScaleVolumes<S>, EncodeCache<S>)> {
        let mut cache = EncodeCache {
            inputs: Vec::new(),
            pairs: Vec::new(),
            pre: Vec::new(),
        };
        let msv = self.run(grid, Some(&mut cache))?;
        Ok((msv, cache))
    }

    fn run(
        &self,
        grid: &SparseGrid<S>,
        mut cache: Option<&mut EncodeCache<S>>,
    ) -> Result<MultiScaleVolumes<S>> {
        if grid.is_empty() {
            return Err(Error::EmptyVolume);
        }
        if self.layers[0].in_c != grid.channels {
            return Err(Error::DimMismatch {
                what: format!(
                    "encoder expects {} input channels, grid has {}",
                    self.layers[0].in_c, grid.channels
                ),
            });
        }
        let mut scales = Vec::with_capacity(NUM_SCALES);
        let mut cur = grid.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let (mut out, pairs) = out_grid_and_pairs(layer, &cur);
            let pre = conv_forward(layer, &cur.values, out.coords.len(), &pairs);
            let is_tap = TAPS.contains(&l);
            out.values = if is_tap {
                pre.clone()
            } else {
                pre.iter().map(|&v| silu(v)).collect()
            };
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(std::mem::take(&mut cur.values));
                c.pairs.push(pairs);
                c.pre.push(pre);
            }
            if is_tap {
                scales.push(out.clone());
            }
            cur = out;
        }
        let mut it = scales.into_iter();
        Ok(MultiScaleVolumes {
            scales: [
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
            ],
        })
    }

    /// Backpropagates per-scale value gradients through the stack,
    /// accumulating dW/db, and returns the gradient w.r.t. the input grid's
    /// values (row r here is row r of the encoded grid).
    pub fn backward(
        &mut self,
        cache: &EncodeCache<S>,
        d_scales: &[Vec<S>; NUM_SCALES],
    ) -> Vec<S> {
        let last = self.layers.len() - 1;
        let mut d_out: Vec<S> = Vec::new();
        for l in (0..self.layers.len()).rev() {
            let pre = &cache.pre[l];
            let mut d_pre = if l == last {
                vec![S::zero(); pre.len()]
            } else {
                d_out
            };
            if let Some(k) = TAPS.iter().position(|&t| t == l) {
                // Tap outputs are the raw pre-activations, consumed both by
                // the next layer (already in d_pre) and the scale query.
                for (a, &g) in d_pre.iter_mut().zip(&d_scales[k]) {
                    *a += g;
                }
            } else {
                for (a, &p) in d_pre.iter_mut().zip(pre) {
                    *a *= silu_grad(p);
                }
            }
            d_out = conv_backward(
                &mut self.layers[l],
                &cache.inputs[l],
                &d_pre,
                &cache.pairs[l],
            );
        }
        d_out
    }
}

impl<S: Real> Parameterized<S> for InteractionEncoder<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_, S>)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(ParamRef {
                name: format!("{prefix}.conv{l}.w"),
                value: &mut layer.w,
                grad: &mut layer.dw,
            });
            f(ParamRef {
                name: format!("{prefix}.conv{l}.b"),
                value: &mut layer.b,
                grad: &mut layer.db,
            });
        }
    }
}

/// Trilinear interpolation of one scale at a world point, into a zeroed
/// slice. Cell-center convention: weight 1 exactly at an active voxel
/// center. Absent corner voxels contribute zeros; points outside the grid's
/// world box leave the slice zero.
fn query_scale<S: Real>(g: &SparseGrid<S>, x: Vec3<S>, out: &mut [S]) {
    out.fill(S::zero());
    let rel = (x - g.origin) / g.voxel_size;
    for (axis, r) in [rel.x, rel.y, rel.z].into_iter().enumerate() {
        if r < S::zero() || r.f64() >= g.dims[axis] as f64 {
            return;
        }
    }
    let gc = rel - vec3(S::of(0.5), S::of(0.5), S::of(0.5));
    let base = gc.map(|v| v.floor());
    let frac = gc - base;
    let base = [base.x.f64() as i64, base.y.f64() as i64, base.z.f64() as i64];
    let frac = [frac.x, frac.y, frac.z];
    for corner in 0..8usize {
        let mut coord = [0u16; 3];
        let mut weight = S::one();
        let mut ok = true;
        for axis in 0..3 {
            let bit = (corner >> axis) & 1;
            let i = base[axis] + bit as i64;
            if i < 0 || i >= g.dims[axis] as i64 {
                ok = false;
                break;
            }
            coord[axis] = i as u16;
            weight = weight
                * if bit == 1 {
                    frac[axis]
                } else {
                    S::one() - frac[axis]
                };
        }
        if !ok {
            continue;
        }
        if let Some(row) = g.row_at(coord) {
            for (a, &v) in out.iter_mut().zip(g.value(row)) {
                *a += weight * v;
            }
        }
    }
}

/// Adjoint of `query_scale`: scatters `d` into the per-row gradient buffer
/// with the same trilinear weights.
fn query_scale_backward<S: Real>(g: &SparseGrid<S>, x: Vec3<S>, d: &[S], grad: &mut [S]) {
    let rel = (x - g.origin) / g.voxel_size;
    for (axis, r) in [rel.x, rel.y, rel.z].into_iter().enumerate() {
        if r < S::zero() || r.f64() >= g.dims[axis] as f64 {
            return;
        }
    }
    let gc = rel - vec3(S::of(0.5), S::of(0.5), S::of(0.5));
    let base = gc.map(|v| v.floor());
    let frac = gc - base;
    let base = [base.x.f64() as i64, base.y.f64() as i64, base.z.f64() as i64];
    let frac = [frac.x, frac.y, frac.z];
    for corner in 0..8usize {
        let mut coord = [0u16; 3];
        let mut weight = S::one();
        let mut ok = true;
        for axis in 0..3 {
            let bit = (corner >> axis) & 1;
            let i = base[axis] + bit as i64;
            if i < 0 || i >= g.dims[axis] as i64 {
                ok = false;
                break;
            }
            coord[axis] = i as u16;
            weight = weight
                * if bit == 1 {
                    frac[axis]
                } else {
                    S::one() - frac[axis]
                };
        }
        if !ok {
            continue;
        }
        if let Some(row) = g.row_at(coord) {
            let dst = &mut grad[row * g.channels..(row + 1) * g.channels];
            for (a, &v) in dst.iter_mut().zip(d) {
                *a += weight * v;
            }
        }
    }
}

/// Interaction feature of a world point: per-scale trilinear queries
/// concatenated scale 1 | scale 2 | scale 3.
pub fn query_interaction<S: Real>(msv: &MultiScaleVolumes<S>, x: Vec3<S>) -> Vec<S> {
    let mut out = vec![S::zero(); msv.interaction_dim()];
    query_interaction_into(msv, x, &mut out);
    out
}

pub fn query_interaction_into<S: Real>(msv: &MultiScaleVolumes<S>, x: Vec3<S>, out: &mut [S]) {
    debug_assert_eq!(out.len(), msv.interaction_dim());
    let mut off = 0;
    for g in &msv.scales {
        query_scale(g, x, &mut out[off..off + g.channels]);
        off += g.channels;
    }
}

/// Scatters an interaction-feature gradient back onto the per-scale value
/// gradients produced by `MultiScaleVolumes::zero_grads`.
pub fn query_interaction_backward<S: Real>(
    msv: &MultiScaleVolumes<S>,
    x: Vec3<S>,
    d: &[S],
    grads: &mut [Vec<S>; NUM_SCALES],
) {
    debug_assert_eq!(d.len(), msv.interaction_dim());
    let mut off = 0;
    for (g, grad) in msv.scales.iter().zip(grads.iter_mut()) {
        query_scale_backward(g, x, &d[off..off + g.channels], grad);
        off += g.channels;
    }
}
