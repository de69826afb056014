//! From a trained field to meshes: dense sigma/label sampling over a box,
//! iso-surface extraction on occupancy, per-label splitting, and removal of
//! small floater components.
//!
//! The polygonizer is face-driven rather than table-driven. Every cube face
//! contributes directed contour segments (interior kept on the left as seen
//! from outside the cube), segments are chained into closed cycles, and each
//! cycle is triangulated over chords that stay strictly inside its cube. The
//! two cubes sharing a face see it from opposite sides and emit the same
//! segment with opposite directions, so
//! every surface edge is shared by exactly two triangles with consistent
//! winding: the mesh is watertight by construction wherever the interior
//! stays off the grid boundary. Faces with two diagonally-opposite interior
//! corners are disambiguated by the sign of the bilinear interpolant at its
//! saddle point, which both neighboring cubes compute from the same four
//! values and therefore resolve identically.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_volume::sample_projection;
use crate::geometry::Camera;
use crate::image_encoder::FeatureMap;
use crate::interaction_encoder::{query_interaction_into, MultiScaleVolumes};
use crate::math::{Aabb, Vec3};
use crate::mesh::TriMesh;
use crate::raster::Label;
use crate::scalar::Real;
use crate::semantic_field::FieldHead;

/// Default edge length of one density voxel, in meters.
pub const DEFAULT_DENSITY_VOXEL: f64 = 0.002;

/// Default occupancy level that separates inside from outside.
pub const DEFAULT_ISO: f64 = 0.5;

/// Dense density and label sampling of a field over an axis-aligned box.
///
/// Voxels are laid out x-fastest. `sigma` and `labels` hold one entry per
/// voxel, both evaluated at the voxel center; sigma is nonnegative and
/// labels stay within the three semantic classes.
#[derive(Clone, Debug)]
pub struct DensityGrid<S> {
    /// Corner of the sampled box; the first voxel center sits half a voxel
    /// inward from here along each axis.
    pub origin: Vec3<S>,
    pub voxel_size: S,
    pub dims: [usize; 3],
    pub sigma: Vec<S>,
    pub labels: Vec<u8>,
}

impl<S: Real> DensityGrid<S> {
    /// Builds a grid by evaluating `f` at every voxel center. The trained
    /// path goes through [`extract_grid`]; this constructor injects analytic
    /// fields for testing and tooling.
    pub fn from_fn(
        origin: Vec3<S>,
        voxel_size: S,
        dims: [usize; 3],
        mut f: impl FnMut(Vec3<S>) -> (S, u8),
    ) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        let mut sigma = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for iz in 0..dims[2] {
            for iy in 0..dims[1] {
                for ix in 0..dims[0] {
                    let (s, l) = f(center_of(origin, voxel_size, [ix, iy, iz]));
                    sigma.push(s);
                    labels.push(l);
                }
            }
        }
        DensityGrid {
            origin,
            voxel_size,
            dims,
            sigma,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.dims[0] && iy < self.dims[1] && iz < self.dims[2]);
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    /// World position of the center of voxel `(ix, iy, iz)`.
    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> Vec3<S> {
        center_of(self.origin, self.voxel_size, [ix, iy, iz])
    }

    /// Occupancy of one voxel: the probability `1 - exp(-sigma * voxel_size)`
    /// that a ray segment of one voxel length terminates inside it.
    pub fn occupancy(&self, flat: usize) -> S {
        S::one() - (-self.sigma[flat] * self.voxel_size).exp()
    }

    /// Number of voxels whose occupancy exceeds `iso`, optionally restricted
    /// to one semantic label. This is the count the component filter takes
    /// as its reference.
    pub fn occupied_count(&self, iso: S, label: Option<u8>) -> usize {
        (0..self.len())
            .filter(|&i| label.is_none_or(|l| self.labels[i] == l) && self.occupancy(i) > iso)
            .count()
    }
}

fn center_of<S: Real>(origin: Vec3<S>, voxel: S, idx: [usize; 3]) -> Vec3<S> {
    let half = S::of(0.5);
    Vec3::new(
        origin.x + voxel * (S::of(idx[0] as f64) + half),
        origin.y + voxel * (S::of(idx[1] as f64) + half),
        origin.z + voxel * (S::of(idx[2] as f64) + half),
    )
}

/// Which part of the scene a mesh covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SemanticTag {
    Hand,
    Object,
    Whole,
}

impl SemanticTag {
    pub fn name(self) -> &'static str {
        match self {
            SemanticTag::Hand => "hand",
            SemanticTag::Object => "object",
            SemanticTag::Whole => "whole",
        }
    }
}

/// Triangle mesh plus the provenance the cleanup pass needs: for every
/// vertex, the flat index of the interior voxel whose edge crossing created
/// it.
#[derive(Clone, Debug)]
pub struct LabeledMesh<S> {
    pub mesh: TriMesh<S>,
    pub tag: SemanticTag,
    pub vertex_anchor: Vec<usize>,
}

impl<S: Real> LabeledMesh<S> {
    pub fn empty(tag: SemanticTag) -> Self {
        LabeledMesh {
            mesh: TriMesh::default(),
            tag,
            vertex_anchor: Vec::new(),
        }
    }
}

/// Samples the trained field on a regular grid spanning `bounds`.
///
/// Resolution is `ceil(extent / voxel_size)` per axis (at least 1), so the
/// grid covers the box completely even when the extent is not a multiple of
/// the voxel size. Sigma and the label argmax do not depend on the viewing
/// direction, so the direction input of the head is held fixed. Slabs of
/// constant z are evaluated in parallel; the output layout does not depend
/// on the schedule.
pub fn extract_grid<S: Real>(
    head: &FieldHead<S>,
    volumes: &MultiScaleVolumes<S>,
    fmap: &FeatureMap<S>,
    camera_in: &Camera<S>,
    bounds: &Aabb<S>,
    voxel_size: S,
) -> DensityGrid<S> {
    let dims = [
        grid_len(bounds.max.x - bounds.min.x, voxel_size),
        grid_len(bounds.max.y - bounds.min.y, voxel_size),
        grid_len(bounds.max.z - bounds.min.z, voxel_size),
    ];
    let grid0 = &volumes.scales[0];
    let mut dir_row = Vec::with_capacity(head.dir_input_dim());
    head.pe_d
        .encode_into(&[S::zero(), S::zero(), S::one()], &mut dir_row);

    let slabs: Vec<(Vec<S>, Vec<u8>)> = (0..dims[2])
        .into_par_iter()
        .map(|iz| {
            let n = dims[0] * dims[1];
            let mut trunk_in = Vec::with_capacity(n * head.trunk_input_dim());
            let mut img_buf = vec![S::zero(); head.image_dim];
            let mut inter_buf = vec![S::zero(); head.interaction_dim];
            for iy in 0..dims[1] {
                for ix in 0..dims[0] {
                    let p = center_of(bounds.min, voxel_size, [ix, iy, iz]);
                    let xn = grid0.normalize(p);
                    head.pe_x.encode_into(&xn.to_array(), &mut trunk_in);
                    if head.config.use_image_feature {
                        sample_projection(camera_in, fmap, p, &mut img_buf);
                        trunk_in.extend_from_slice(&img_buf);
                    }
                    if head.config.use_interaction {
                        query_interaction_into(volumes, p, &mut inter_buf);
                        trunk_in.extend_from_slice(&inter_buf);
                    }
                }
            }
            let mut dir_enc = Vec::with_capacity(n * dir_row.len());
            for _ in 0..n {
                dir_enc.extend_from_slice(&dir_row);
            }
            let out = head.forward_batch(&trunk_in, &dir_enc, n);
            let mut sigma = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for s in &out {
                sigma.push(s.sigma);
                labels.push(argmax3(&s.label_logits));
            }
            (sigma, labels)
        })
        .collect();

    let n = dims[0] * dims[1] * dims[2];
    let mut sigma = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (s, l) in slabs {
        sigma.extend(s);
        labels.extend(l);
    }
    DensityGrid {
        origin: bounds.min,
        voxel_size,
        dims,
        sigma,
        labels,
    }
}

fn grid_len<S: Real>(extent: S, voxel: S) -> usize {
    ((extent / voxel).ceil().f64() as usize).max(1)
}

fn argmax3<S: Real>(logits: &[S; 3]) -> u8 {
    let mut best = 0usize;
    for i in 1..3 {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best as u8
}

/// Extracts the `occupancy = iso` surface of the grid as a triangle mesh.
///
/// Crossing vertices are linearly interpolated between the two voxel centers
/// of each sign-changing grid edge and shared between all cells touching
/// that edge, so the mesh is vertex-welded. Fails with `EmptyMesh` when no
/// cell crosses the level.
pub fn marching_cubes<S: Real>(grid: &DensityGrid<S>, iso: S) -> Result<LabeledMesh<S>> {
    polygonize(grid, iso, None, SemanticTag::Whole)
}

/// Extracts separate hand and object meshes.
///
/// The density is masked by the per-voxel label before each pass (only
/// matching voxels keep their sigma), then each pass runs an independent
/// surface extraction. A label with no super-threshold voxels yields an
/// empty mesh rather than an error.
pub fn split_semantic<S: Real>(
    grid: &DensityGrid<S>,
    iso: S,
) -> (LabeledMesh<S>, LabeledMesh<S>) {
    let hand = polygonize(grid, iso, Some(Label::Hand as u8), SemanticTag::Hand)
        .unwrap_or_else(|_| LabeledMesh::empty(SemanticTag::Hand));
    let object = polygonize(grid, iso, Some(Label::Object as u8), SemanticTag::Object)
        .unwrap_or_else(|_| LabeledMesh::empty(SemanticTag::Object));
    (hand, object)
}

/// Drops connected components whose voxel support is below one tenth of
/// `input_voxel_count`; components at exactly the threshold survive.
///
/// The support of a component is the number of distinct interior voxels its
/// vertices are anchored to, so the rule measures covered volume rather than
/// triangle count. `input_voxel_count` is the number of occupied voxels that
/// produced the mesh (see [`DensityGrid::occupied_count`]).
pub fn remove_small_components<S: Real>(
    labeled: &LabeledMesh<S>,
    input_voxel_count: usize,
) -> LabeledMesh<S> {
    let comps = labeled.mesh.connected_components();
    let mut keep = Vec::new();
    for comp in &comps {
        let mut support: HashSet<usize> = HashSet::new();
        for &fi in comp {
            for &vi in &labeled.mesh.faces[fi] {
                support.insert(labeled.vertex_anchor[vi as usize]);
            }
        }
        if support.len() * 10 >= input_voxel_count {
            keep.extend_from_slice(comp);
        }
    }
    keep.sort_unstable();

    let mut remap: Vec<u32> = vec![u32::MAX; labeled.mesh.vertices.len()];
    let mut vertices = Vec::new();
    let mut anchors = Vec::new();
    let mut faces = Vec::with_capacity(keep.len());
    for &fi in &keep {
        let mut tri = labeled.mesh.faces[fi];
        for v in &mut tri {
            let vi = *v as usize;
            if remap[vi] == u32::MAX {
                remap[vi] = vertices.len() as u32;
                vertices.push(labeled.mesh.vertices[vi]);
                anchors.push(labeled.vertex_anchor[vi]);
            }
            *v = remap[vi];
        }
        faces.push(tri);
    }
    LabeledMesh {
        mesh: TriMesh { vertices, faces },
        tag: labeled.tag,
        vertex_anchor: anchors,
    }
}

/// Keeps every crossing vertex strictly between its two voxel centers, so a
/// sample sitting exactly on the iso level cannot collapse two edge vertices
/// of one cell onto their shared corner.
const EDGE_T_CLAMP: f64 = 1e-6;

/// Corner numbering inside one cell: bit 0 = +x, bit 1 = +y, bit 2 = +z.
/// A cell spans the 8 voxel centers `(ix..=ix+1, iy..=iy+1, iz..=iz+1)`.
fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The four corners of one cell face, counter-clockwise as seen from outside
/// the cell.
fn face_corners(axis: usize, positive: bool) -> [usize; 4] {
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let base = if positive { 1 << axis } else { 0 };
    let order: [(usize, usize); 4] = if positive {
        [(0, 0), (1, 0), (1, 1), (0, 1)]
    } else {
        [(0, 0), (0, 1), (1, 1), (1, 0)]
    };
    order.map(|(du, dv)| base | (du << u) | (dv << v))
}

/// Identifier of the cell edge between adjacent corners `a` and `b`:
/// `axis * 8 + min_corner`. 24 slots of which 12 name real edges; the sparse
/// encoding keeps lookups plain array indexing.
fn edge_id(a: usize, b: usize) -> usize {
    let diff = a ^ b;
    debug_assert_eq!(diff.count_ones(), 1);
    let axis = diff.trailing_zeros() as usize;
    axis * 8 + (a & !diff)
}

/// The two cell faces bordering the cube edge `local`, as (axis, side).
fn edge_faces(local: usize) -> [(usize, usize); 2] {
    let axis = local / 8;
    let m = local % 8;
    let u = (axis + 1) % 3;
    let v = (axis + 2) % 3;
    [(u, (m >> u) & 1), (v, (m >> v) & 1)]
}

/// Whether two crossing vertices (named by their cell edges) lie on a common
/// cell face. A triangulation chord between such a pair runs inside that
/// face plane, where the neighboring cell can emit the coincident chord or
/// contour segment and make the edge non-manifold; chords between
/// face-disjoint pairs stay strictly interior to the cell and are safe.
fn chord_on_boundary(a: usize, b: usize) -> bool {
    let fa = edge_faces(a);
    edge_faces(b).iter().any(|f| fa.contains(f))
}

/// For a face whose diagonal corners carry the interior (`fa, fc > 0` and
/// `fb, fd <= 0`), reports whether the interior connects across the face.
/// The bilinear interpolant over the face takes the value
/// `(fa*fc - fb*fd) / (fa + fc - fb - fd)` at its saddle; the denominator is
/// positive here, so the saddle sign reduces to this product comparison.
fn face_diagonal_connected<S: Real>(fa: S, fb: S, fc: S, fd: S) -> bool {
    fa * fc > fb * fd
}

/// Emits the directed contour segments of one face into `next`, keyed by
/// cell edge id: `next[from] = Some(to)` means the contour leaves the
/// crossing on edge `from` toward the crossing on edge `to`.
///
/// `q` lists the face corners counter-clockwise as seen from outside the
/// cell, and segments keep the interior on their left in that view, so the
/// neighboring cell emits every shared segment with the opposite direction.
fn face_segments<S: Real>(f: &[S; 8], q: [usize; 4], next: &mut [Option<u8>; 24]) {
    let mut mask = 0usize;
    for (i, &c) in q.iter().enumerate() {
        if f[c] > S::zero() {
            mask |= 1 << i;
        }
    }
    let e = |i: usize| edge_id(q[i % 4], q[(i + 1) % 4]);
    let mut seg = |from: usize, to: usize| {
        debug_assert!(next[e(from)].is_none());
        next[e(from)] = Some(e(to) as u8);
    };
    match mask {
        0b0000 | 0b1111 => {}
        // One corner inside: a short arc around it.
        0b0001 => seg(0, 3),
        0b0010 => seg(1, 0),
        0b0100 => seg(2, 1),
        0b1000 => seg(3, 2),
        // One corner outside: the same two edges, walked the other way.
        0b1110 => seg(3, 0),
        0b1101 => seg(0, 1),
        0b1011 => seg(1, 2),
        0b0111 => seg(2, 3),
        // Two adjacent corners inside: one segment across the face.
        0b0011 => seg(1, 3),
        0b0110 => seg(2, 0),
        0b1100 => seg(3, 1),
        0b1001 => seg(0, 2),
        // Diagonal pairs: the saddle test decides whether the two interior
        // corners join across the face.
        0b0101 => {
            if face_diagonal_connected(f[q[0]], f[q[1]], f[q[2]], f[q[3]]) {
                seg(0, 1);
                seg(2, 3);
            } else {
                seg(0, 3);
                seg(2, 1);
            }
        }
        0b1010 => {
            if face_diagonal_connected(f[q[1]], f[q[2]], f[q[3]], f[q[0]]) {
                seg(1, 2);
                seg(3, 0);
            } else {
                seg(1, 0);
                seg(3, 2);
            }
        }
        _ => unreachable!(),
    }
}

struct MeshAccum<S> {
    vertices: Vec<Vec3<S>>,
    anchors: Vec<usize>,
    faces: Vec<[u32; 3]>,
    /// Welds crossing vertices across cells: grid edge (flat index of the
    /// lower voxel, axis) to vertex id.
    edge_vertex: HashMap<(usize, usize), u32>,
}

impl<S: Real> MeshAccum<S> {
    fn new() -> Self {
        MeshAccum {
            vertices: Vec::new(),
            anchors: Vec::new(),
            faces: Vec::new(),
            edge_vertex: HashMap::new(),
        }
    }

    /// Vertex on the grid edge named by `local_edge` of the cell at `cell`,
    /// created on first use by linear interpolation of `occ - iso` between
    /// the two voxel centers.
    fn vertex_for(
        &mut self,
        grid: &DensityGrid<S>,
        occ: &[S],
        iso: S,
        cell: [usize; 3],
        local_edge: usize,
    ) -> u32 {
        let axis = local_edge / 8;
        let m = corner_offset(local_edge % 8);
        let lo = [cell[0] + m[0], cell[1] + m[1], cell[2] + m[2]];
        let flat_lo = grid.flat(lo[0], lo[1], lo[2]);
        let key = (flat_lo, axis);
        if let Some(&id) = self.edge_vertex.get(&key) {
            return id;
        }
        let mut hi = lo;
        hi[axis] += 1;
        let flat_hi = grid.flat(hi[0], hi[1], hi[2]);
        let a = occ[flat_lo] - iso;
        let b = occ[flat_hi] - iso;
        debug_assert!((a > S::zero()) != (b > S::zero()));
        let t = (a / (a - b))
            .max(S::of(EDGE_T_CLAMP))
            .min(S::of(1.0 - EDGE_T_CLAMP));
        let pa = grid.center(lo[0], lo[1], lo[2]);
        let pb = grid.center(hi[0], hi[1], hi[2]);
        let id = self.vertices.len() as u32;
        self.vertices.push(pa + (pb - pa) * t);
        self.anchors
            .push(if a > S::zero() { flat_lo } else { flat_hi });
        self.edge_vertex.insert(key, id);
        id
    }

    /// Triangulates one surface polygon. A chord between two crossings whose
    /// cube edges border a common cell face lies in that face's plane, where
    /// the neighboring cell can emit the coincident chord; only strictly
    /// interior chords are safe. Interval dynamic programming searches the
    /// polygon's triangulations for one built from safe chords alone. When a
    /// cell is ambiguous on several faces at once no such triangulation may
    /// exist; those polygons are fanned around one added interior point,
    /// whose fresh vertex id cannot collide with anything a neighbor emits.
    fn emit_polygon(&mut self, edges: &[usize], vids: &[u32]) {
        let n = edges.len();
        if n < 3 {
            return;
        }
        if n == 3 {
            self.faces.push([vids[0], vids[1], vids[2]]);
            return;
        }
        // A cube has 12 edges and each crossed edge joins exactly one cycle.
        debug_assert!(n <= 12);
        let side_ok = |i: usize, j: usize| {
            j == i + 1 || (i == 0 && j == n - 1) || !chord_on_boundary(edges[i], edges[j])
        };
        let mut can = [[false; 12]; 12];
        let mut pick = [[0usize; 12]; 12];
        for i in 0..n - 1 {
            can[i][i + 1] = true;
        }
        for span in 2..n {
            for i in 0..n - span {
                let j = i + span;
                for k in i + 1..j {
                    if can[i][k] && can[k][j] && side_ok(i, k) && side_ok(k, j) {
                        can[i][j] = true;
                        pick[i][j] = k;
                        break;
                    }
                }
            }
        }
        if can[0][n - 1] {
            let mut stack = vec![(0usize, n - 1)];
            while let Some((i, j)) = stack.pop() {
                if j - i < 2 {
                    continue;
                }
                let k = pick[i][j];
                self.faces.push([vids[i], vids[k], vids[j]]);
                stack.push((i, k));
                stack.push((k, j));
            }
            return;
        }
        let inv = S::of(1.0 / n as f64);
        let mut centroid = Vec3::new(S::zero(), S::zero(), S::zero());
        for &v in vids {
            centroid = centroid + self.vertices[v as usize];
        }
        centroid = centroid * inv;
        let cid = self.vertices.len() as u32;
        self.vertices.push(centroid);
        self.anchors.push(self.anchors[vids[0] as usize]);
        for k in 0..n {
            self.faces.push([cid, vids[k], vids[(k + 1) % n]]);
        }
    }
}

fn polygonize<S: Real>(
    grid: &DensityGrid<S>,
    iso: S,
    label_filter: Option<u8>,
    tag: SemanticTag,
) -> Result<LabeledMesh<S>> {
    // Masked-out voxels read as empty space, so a label pass sees only its
    // own material.
    let occ: Vec<S> = (0..grid.len())
        .map(|i| {
            if label_filter.is_none_or(|l| grid.labels[i] == l) {
                grid.occupancy(i)
            } else {
                S::zero()
            }
        })
        .collect();

    let mut acc = MeshAccum::new();
    for iz in 0..grid.dims[2].saturating_sub(1) {
        for iy in 0..grid.dims[1].saturating_sub(1) {
            for ix in 0..grid.dims[0].saturating_sub(1) {
                polygonize_cell(grid, &occ, iso, [ix, iy, iz], &mut acc);
            }
        }
    }
    if acc.faces.is_empty() {
        return Err(Error::EmptyMesh);
    }
    Ok(LabeledMesh {
        mesh: TriMesh {
            vertices: acc.vertices,
            faces: acc.faces,
        },
        tag,
        vertex_anchor: acc.anchors,
    })
}

fn polygonize_cell<S: Real>(
    grid: &DensityGrid<S>,
    occ: &[S],
    iso: S,
    cell: [usize; 3],
    acc: &mut MeshAccum<S>,
) {
    let mut f = [S::zero(); 8];
    let mut mask = 0usize;
    for (c, fc) in f.iter_mut().enumerate() {
        let o = corner_offset(c);
        *fc = occ[grid.flat(cell[0] + o[0], cell[1] + o[1], cell[2] + o[2])] - iso;
        if *fc > S::zero() {
            mask |= 1 << c;
        }
    }
    if mask == 0 || mask == 0xff {
        return;
    }

    let mut next: [Option<u8>; 24] = [None; 24];
    for axis in 0..3 {
        for positive in [false, true] {
            face_segments(&f, face_corners(axis, positive), &mut next);
        }
    }

    // Every crossed cell edge has exactly one outgoing and one incoming
    // segment, so following `next` partitions the crossings into closed
    // cycles; each cycle bounds one polygon of the surface inside this cell.
    let mut done = [false; 24];
    for start in 0..24 {
        if done[start] || next[start].is_none() {
            continue;
        }
        let mut edges: Vec<usize> = Vec::with_capacity(7);
        let mut vids: Vec<u32> = Vec::with_capacity(7);
        let mut e = start;
        loop {
            done[e] = true;
            edges.push(e);
            vids.push(acc.vertex_for(grid, occ, iso, cell, e));
            e = next[e].expect("crossed edge without outgoing segment") as usize;
            if e == start {
                break;
            }
        }
        acc.emit_polygon(&edges, &vids);
    }
}
