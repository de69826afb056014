//! Indexed triangle meshes plus the geometric utilities shared by the scene
//! generator, the reconstruction module, and the evaluation metrics.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{parse_err, Result};
use crate::math::{vec3, Aabb, Mat3, Vec3};
use crate::scalar::Real;

#[derive(Clone, Debug, Default)]
pub struct TriMesh<S> {
    pub vertices: Vec<Vec3<S>>,
    pub faces: Vec<[u32; 3]>,
}

impl<S: Real> TriMesh<S> {
    pub fn new(vertices: Vec<Vec3<S>>, faces: Vec<[u32; 3]>) -> Self {
        TriMesh { vertices, faces }
    }

    pub fn face_vertices(&self, i: usize) -> [Vec3<S>; 3] {
        let [a, b, c] = self.faces[i];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn face_centroid(&self, i: usize) -> Vec3<S> {
        let [a, b, c] = self.face_vertices(i);
        (a + b + c) / S::of(3.0)
    }

    pub fn face_normal(&self, i: usize) -> Vec3<S> {
        let [a, b, c] = self.face_vertices(i);
        let n = (b - a).cross(c - a);
        let len = n.norm();
        if len > S::of(1e-30) {
            n / len
        } else {
            Vec3::zero()
        }
    }

    pub fn face_area(&self, i: usize) -> S {
        let [a, b, c] = self.face_vertices(i);
        (b - a).cross(c - a).norm() * S::of(0.5)
    }

    pub fn total_area(&self) -> S {
        (0..self.faces.len()).map(|i| self.face_area(i)).sum()
    }

    pub fn aabb(&self) -> Option<Aabb<S>> {
        Aabb::from_points(self.vertices.iter().copied())
    }

    pub fn translated(&self, d: Vec3<S>) -> Self {
        TriMesh {
            vertices: self.vertices.iter().map(|&v| v + d).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn rotated(&self, r: &Mat3<S>) -> Self {
        TriMesh {
            vertices: self.vertices.iter().map(|&v| r.mul_vec(v)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Appends another mesh, reindexing its faces.
    pub fn append(&mut self, other: &TriMesh<S>) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| f.map(|i| i + base)));
    }

    /// Axis-aligned box centered at the origin; 8 vertices, 12 outward faces.
    pub fn cuboid(half: Vec3<S>) -> Self {
        let (x, y, z) = (half.x, half.y, half.z);
        let vertices = vec![
            vec3(-x, -y, -z),
            vec3(x, -y, -z),
            vec3(x, y, -z),
            vec3(-x, y, -z),
            vec3(-x, -y, z),
            vec3(x, -y, z),
            vec3(x, y, z),
            vec3(-x, y, z),
        ];
        let faces = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [2, 3, 7],
            [2, 7, 6],
            [1, 2, 6],
            [1, 6, 5],
            [3, 0, 4],
            [3, 4, 7],
        ];
        TriMesh { vertices, faces }
    }

    /// Distance from `p` to the closest point on the mesh surface.
    pub fn distance_to_point(&self, p: Vec3<S>) -> S {
        let mut best = S::infinity();
        for i in 0..self.faces.len() {
            let [a, b, c] = self.face_vertices(i);
            let d = point_triangle_distance_sq(p, a, b, c);
            if d < best {
                best = d;
            }
        }
        best.sqrt()
    }

    /// Groups faces into components connected through shared vertices.
    /// Returns per-component face index lists, largest first.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let mut uf = UnionFind::new(self.vertices.len());
        for f in &self.faces {
            uf.union(f[0] as usize, f[1] as usize);
            uf.union(f[0] as usize, f[2] as usize);
        }
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, f) in self.faces.iter().enumerate() {
            groups.entry(uf.find(f[0] as usize)).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a[0].cmp(&b[0])));
        out
    }

    /// Sub-mesh of the given faces, with unused vertices dropped.
    pub fn sub_mesh(&self, face_indices: &[usize]) -> Self {
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let mut vertices = Vec::new();
        let mut faces = Vec::with_capacity(face_indices.len());
        for &fi in face_indices {
            let f = self.faces[fi];
            let mut nf = [0u32; 3];
            for (slot, &vi) in nf.iter_mut().zip(&f) {
                let next = remap.len() as u32;
                let idx = *remap.entry(vi).or_insert_with(|| {
                    vertices.push(self.vertices[vi as usize]);
                    next
                });
                *slot = idx;
            }
            faces.push(nf);
        }
        TriMesh { vertices, faces }
    }

    /// True when every undirected edge borders exactly two faces.
    pub fn is_closed(&self) -> bool {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts.values().all(|&c| c == 2)
    }

    /// First intersection of a ray with the mesh: (t, face index), smallest
    /// positive t at or beyond `t_min`.
    pub fn raycast(&self, origin: Vec3<S>, dir: Vec3<S>, t_min: S) -> Option<(S, usize)> {
        let mut best: Option<(S, usize)> = None;
        for i in 0..self.faces.len() {
            let [a, b, c] = self.face_vertices(i);
            if let Some(t) = ray_triangle(origin, dir, a, b, c) {
                if t >= t_min && best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_obj_to(&mut w)
    }

    pub fn write_obj_to(&self, w: &mut impl Write) -> Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v.x.f64(), v.y.f64(), v.z.f64())?;
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    }

    pub fn read_obj(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_obj_from(&mut BufReader::new(file))
    }

    pub fn read_obj_from(r: &mut impl Read) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let mut coord = [S::zero(); 3];
                    for c in &mut coord {
                        let tok = parts.next().ok_or_else(|| {
                            parse_err("obj", format!("line {}: short vertex", lineno + 1))
                        })?;
                        *c = S::of(tok.parse::<f64>().map_err(|e| {
                            parse_err("obj", format!("line {}: {e}", lineno + 1))
                        })?);
                    }
                    vertices.push(Vec3::from_array(coord));
                }
                Some("f") => {
                    let mut idx = [0u32; 3];
                    for slot in &mut idx {
                        let tok = parts.next().ok_or_else(|| {
                            parse_err("obj", format!("line {}: short face", lineno + 1))
                        })?;
                        let first = tok.split('/').next().unwrap_or(tok);
                        let one_based: u32 = first.parse().map_err(|e| {
                            parse_err("obj", format!("line {}: {e}", lineno + 1))
                        })?;
                        if one_based == 0 {
                            return Err(parse_err(
                                "obj",
                                format!("line {}: zero face index", lineno + 1),
                            ));
                        }
                        *slot = one_based - 1;
                    }
                    faces.push(idx);
                }
                _ => {}
            }
        }
        Ok(TriMesh { vertices, faces })
    }
}

/// Squared distance from a point to a triangle (closest-point construction).
pub fn point_triangle_distance_sq<S: Real>(p: Vec3<S>, a: Vec3<S>, b: Vec3<S>, c: Vec3<S>) -> S {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= S::zero() && d2 <= S::zero() {
        return ap.norm_sq();
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= S::zero() && d4 <= d3 {
        return bp.norm_sq();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= S::zero() && d1 >= S::zero() && d3 <= S::zero() {
        let v = d1 / (d1 - d3);
        return (ap - ab * v).norm_sq();
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= S::zero() && d5 <= d6 {
        return cp.norm_sq();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= S::zero() && d2 >= S::zero() && d6 <= S::zero() {
        let w = d2 / (d2 - d6);
        return (ap - ac * w).norm_sq();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= S::zero() && (d4 - d3) >= S::zero() && (d5 - d6) >= S::zero() {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (bp - (c - b) * w).norm_sq();
    }
    let denom = S::one() / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (ap - (ab * v + ac * w)).norm_sq()
}

/// Moller-Trumbore ray/triangle intersection; returns t or None.
pub fn ray_triangle<S: Real>(
    origin: Vec3<S>,
    dir: Vec3<S>,
    a: Vec3<S>,
    b: Vec3<S>,
    c: Vec3<S>,
) -> Option<S> {
    let e1 = b - a;
    let e2 = c - a;
    let pv = dir.cross(e2);
    let det = e1.dot(pv);
    if det.abs() < S::of(1e-12) {
        return None;
    }
    let inv = S::one() / det;
    let tv = origin - a;
    let u = tv.dot(pv) * inv;
    if u < S::zero() || u > S::one() {
        return None;
    }
    let qv = tv.cross(e1);
    let v = dir.dot(qv) * inv;
    if v < S::zero() || u + v > S::one() {
        return None;
    }
    let t = e2.dot(qv) * inv;
    if t > S::zero() {
        Some(t)
    } else {
        None
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}
