//! Graspable object primitives: triangulated surface meshes plus implicit
//! inside/outside functions used by the grasp search.

use crate::math::{vec3, Mat3, Vec3};
use crate::mesh::TriMesh;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Sphere,
    Box,
    Cylinder,
    Superellipsoid,
}

impl PrimitiveKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sphere" => Some(PrimitiveKind::Sphere),
            "box" => Some(PrimitiveKind::Box),
            "cylinder" => Some(PrimitiveKind::Cylinder),
            "superellipsoid" => Some(PrimitiveKind::Superellipsoid),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Sphere => "sphere",
            PrimitiveKind::Box => "box",
            PrimitiveKind::Cylinder => "cylinder",
            PrimitiveKind::Superellipsoid => "superellipsoid",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ObjectSpec<S> {
    pub kind: PrimitiveKind,
    /// Semi-axes in meters. Sphere uses x as radius; cylinder uses x as
    /// radius and z as half-height; box and superellipsoid use all three.
    pub size: Vec3<S>,
    /// Superellipsoid exponents (e1: polar, e2: equatorial); ignored by the
    /// other primitives. 1 = ellipsoid, toward 0 = boxier.
    pub exponents: (S, S),
    pub rotation: Mat3<S>,
    pub translation: Vec3<S>,
    pub albedo: [S; 3],
}

impl<S: Real> ObjectSpec<S> {
    pub fn sphere(radius: f64) -> Self {
        ObjectSpec {
            kind: PrimitiveKind::Sphere,
            size: Vec3::splat(S::of(radius)),
            ..Self::base()
        }
    }

    pub fn cuboid(half: Vec3<S>) -> Self {
        ObjectSpec {
            kind: PrimitiveKind::Box,
            size: half,
            ..Self::base()
        }
    }

    pub fn cylinder(radius: f64, half_height: f64) -> Self {
        ObjectSpec {
            kind: PrimitiveKind::Cylinder,
            size: Vec3::of(radius, radius, half_height),
            ..Self::base()
        }
    }

    pub fn superellipsoid(half: Vec3<S>, e1: f64, e2: f64) -> Self {
        ObjectSpec {
            kind: PrimitiveKind::Superellipsoid,
            size: half,
            exponents: (S::of(e1), S::of(e2)),
            ..Self::base()
        }
    }

    fn base() -> Self {
        ObjectSpec {
            kind: PrimitiveKind::Sphere,
            size: Vec3::splat(S::of(0.03)),
            exponents: (S::of(0.8), S::of(0.8)),
            rotation: Mat3::identity(),
            translation: Vec3::zero(),
            albedo: [S::of(0.25), S::of(0.45), S::of(0.80)],
        }
    }

    pub fn with_pose(mut self, rotation: Mat3<S>, translation: Vec3<S>) -> Self {
        self.rotation = rotation;
        self.translation = translation;
        self
    }

    pub fn with_albedo(mut self, albedo: [S; 3]) -> Self {
        self.albedo = albedo;
        self
    }

    /// Triangulated, posed surface mesh. Closed for every primitive.
    pub fn mesh(&self) -> TriMesh<S> {
        let local = match self.kind {
            PrimitiveKind::Sphere => lat_long_mesh(16, 24, |eta: S, omega: S| {
                let r = self.size.x;
                vec3(
                    r * eta.cos() * omega.cos(),
                    r * eta.cos() * omega.sin(),
                    r * eta.sin(),
                )
            }),
            PrimitiveKind::Box => TriMesh::cuboid(self.size),
            PrimitiveKind::Cylinder => cylinder_mesh(self.size.x, self.size.z, 24),
            PrimitiveKind::Superellipsoid => {
                let (e1, e2) = self.exponents;
                let s = self.size;
                lat_long_mesh(16, 24, move |eta: S, omega: S| {
                    vec3(
                        s.x * spow(eta.cos(), e1) * spow(omega.cos(), e2),
                        s.y * spow(eta.cos(), e1) * spow(omega.sin(), e2),
                        s.z * spow(eta.sin(), e1),
                    )
                })
            }
        };
        local
            .rotated(&self.rotation)
            .translated(self.translation)
    }

    /// Negative inside, positive outside. Exact metric distance for sphere,
    /// box, and cylinder; for the superellipsoid a scaled inside-outside
    /// value whose sign is exact.
    pub fn signed_distance(&self, p_world: Vec3<S>) -> S {
        let p = self
            .rotation
            .transpose()
            .mul_vec(p_world - self.translation);
        match self.kind {
            PrimitiveKind::Sphere => p.norm() - self.size.x,
            PrimitiveKind::Box => {
                let q = vec3(
                    p.x.abs() - self.size.x,
                    p.y.abs() - self.size.y,
                    p.z.abs() - self.size.z,
                );
                let outside = vec3(
                    q.x.max(S::zero()),
                    q.y.max(S::zero()),
                    q.z.max(S::zero()),
                )
                .norm();
                outside + q.x.max(q.y).max(q.z).min(S::zero())
            }
            PrimitiveKind::Cylinder => {
                let radial = (p.x * p.x + p.y * p.y).sqrt() - self.size.x;
                let axial = p.z.abs() - self.size.z;
                let ro = radial.max(S::zero());
                let ao = axial.max(S::zero());
                (ro * ro + ao * ao).sqrt() + radial.max(axial).min(S::zero())
            }
            PrimitiveKind::Superellipsoid => {
                let (e1, e2) = self.exponents;
                let two = S::of(2.0);
                let f = ((p.x / self.size.x).abs().powf(two / e2)
                    + (p.y / self.size.y).abs().powf(two / e2))
                .powf(e2 / e1)
                    + (p.z / self.size.z).abs().powf(two / e1);
                let scale = self.size.x.min(self.size.y).min(self.size.z);
                (f.powf(e1 / two) - S::one()) * scale
            }
        }
    }

    /// Farthest surface extent from the object center along `dir` (support
    /// width), measured on the mesh.
    pub fn support(&self, mesh: &TriMesh<S>, dir: Vec3<S>) -> S {
        mesh.vertices
            .iter()
            .map(|&v| (v - self.translation).dot(dir))
            .fold(S::zero(), |a, b| a.max(b))
    }
}

/// Signed power: sign(v) * |v|^e, the superellipsoid parametrization helper.
fn spow<S: Real>(v: S, e: S) -> S {
    if v == S::zero() {
        S::zero()
    } else {
        v.signum() * v.abs().powf(e)
    }
}

/// Closed latitude/longitude grid surface with welded poles.
fn lat_long_mesh<S: Real>(
    rings: usize,
    sectors: usize,
    surface: impl Fn(S, S) -> Vec3<S>,
) -> TriMesh<S> {
    let half_pi = S::of(std::f64::consts::FRAC_PI_2);
    let tau = S::of(std::f64::consts::TAU);
    let mut vertices = Vec::new();
    // Interior rings; eta in (-pi/2, pi/2).
    for i in 1..rings {
        let eta = -half_pi + S::of(i as f64 / rings as f64) * S::of(std::f64::consts::PI);
        for j in 0..sectors {
            let omega = S::of(j as f64 / sectors as f64) * tau - S::of(std::f64::consts::PI);
            vertices.push(surface(eta, omega));
        }
    }
    let south = vertices.len() as u32;
    vertices.push(surface(-half_pi, S::zero()));
    let north = vertices.len() as u32;
    vertices.push(surface(half_pi, S::zero()));

    let mut faces = Vec::new();
    let ring = |i: usize, j: usize| ((i - 1) * sectors + (j % sectors)) as u32;
    for j in 0..sectors {
        faces.push([south, ring(1, j + 1), ring(1, j)]);
        faces.push([north, ring(rings - 1, j), ring(rings - 1, j + 1)]);
    }
    for i in 1..rings - 1 {
        for j in 0..sectors {
            let (a, b) = (ring(i, j), ring(i, j + 1));
            let (c, d) = (ring(i + 1, j), ring(i + 1, j + 1));
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    TriMesh::new(vertices, faces)
}

fn cylinder_mesh<S: Real>(radius: S, half_height: S, sectors: usize) -> TriMesh<S> {
    let tau = S::of(std::f64::consts::TAU);
    let mut vertices = Vec::new();
    for &z in &[-half_height, half_height] {
        for j in 0..sectors {
            let a = S::of(j as f64 / sectors as f64) * tau;
            vertices.push(vec3(radius * a.cos(), radius * a.sin(), z));
        }
    }
    let bottom_center = vertices.len() as u32;
    vertices.push(vec3(S::zero(), S::zero(), -half_height));
    let top_center = vertices.len() as u32;
    vertices.push(vec3(S::zero(), S::zero(), half_height));

    let mut faces = Vec::new();
    let s = sectors as u32;
    for j in 0..s {
        let jn = (j + 1) % s;
        // Side quad between rings (bottom ring indices 0.., top ring s..).
        faces.push([j, jn, s + jn]);
        faces.push([j, s + jn, s + j]);
        faces.push([bottom_center, jn, j]);
        faces.push([top_center, s + j, s + jn]);
    }
    TriMesh::new(vertices, faces)
}
