//! Small fixed-size linear algebra used throughout: 3-vectors, 3x3 matrices,
//! axis-aligned boxes.

use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub, SubAssign};

use crate::scalar::Real;

#[derive(Clone, Copy, PartialEq, Default, Debug)]
pub struct Vec3<S> {
    pub x: S,
    pub y: S,
    pub z: S,
}

pub fn vec3<S>(x: S, y: S, z: S) -> Vec3<S> {
    Vec3 { x, y, z }
}

impl<S: Real> Vec3<S> {
    pub const fn new(x: S, y: S, z: S) -> Self {
        Vec3 { x, y, z }
    }

    pub fn splat(v: S) -> Self {
        Vec3 { x: v, y: v, z: v }
    }

    pub fn zero() -> Self {
        Self::splat(S::zero())
    }

    pub fn of(x: f64, y: f64, z: f64) -> Self {
        Vec3 {
            x: S::of(x),
            y: S::of(y),
            z: S::of(z),
        }
    }

    pub fn dot(self, o: Self) -> S {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Vec3 {
            x: self.y * o.z - self.z * o.y,
            y: self.z * o.x - self.x * o.z,
            z: self.x * o.y - self.y * o.x,
        }
    }

    pub fn norm_sq(self) -> S {
        self.dot(self)
    }

    pub fn norm(self) -> S {
        self.norm_sq().sqrt()
    }

    pub fn normalized(self) -> Self {
        self / self.norm()
    }

    pub fn min_comp(self, o: Self) -> Self {
        Vec3 {
            x: self.x.min(o.x),
            y: self.y.min(o.y),
            z: self.z.min(o.z),
        }
    }

    pub fn max_comp(self, o: Self) -> Self {
        Vec3 {
            x: self.x.max(o.x),
            y: self.y.max(o.y),
            z: self.z.max(o.z),
        }
    }

    pub fn mul_comp(self, o: Self) -> Self {
        Vec3 {
            x: self.x * o.x,
            y: self.y * o.y,
            z: self.z * o.z,
        }
    }

    pub fn to_array(self) -> [S; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [S; 3]) -> Self {
        Vec3 {
            x: a[0],
            y: a[1],
            z: a[2],
        }
    }

    pub fn map<T: Real>(self, f: impl Fn(S) -> T) -> Vec3<T> {
        Vec3 {
            x: f(self.x),
            y: f(self.y),
            z: f(self.z),
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl<S: Real> Index<usize> for Vec3<S> {
    type Output = S;

    fn index(&self, i: usize) -> &S {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl<S: Real> Add for Vec3<S> {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Vec3 {
            x: self.x + o.x,
            y: self.y + o.y,
            z: self.z + o.z,
        }
    }
}

impl<S: Real> Sub for Vec3<S> {
    type Output = Self;

    fn sub(self, o: Self) -> Self {
        Vec3 {
            x: self.x - o.x,
            y: self.y - o.y,
            z: self.z - o.z,
        }
    }
}

impl<S: Real> Neg for Vec3<S> {
    type Output = Self;

    fn neg(self) -> Self {
        Vec3 {
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

impl<S: Real> Mul<S> for Vec3<S> {
    type Output = Self;

    fn mul(self, s: S) -> Self {
        Vec3 {
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
        }
    }
}

impl<S: Real> Div<S> for Vec3<S> {
    type Output = Self;

    fn div(self, s: S) -> Self {
        Vec3 {
            x: self.x / s,
            y: self.y / s,
            z: self.z / s,
        }
    }
}

impl<S: Real> AddAssign for Vec3<S> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<S: Real> SubAssign for Vec3<S> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct Mat3<S> {
    pub rows: [[S; 3]; 3],
}

impl<S: Real> Mat3<S> {
    pub fn from_rows(r0: [S; 3], r1: [S; 3], r2: [S; 3]) -> Self {
        Mat3 { rows: [r0, r1, r2] }
    }

    pub fn identity() -> Self {
        let (o, z) = (S::one(), S::zero());
        Mat3 {
            rows: [[o, z, z], [z, o, z], [z, z, o]],
        }
    }

    pub fn row(&self, i: usize) -> Vec3<S> {
        Vec3::from_array(self.rows[i])
    }

    pub fn col(&self, j: usize) -> Vec3<S> {
        vec3(self.rows[0][j], self.rows[1][j], self.rows[2][j])
    }

    pub fn transpose(&self) -> Self {
        Mat3 {
            rows: [
                self.col(0).to_array(),
                self.col(1).to_array(),
                self.col(2).to_array(),
            ],
        }
    }

    pub fn mul_vec(&self, v: Vec3<S>) -> Vec3<S> {
        vec3(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut rows = [[S::zero(); 3]; 3];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.row(i).dot(o.col(j));
            }
        }
        Mat3 { rows }
    }

    pub fn rotation_x(a: S) -> Self {
        let (s, c) = (a.sin(), a.cos());
        let (o, z) = (S::one(), S::zero());
        Mat3 {
            rows: [[o, z, z], [z, c, -s], [z, s, c]],
        }
    }

    pub fn rotation_y(a: S) -> Self {
        let (s, c) = (a.sin(), a.cos());
        let (o, z) = (S::one(), S::zero());
        Mat3 {
            rows: [[c, z, s], [z, o, z], [-s, z, c]],
        }
    }

    pub fn rotation_z(a: S) -> Self {
        let (s, c) = (a.sin(), a.cos());
        let (o, z) = (S::one(), S::zero());
        Mat3 {
            rows: [[c, -s, z], [s, c, z], [z, z, o]],
        }
    }

    /// Rz(yaw) * Ry(pitch) * Rx(roll).
    pub fn rotation_zyx(roll: S, pitch: S, yaw: S) -> Self {
        Self::rotation_z(yaw)
            .mul_mat(&Self::rotation_y(pitch))
            .mul_mat(&Self::rotation_x(roll))
    }

    pub fn is_orthonormal(&self, tol: S) -> bool {
        let t = self.mul_mat(&self.transpose());
        let id = Self::identity();
        for i in 0..3 {
            for j in 0..3 {
                if (t.rows[i][j] - id.rows[i][j]).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Axis-aligned box, `min` inclusive, `max` inclusive.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct Aabb<S> {
    pub min: Vec3<S>,
    pub max: Vec3<S>,
}

impl<S: Real> Aabb<S> {
    pub fn new(min: Vec3<S>, max: Vec3<S>) -> Self {
        Aabb { min, max }
    }

    pub fn from_points(points: impl IntoIterator<Item = Vec3<S>>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = Aabb {
            min: first,
            max: first,
        };
        for p in it {
            b.min = b.min.min_comp(p);
            b.max = b.max.max_comp(p);
        }
        Some(b)
    }

    pub fn expanded(&self, margin: S) -> Self {
        let m = Vec3::splat(margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }

    pub fn union(&self, o: &Self) -> Self {
        Aabb {
            min: self.min.min_comp(o.min),
            max: self.max.max_comp(o.max),
        }
    }

    pub fn center(&self) -> Vec3<S> {
        (self.min + self.max) * S::of(0.5)
    }

    pub fn extent(&self) -> Vec3<S> {
        self.max - self.min
    }

    pub fn contains(&self, p: Vec3<S>) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// Entry/exit parameters of `origin + t*dir` against the box (slab test).
    /// Returns None on a miss; the hit interval is clamped to t >= 0.
    pub fn clip_ray(&self, origin: Vec3<S>, dir: Vec3<S>) -> Option<(S, S)> {
        let mut t0 = S::zero();
        let mut t1 = S::infinity();
        for axis in 0..3 {
            let (o, d) = (origin[axis], dir[axis]);
            let (lo, hi) = (self.min[axis], self.max[axis]);
            if d.abs() < S::of(1e-12) {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let inv = S::one() / d;
            let (mut ta, mut tb) = ((lo - o) * inv, (hi - o) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}
