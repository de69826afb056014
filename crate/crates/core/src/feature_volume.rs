//! Sparse voxel feature volume: hand face centroids and mask-consistent
//! object voxels carry concatenated [image feature; positional encoding;
//! identity code] vectors; everything else is implicitly zero.
//!
//! Voxel assignment is a strict precedence: a voxel containing a hand face
//! centroid takes the hand feature even when its projection also lands in
//! the object mask; otherwise a voxel whose projected nearest pixel is
//! labeled object takes the object feature; otherwise the voxel is absent.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Camera, PositionalEncoding};
use crate::image_encoder::FeatureMap;
use crate::math::{vec3, Aabb, Mat3, Vec3};
use crate::raster::{Label, LabelMask};
use crate::rng::{gaussian, stream, StreamTag};
use crate::scalar::Real;
use crate::scene::hand::{HandMesh, NUM_FACES};

/// Edge length of a voxel (meters).
pub const DEFAULT_VOXEL_SIZE: f64 = 0.005;
/// Margin added around the hand-centroid bounds.
pub const DEFAULT_MARGIN: f64 = 0.25;
/// Dimension of the per-face and object identity codes.
pub const CODE_DIM: usize = 16;
/// Training-time rotation augmentation cap per axis (radians).
pub const ROTATION_CAP: f64 = std::f64::consts::PI / 10.0;
/// Default object-point jitter (meters, one voxel).
pub const DEFAULT_SIGMA_NOISE: f64 = 0.005;

/// Fixed random identity codes: one per hand face plus one shared object
/// code, drawn from a unit Gaussian at construction and never mutated.
#[derive(Clone, Debug)]
pub struct CodeBook<S> {
    face_codes: Vec<S>,
    object_code: Vec<S>,
    pub seed: u64,
}

impl<S: Real> CodeBook<S> {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream(seed, StreamTag::Codes, 0);
        let face_codes = (0..NUM_FACES * CODE_DIM)
            .map(|_| S::of(gaussian(&mut rng)))
            .collect();
        let object_code = (0..CODE_DIM).map(|_| S::of(gaussian(&mut rng))).collect();
        CodeBook {
            face_codes,
            object_code,
            seed,
        }
    }

    pub fn face_code(&self, face: usize) -> &[S] {
        &self.face_codes[face * CODE_DIM..(face + 1) * CODE_DIM]
    }

    pub fn object_code(&self) -> &[S] {
        &self.object_code
    }
}

/// Which branch produced an entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntrySource {
    HandFace(u32),
    Object,
}

/// Sparse voxel grid of concatenated features, stored row-flat with a
/// coordinate index. Row order is the deterministic assembly order: hand
/// faces ascending, then object voxels in z-major scan order.
#[derive(Clone, Debug)]
pub struct SparseFeatureVolume<S> {
    pub origin: Vec3<S>,
    pub voxel_size: S,
    pub dims: [usize; 3],
    /// Total per-entry feature dimension.
    pub feature_dim: usize,
    /// Length of the leading image-feature span within a row.
    pub image_dim: usize,
    coords: Vec<[u16; 3]>,
    features: Vec<S>,
    sources: Vec<EntrySource>,
    positions: Vec<Vec3<S>>,
    index: BTreeMap<[u16; 3], u32>,
}

impl<S: Real> SparseFeatureVolume<S> {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coord(&self, row: usize) -> [u16; 3] {
        self.coords[row]
    }

    pub fn feature(&self, row: usize) -> &[S] {
        &self.features[row * self.feature_dim..(row + 1) * self.feature_dim]
    }

    pub fn source(&self, row: usize) -> EntrySource {
        self.sources[row]
    }

    pub fn position(&self, row: usize) -> Vec3<S> {
        self.positions[row]
    }

    pub fn row_at(&self, coord: [u16; 3]) -> Option<usize> {
        self.index.get(&coord).map(|&r| r as usize)
    }

    pub fn coords(&self) -> &[[u16; 3]] {
        &self.coords
    }

    /// Voxel coordinate containing a point, or None outside the grid.
    pub fn voxel_of(&self, p: Vec3<S>) -> Option<[u16; 3]> {
        let rel = (p - self.origin) / self.voxel_size;
        let mut out = [0u16; 3];
        for (axis, &r) in [rel.x, rel.y, rel.z].iter().enumerate() {
            let i = r.floor().f64();
            if i < 0.0 || i >= self.dims[axis] as f64 {
                return None;
            }
            out[axis] = i as u16;
        }
        Some(out)
    }

    /// World-space center of a voxel.
    pub fn center_of(&self, coord: [u16; 3]) -> Vec3<S> {
        let half = S::of(0.5);
        self.origin
            + vec3(
                (S::of(coord[0] as f64) + half) * self.voxel_size,
                (S::of(coord[1] as f64) + half) * self.voxel_size,
                (S::of(coord[2] as f64) + half) * self.voxel_size,
            )
    }

    /// Center of the whole grid, the rotation-augmentation pivot.
    pub fn grid_center(&self) -> Vec3<S> {
        let half = S::of(0.5);
        self.origin
            + vec3(
                S::of(self.dims[0] as f64) * self.voxel_size * half,
                S::of(self.dims[1] as f64) * self.voxel_size * half,
                S::of(self.dims[2] as f64) * self.voxel_size * half,
            )
    }

    /// Point mapped into [-1, 1] per axis across the grid extent, the
    /// domain of the positional-encoding components.
    pub fn normalize(&self, p: Vec3<S>) -> Vec3<S> {
        let two = S::of(2.0);
        let one = S::one();
        let rel = p - self.origin;
        vec3(
            two * rel.x / (S::of(self.dims[0] as f64) * self.voxel_size) - one,
            two * rel.y / (S::of(self.dims[1] as f64) * self.voxel_size) - one,
            two * rel.z / (S::of(self.dims[2] as f64) * self.voxel_size) - one,
        )
    }
}

/// Axis-aligned bounds of the hand-face centroids expanded by `margin` on
/// every side.
pub fn compute_bounds<S: Real>(hand: &HandMesh<S>, margin: S) -> Aabb<S> {
    let centroids = hand.face_centroids();
    Aabb::from_points(centroids.iter().copied())
        .expect("hand mesh has at least one face")
        .expanded(margin)
}

/// Grid size covering `bounds` at the given voxel edge length.
pub fn dims_for<S: Real>(bounds: &Aabb<S>, voxel_size: S) -> [usize; 3] {
    let e = bounds.extent();
    [e.x, e.y, e.z].map(|x| (x / voxel_size).f64().ceil().max(1.0) as usize)
}

fn pe_for_coordinates() -> PositionalEncoding {
    PositionalEncoding::for_coordinates()
}

/// Per-entry feature dimension for a given image-feature channel count.
pub fn feature_dim_for(image_channels: usize) -> usize {
    image_channels + pe_for_coordinates().output_dim(3) + CODE_DIM
}

struct VolumeBuilder<S> {
    volume: SparseFeatureVolume<S>,
    pe: PositionalEncoding,
}

impl<S: Real> VolumeBuilder<S> {
    fn new(bounds: &Aabb<S>, voxel_size: S, image_dim: usize) -> Self {
        let dims = dims_for(bounds, voxel_size);
        VolumeBuilder {
            volume: SparseFeatureVolume {
                origin: bounds.min,
                voxel_size,
                dims,
                feature_dim: feature_dim_for(image_dim),
                image_dim,
                coords: Vec::new(),
                features: Vec::new(),
                sources: Vec::new(),
                positions: Vec::new(),
                index: BTreeMap::new(),
            },
            pe: pe_for_coordinates(),
        }
    }

    /// Appends an entry unless the voxel is taken; callers insert in
    /// precedence order, so an occupied voxel always keeps higher priority.
    fn push(
        &mut self,
        coord: [u16; 3],
        source: EntrySource,
        position: Vec3<S>,
        image_feat: &[S],
        code: &[S],
    ) -> bool {
        use std::collections::btree_map::Entry;
        let row = self.volume.coords.len() as u32;
        match self.volume.index.entry(coord) {
            Entry::Occupied(_) => return false,
            Entry::Vacant(v) => v.insert(row),
        };
        self.volume.coords.push(coord);
        self.volume.sources.push(source);
        self.volume.positions.push(position);
        let n = self.volume.normalize(position);
        let f = &mut self.volume.features;
        f.extend_from_slice(image_feat);
        self.pe.encode_into(&n.to_array(), f);
        f.extend_from_slice(code);
        debug_assert_eq!(f.len(), self.volume.coords.len() * self.volume.feature_dim);
        true
    }
}

/// Rasterizes one view into the sparse feature volume.
///
/// Hand branch: each face centroid claims its voxel (lowest face index wins
/// a shared voxel) and stores the image feature sampled at the centroid's
/// projection, the encoded centroid position, and the face code. Object
/// branch: every remaining voxel whose center projects onto an object-mask
/// pixel stores the image feature at that projection, its own encoded
/// center, and the shared object code.
pub fn assemble_volume<S: Real>(
    hand: &HandMesh<S>,
    mask: &LabelMask,
    camera: &Camera<S>,
    fmap: &FeatureMap<S>,
    codes: &CodeBook<S>,
    bounds: &Aabb<S>,
    voxel_size: S,
) -> Result<SparseFeatureVolume<S>> {
    let mut b = VolumeBuilder::new(bounds, voxel_size, fmap.channels);
    let mut image_feat = vec![S::zero(); fmap.channels];

    for (face, centroid) in hand.face_centroids().into_iter().enumerate() {
        let Some(coord) = b.volume.voxel_of(centroid) else {
            log::warn!("hand face {face} centroid outside volume bounds; skipped");
            continue;
        };
        sample_projection(camera, fmap, centroid, &mut image_feat);
        if !b.push(
            coord,
            EntrySource::HandFace(face as u32),
            centroid,
            &image_feat,
            codes.face_code(face),
        ) {
            log::debug!("face {face} shares a voxel; lower-index face kept");
        }
    }

    let dims = b.volume.dims;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let coord = [x as u16, y as u16, z as u16];
                if b.volume.index.contains_key(&coord) {
                    continue;
                }
                let center = b.volume.center_of(coord);
                let Some((px, py)) = camera.project_nearest_pixel(center) else {
                    continue;
                };
                if mask.get(px, py) != Label::Object as u8 {
                    continue;
                }
                sample_projection(camera, fmap, center, &mut image_feat);
                b.push(
                    coord,
                    EntrySource::Object,
                    center,
                    &image_feat,
                    codes.object_code(),
                );
            }
        }
    }

    if b.volume.is_empty() {
        return Err(Error::EmptyVolume);
    }
    Ok(b.volume)
}

/// Image feature at the continuous projection of `p`; zero when the point
/// is behind the camera or projects off the image.
pub(crate) fn sample_projection<S: Real>(
    camera: &Camera<S>,
    fmap: &FeatureMap<S>,
    p: Vec3<S>,
    out: &mut [S],
) {
    match camera.project_any(p) {
        Ok((u, v)) => fmap.sample_into(u, v, out),
        Err(_) => out.fill(S::zero()),
    }
}

/// Rebuilds a volume from (possibly moved) entry positions, keeping each
/// entry's image-feature and code spans and re-encoding its position. Hand
/// entries go first in face order, keeping assembly precedence; entries
/// leaving the bounds are dropped.
fn rerasterize<S: Real>(
    src: &SparseFeatureVolume<S>,
    moved: &[Vec3<S>],
) -> (SparseFeatureVolume<S>, Vec<usize>) {
    let bounds = Aabb {
        min: src.origin,
        max: src.origin
            + vec3(
                S::of(src.dims[0] as f64) * src.voxel_size,
                S::of(src.dims[1] as f64) * src.voxel_size,
                S::of(src.dims[2] as f64) * src.voxel_size,
            ),
    };
    let mut b = VolumeBuilder::new(&bounds, src.voxel_size, src.image_dim);
    // dims_for would re-derive from the synthetic bounds; keep the originals.
    b.volume.dims = src.dims;

    let code_start = src.feature_dim - CODE_DIM;
    let mut order: Vec<usize> = (0..src.len()).collect();
    order.sort_by_key(|&r| match src.source(r) {
        EntrySource::HandFace(f) => (0u8, f, r as u32),
        EntrySource::Object => (1u8, 0, r as u32),
    });
    let mut map = Vec::with_capacity(src.len());
    for r in order {
        let p = moved[r];
        let Some(coord) = b.volume.voxel_of(p) else {
            continue;
        };
        let row = src.feature(r);
        if b.push(
            coord,
            src.source(r),
            p,
            &row[..src.image_dim],
            &row[code_start..],
        ) {
            map.push(r);
        }
    }
    (b.volume, map)
}

/// Training augmentation: jitters every object entry's point by isotropic
/// Gaussian noise and re-rasterizes it; hand entries are untouched.
/// Deterministic in the seed.
pub fn perturb_object_entries<S: Real>(
    volume: &SparseFeatureVolume<S>,
    sigma_noise: S,
    seed: u64,
) -> SparseFeatureVolume<S> {
    perturb_object_entries_mapped(volume, sigma_noise, seed).0
}

/// [`perturb_object_entries`] plus the row provenance map: element r of the
/// map is the source row that became row r (entries leaving the bounds or
/// losing a voxel collision are absent). Gradient scatter back to the input
/// image needs this, since an entry's image feature was sampled at its
/// original, unmoved position.
pub fn perturb_object_entries_mapped<S: Real>(
    volume: &SparseFeatureVolume<S>,
    sigma_noise: S,
    seed: u64,
) -> (SparseFeatureVolume<S>, Vec<usize>) {
    let mut rng = stream(seed, StreamTag::Perturb, 0);
    let moved: Vec<Vec3<S>> = (0..volume.len())
        .map(|r| {
            let p = volume.position(r);
            match volume.source(r) {
                EntrySource::HandFace(_) => p,
                EntrySource::Object => {
                    let d = vec3(
                        S::of(gaussian(&mut rng)),
                        S::of(gaussian(&mut rng)),
                        S::of(gaussian(&mut rng)),
                    );
                    p + d * sigma_noise
                }
            }
        })
        .collect();
    rerasterize(volume, &moved)
}

/// Training augmentation: rotates every entry position about the grid
/// center and re-rasterizes. Positional encodings follow the moved points;
/// image features and codes ride along unchanged.
pub fn rotate_volume<S: Real>(
    volume: &SparseFeatureVolume<S>,
    angles: Vec3<S>,
) -> SparseFeatureVolume<S> {
    rotate_volume_mapped(volume, angles).0
}

/// [`rotate_volume`] plus the row provenance map (see
/// [`perturb_object_entries_mapped`]).
pub fn rotate_volume_mapped<S: Real>(
    volume: &SparseFeatureVolume<S>,
    angles: Vec3<S>,
) -> (SparseFeatureVolume<S>, Vec<usize>) {
    if angles.x == S::zero() && angles.y == S::zero() && angles.z == S::zero() {
        return (volume.clone(), (0..volume.len()).collect());
    }
    let r = Mat3::rotation_zyx(angles.x, angles.y, angles.z);
    let c = volume.grid_center();
    let moved: Vec<Vec3<S>> = (0..volume.len())
        .map(|i| c + r.mul_vec(volume.position(i) - c))
        .collect();
    rerasterize(volume, &moved)
}

/// Per-axis rotation angles for augmentation, uniform within the cap.
pub fn random_rotation_angles<S: Real>(seed: u64, index: u64) -> Vec3<S> {
    let mut rng = stream(seed, StreamTag::Rotate, index);
    let mut draw = || S::of(ROTATION_CAP * (2.0 * rng.gen::<f64>() - 1.0));
    vec3(draw(), draw(), draw())
}
