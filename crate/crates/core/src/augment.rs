//! Seeded augmentations: geometric (rotation, translation, isotropic scale), intensity noise
//! and local blur ("edge dropout").

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::synthgen::{matrix_rows, PhantomSpec};
use crate::volume::{gaussian_blur_f64, Volume3, VolumeKind, WorldPoint};

/// Symmetric ranges for geometric draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoRanges {
    /// Each Euler angle is drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Each translation component is drawn from `[-translation_mm, translation_mm]`.
    pub translation_mm: f64,
    pub scale: (f64, f64),
}

impl GeoRanges {
    /// ±150°, ±40 mm, scale 0.7–1.
    pub const STANDARD: GeoRanges = GeoRanges { rotation_deg: 150.0, translation_mm: 40.0, scale: (0.7, 1.0) };
}

impl Default for GeoRanges {
    fn default() -> Self {
        Self::STANDARD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoParams {
    pub rotation_deg: [f64; 3],
    pub translation_mm: [f64; 3],
    pub scale: f64,
}

impl GeoParams {
    pub const IDENTITY: GeoParams = GeoParams { rotation_deg: [0.0; 3], translation_mm: [0.0; 3], scale: 1.0 };

    /// `Rz · Ry · Rx` with the angles in `rotation_deg = [x, y, z]`.
    pub fn rotation(&self) -> Matrix3<f64> {
        let [ax, ay, az] = self.rotation_deg.map(f64::to_radians);
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), az);
        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), ay);
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), ax);
        *(rz * ry * rx).matrix()
    }

    /// `p ↦ R·s·(p − pivot) + pivot + t`.
    pub fn transform_point(&self, p: WorldPoint, pivot: WorldPoint) -> WorldPoint {
        let d = Vector3::from((p - pivot).to_array());
        let q = self.rotation() * d * self.scale;
        WorldPoint::new(q.x, q.y, q.z) + pivot + WorldPoint::from_array(self.translation_mm)
    }

    pub fn inverse_transform_point(&self, p: WorldPoint, pivot: WorldPoint) -> WorldPoint {
        let d = Vector3::from((p - pivot - WorldPoint::from_array(self.translation_mm)).to_array());
        let q = self.rotation().transpose() * d / self.scale;
        WorldPoint::new(q.x, q.y, q.z) + pivot
    }
}

/// Uniform draw within [`GeoRanges::STANDARD`].
pub fn draw_geo(seed: u64) -> GeoParams {
    draw_geo_in(&GeoRanges::STANDARD, &mut seeds::rng(seed))
}

pub fn draw_geo_in(ranges: &GeoRanges, rng: &mut impl Rng) -> GeoParams {
    fn sym<R: Rng + ?Sized>(rng: &mut R, h: f64) -> f64 {
        if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 }
    }
    let rotation_deg = std::array::from_fn(|_| sym(rng, ranges.rotation_deg));
    let translation_mm = std::array::from_fn(|_| sym(rng, ranges.translation_mm));
    let (lo, hi) = ranges.scale;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    GeoParams { rotation_deg, translation_mm, scale }
}

/// Moves every part by the transform of [`GeoParams::transform_point`]: centers are mapped,
/// radii scaled and part rotations pre-multiplied by `R`.
pub fn apply_geo_to_spec(spec: &PhantomSpec, g: &GeoParams, pivot: WorldPoint) -> PhantomSpec {
    let r = g.rotation();
    let parts = spec
        .parts
        .iter()
        .map(|p| {
            let mut out = p.clone();
            out.center = g.transform_point(WorldPoint::from_array(p.center), pivot).to_array();
            out.radii = p.radii.map(|x| x * g.scale);
            out.rotation = matrix_rows(&(r * p.rotation_matrix()));
            out
        })
        .collect();
    PhantomSpec { parts, seed: spec.seed }
}

/// Voxel-grid version of the geometric transform for inputs without an analytic spec:
/// `out(q) = in(T⁻¹ q)` by trilinear interpolation, `fill` outside the source grid, binary
/// kinds re-binarized at 0.5.
pub fn warp_volume(vol: &Volume3, g: &GeoParams, fill: f32) -> Result<Volume3> {
    let pivot = vol.center();
    let (lo, hi) = vol.bounds();
    let binary = vol.kind().is_binary();
    Volume3::from_fn(vol.dims(), vol.spacing(), vol.kind(), |i, j, k| {
        let src = g.inverse_transform_point(vol.world_of(i, j, k), pivot);
        let inside = (0..3).all(|a| src.to_array()[a] >= lo.to_array()[a] && src.to_array()[a] <= hi.to_array()[a]);
        if !inside {
            return fill;
        }
        let v = vol.sample_clamped(src);
        if binary {
            if v >= 0.5 { 1.0 } else { 0.0 }
        } else {
            v as f32
        }
    })
}

/// `clamp(v·(1 + η_s) + η_g, 0, 1)` per voxel with `η_s ~ N(0, speckle²)`,
/// `η_g ~ N(0, gauss²)`. Binary and intensity inputs come back as intensity volumes.
pub fn noise_inject(vol: &Volume3, gauss_sigma: f64, speckle_sigma: f64, seed: u64) -> Result<Volume3> {
    if !(gauss_sigma >= 0.0 && speckle_sigma >= 0.0) {
        return Err(Error::Domain("noise sigmas must be >= 0".into()));
    }
    if gauss_sigma == 0.0 && speckle_sigma == 0.0 {
        return Ok(vol.clone());
    }
    let ns = Normal::new(0.0, speckle_sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let ng = Normal::new(0.0, gauss_sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = seeds::rng(seed);
    let data = vol
        .data()
        .iter()
        .map(|v| {
            let s = ns.sample(&mut rng);
            let g = ng.sample(&mut rng);
            (*v as f64 * (1.0 + s) + g).clamp(0.0, 1.0) as f32
        })
        .collect();
    let kind = match vol.kind() {
        k @ (VolumeKind::EdgeMap | VolumeKind::Occupancy) => k,
        _ => VolumeKind::Intensity,
    };
    Ok(Volume3::from_parts(vol.dims(), vol.spacing(), kind, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutRegion {
    pub center: WorldPoint,
    pub radius_mm: f64,
}

impl DropoutRegion {
    /// Open ball: a zero radius contains nothing.
    pub fn contains(&self, p: WorldPoint) -> bool {
        p.distance(self.center) < self.radius_mm
    }
}

/// `n` regions with centers uniform in the bounding box and radii uniform in `radius_range`.
pub fn random_regions(vol: &Volume3, n: usize, radius_range: (f64, f64), rng: &mut impl Rng) -> Vec<DropoutRegion> {
    let (lo, hi) = vol.bounds();
    (0..n)
        .map(|_| {
            let c: [f64; 3] = std::array::from_fn(|a| rng.random_range(lo.to_array()[a]..=hi.to_array()[a]));
            let (r0, r1) = radius_range;
            let radius_mm = if r1 > r0 { rng.random_range(r0..=r1) } else { r0 };
            DropoutRegion { center: WorldPoint::from_array(c), radius_mm }
        })
        .collect()
}

/// Replaces values inside the regions by the Gaussian-blurred field; voxels outside every
/// region keep their exact bits.
pub fn edge_dropout_regions(vol: &Volume3, regions: &[DropoutRegion], blur_sigma_mm: f64) -> Volume3 {
    let inside: Vec<usize> = (0..vol.len())
        .filter(|&idx| {
            let [i, j, k] = vol.coords(idx);
            let p = vol.world_of(i, j, k);
            regions.iter().any(|r| r.contains(p))
        })
        .collect();
    if inside.is_empty() {
        return vol.clone();
    }
    let blurred = gaussian_blur_f64(&vol.values_f64(), vol.dims(), vol.spacing(), blur_sigma_mm);
    let mut data = vol.data().to_vec();
    for idx in inside {
        data[idx] = blurred[idx] as f32;
    }
    // Convex averaging keeps binary inputs within [0, 1] but not binary.
    let kind = if vol.kind().is_binary() { VolumeKind::Occupancy } else { vol.kind() };
    Volume3::from_parts(vol.dims(), vol.spacing(), kind, data)
}

pub fn edge_dropout(
    vol: &Volume3,
    n_regions: usize,
    radius_range_mm: (f64, f64),
    blur_sigma_mm: f64,
    seed: u64,
) -> Result<Volume3> {
    if n_regions == 0 {
        return Err(Error::Domain("edge_dropout needs at least one region".into()));
    }
    let regions = random_regions(vol, n_regions, radius_range_mm, &mut seeds::rng(seed));
    Ok(edge_dropout_regions(vol, &regions, blur_sigma_mm))
}
