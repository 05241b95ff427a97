use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Mask,
    EdgeSet,
    EdgeMap,
    Intensity,
    Occupancy,
}

impl VolumeKind {
    pub const ALL: [VolumeKind; 5] =
        [Self::Mask, Self::EdgeSet, Self::EdgeMap, Self::Intensity, Self::Occupancy];

    pub fn is_binary(self) -> bool {
        matches!(self, Self::Mask | Self::EdgeSet)
    }

    fn admits(self, v: f32) -> bool {
        match self {
            Self::Mask | Self::EdgeSet => v == 0.0 || v == 1.0,
            Self::EdgeMap | Self::Occupancy => (0.0..=1.0).contains(&v),
            // Distances use +inf as the empty-edge-set sentinel.
            Self::Intensity => !v.is_nan(),
        }
    }
}

/// A point in millimetres. The origin is the center of voxel (0, 0, 0).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(self, other: Self) -> f64 {
        (self - other).norm()
    }
}

impl Add for WorldPoint {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for WorldPoint {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for WorldPoint {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

/// A scalar grid laid out x-fastest: `index = i + nx * (j + ny * k)`.
///
/// Values are stored as f32 (the file precision); sampling and filtering compute in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: Dims,
    spacing: Spacing,
    kind: VolumeKind,
    data: Vec<f32>,
}

impl Volume3 {
    pub fn new(dims: Dims, spacing: Spacing, kind: VolumeKind, data: Vec<f32>) -> Result<Self> {
        check_grid(dims, spacing)?;
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Domain(format!(
                "data length {} does not match dims {dims:?} ({n} voxels)",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !kind.admits(**v)) {
            return Err(Error::Domain(format!("value {bad} is not admissible for a {kind:?} volume")));
        }
        Ok(Self { dims, spacing, kind, data })
    }

    pub fn filled(dims: Dims, spacing: Spacing, kind: VolumeKind, value: f32) -> Result<Self> {
        Self::new(dims, spacing, kind, vec![value; dims.iter().product()])
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(
        dims: Dims,
        spacing: Spacing,
        kind: VolumeKind,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, kind, data)
    }

    /// Constructor for values produced by this crate whose invariants hold by construction.
    pub(crate) fn from_parts(dims: Dims, spacing: Spacing, kind: VolumeKind, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        debug_assert!(data.iter().all(|v| kind.admits(*v)), "{kind:?} invariant violated");
        Self { dims, spacing, kind, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn world_of(&self, i: usize, j: usize, k: usize) -> WorldPoint {
        WorldPoint::new(
            i as f64 * self.spacing[0],
            j as f64 * self.spacing[1],
            k as f64 * self.spacing[2],
        )
    }

    /// World bounding box: voxel centers extended by half a voxel on every side.
    pub fn bounds(&self) -> (WorldPoint, WorldPoint) {
        bounds_of(self.dims, self.spacing)
    }

    /// Geometric center of the bounding box.
    pub fn center(&self) -> WorldPoint {
        center_of(self.dims, self.spacing)
    }

    /// Re-tags the volume, re-checking the value invariant of the new kind.
    pub fn with_kind(self, kind: VolumeKind) -> Result<Self> {
        Self::new(self.dims, self.spacing, kind, self.data)
    }

    /// Applies `f` to every value and re-tags the result.
    pub fn map(&self, kind: VolumeKind, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.dims, self.spacing, kind, self.data.iter().map(|v| f(*v)).collect())
    }

    pub fn same_grid(&self, other: &Volume3) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn require_kind(&self, op: &'static str, expected: VolumeKind) -> Result<()> {
        if self.kind != expected {
            return Err(Error::Kind { op, expected, found: self.kind });
        }
        Ok(())
    }

    /// Trilinear interpolation at a world point inside the bounding box. Points in the
    /// half-voxel rim replicate the face values.
    pub fn trilinear_sample(&self, pt: WorldPoint) -> Result<f64> {
        let (lo, hi) = self.bounds();
        for (axis, (v, (l, h))) in
            ['x', 'y', 'z'].into_iter().zip(pt.to_array().into_iter().zip(lo.to_array().into_iter().zip(hi.to_array())))
        {
            if !(v >= l && v <= h) {
                return Err(Error::OutOfBounds { axis, value: v, lo: l, hi: h });
            }
        }
        Ok(self.sample_clamped(pt))
    }

    /// Trilinear interpolation with every coordinate clamped into the voxel-center range.
    pub fn sample_clamped(&self, pt: WorldPoint) -> f64 {
        let (base, t) = cell(self.dims, self.spacing, pt.to_array());
        let [nx, ny, _] = self.dims;
        let step = [
            usize::from(self.dims[0] > 1),
            nx * usize::from(self.dims[1] > 1),
            nx * ny * usize::from(self.dims[2] > 1),
        ];
        let o = base[0] + nx * (base[1] + ny * base[2]);
        let v = |dx: usize, dy: usize, dz: usize| self.data[o + dx * step[0] + dy * step[1] + dz * step[2]] as f64;
        let c00 = v(0, 0, 0) * (1.0 - t[0]) + v(1, 0, 0) * t[0];
        let c10 = v(0, 1, 0) * (1.0 - t[0]) + v(1, 1, 0) * t[0];
        let c01 = v(0, 0, 1) * (1.0 - t[0]) + v(1, 0, 1) * t[0];
        let c11 = v(0, 1, 1) * (1.0 - t[0]) + v(1, 1, 1) * t[0];
        let c0 = c00 * (1.0 - t[1]) + c10 * t[1];
        let c1 = c01 * (1.0 - t[1]) + c11 * t[1];
        c0 * (1.0 - t[2]) + c1 * t[2]
    }

    /// Nearest-voxel lookup with clamping.
    pub fn sample_nearest(&self, pt: WorldPoint) -> f32 {
        let p = pt.to_array();
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let g = (p[a] / self.spacing[a]).round();
            ijk[a] = g.clamp(0.0, (self.dims[a] - 1) as f64) as usize;
        }
        self.get(ijk[0], ijk[1], ijk[2])
    }

    /// Resamples onto a grid with `new_spacing` covering the same world extent
    /// `[-s/2, (n - 1/2) s]` per axis. Output voxel `i` samples the input at
    /// `(i + 1/2) s' - s/2`; binary kinds are re-binarized at 0.5.
    pub fn resample(&self, new_spacing: Spacing) -> Result<Volume3> {
        if new_spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Domain(format!("spacing must be positive, got {new_spacing:?}")));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let extent = self.dims[a] as f64 * self.spacing[a];
            dims[a] = (extent / new_spacing[a]).round() as usize;
            if dims[a] == 0 {
                return Err(Error::Domain(format!(
                    "resampling axis {} to {} mm leaves zero voxels",
                    ['x', 'y', 'z'][a],
                    new_spacing[a]
                )));
            }
        }
        let offset: [f64; 3] = std::array::from_fn(|a| 0.5 * new_spacing[a] - 0.5 * self.spacing[a]);
        let binary = self.kind.is_binary();
        let out = Volume3::from_fn(dims, new_spacing, self.kind, |i, j, k| {
            let p = WorldPoint::new(
                i as f64 * new_spacing[0] + offset[0],
                j as f64 * new_spacing[1] + offset[1],
                k as f64 * new_spacing[2] + offset[2],
            );
            let v = self.sample_clamped(p);
            if binary {
                if v >= 0.5 { 1.0 } else { 0.0 }
            } else {
                v as f32
            }
        })?;
        Ok(out)
    }

    /// Separable Gaussian blur with standard deviation `sigma_mm` (converted per axis by the
    /// spacing), kernel truncated at three standard deviations, replicate padding.
    pub fn gaussian_blur(&self, sigma_mm: f64) -> Volume3 {
        let data = gaussian_blur_f64(&self.values_f64(), self.dims, self.spacing, sigma_mm);
        let kind = if self.kind.is_binary() { VolumeKind::Occupancy } else { self.kind };
        Volume3::from_parts(self.dims, self.spacing, kind, data.into_iter().map(|v| v as f32).collect())
    }

    pub fn values_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| *v as f64).collect()
    }
}

pub(crate) fn check_grid(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Domain(format!("dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Domain(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

pub fn bounds_of(dims: Dims, spacing: Spacing) -> (WorldPoint, WorldPoint) {
    let lo: [f64; 3] = std::array::from_fn(|a| -0.5 * spacing[a]);
    let hi: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 0.5) * spacing[a]);
    (WorldPoint::from_array(lo), WorldPoint::from_array(hi))
}

pub fn center_of(dims: Dims, spacing: Spacing) -> WorldPoint {
    WorldPoint::from_array(std::array::from_fn(|a| 0.5 * (dims[a] as f64 - 1.0) * spacing[a]))
}

/// Lower cell corner and fractional offsets for clamped trilinear interpolation.
pub(crate) fn cell(dims: Dims, spacing: Spacing, p: [f64; 3]) -> ([usize; 3], [f64; 3]) {
    let mut base = [0usize; 3];
    let mut t = [0f64; 3];
    for a in 0..3 {
        let n = dims[a];
        let g = (p[a] / spacing[a]).clamp(0.0, (n - 1) as f64);
        if n > 1 {
            let b = (g.floor() as usize).min(n - 2);
            base[a] = b;
            t[a] = g - b as f64;
        }
    }
    (base, t)
}

pub(crate) fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let r = (3.0 * sigma_vox).ceil() as isize;
    let w: Vec<f64> = (-r..=r).map(|o| (-0.5 * (o as f64 / sigma_vox).powi(2)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Correlates `data` with a centered odd-length `kernel` along `axis`, replicate padding.
pub(crate) fn filter_axis(data: &[f64], dims: Dims, axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let n = dims[axis] as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let mut out = vec![0.0; data.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let pos = ((idx / stride) % dims[axis]) as isize;
        let line0 = idx - pos as usize * stride;
        let mut acc = 0.0;
        for (t, w) in kernel.iter().enumerate() {
            let q = (pos + t as isize - r).clamp(0, n - 1) as usize;
            acc += w * data[line0 + q * stride];
        }
        *o = acc;
    }
    out
}

pub(crate) fn gaussian_blur_f64(data: &[f64], dims: Dims, spacing: Spacing, sigma_mm: f64) -> Vec<f64> {
    if sigma_mm <= 0.0 {
        return data.to_vec();
    }
    let mut cur = data.to_vec();
    for a in 0..3 {
        let kernel = gaussian_kernel(sigma_mm / spacing[a]);
        if kernel.len() > 1 {
            cur = filter_axis(&cur, dims, a, &kernel);
        }
    }
    cur
}
