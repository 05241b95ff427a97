//! Synthetic two-domain phantoms: analytic ellipsoid parts with an exact occupancy oracle,
//! a clean "source" rendering and a degraded "target" rendering of the same anatomy.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::volume::{center_of, check_grid, gaussian_blur_f64, Dims, Spacing, Volume3, VolumeKind, WorldPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TargetCavity,
    Shell,
    Companion,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::TargetCavity, Role::Shell, Role::Companion];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::TargetCavity => "target_cavity",
            Role::Shell => "shell",
            Role::Companion => "companion",
        }
    }
}

/// An ellipsoid. `rotation` maps part-local axes to world axes (its columns are the
/// ellipsoid's principal directions); stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub rotation: [[f64; 3]; 3],
    pub role: Role,
}

impl Part {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    /// Closed ellipsoid membership: `‖R⁻¹(p − c) / radii‖ ≤ 1`.
    pub fn contains(&self, pt: WorldPoint) -> bool {
        let d = Vector3::new(pt.x - self.center[0], pt.y - self.center[1], pt.z - self.center[2]);
        let local = self.rotation_matrix().transpose() * d;
        let mut s = 0.0;
        for a in 0..3 {
            let u = local[a] / self.radii[a];
            s += u * u;
        }
        s <= 1.0
    }
}

pub(crate) fn matrix_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub parts: Vec<Part>,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let cavities = self.parts.iter().filter(|p| p.role == Role::TargetCavity).count();
        if cavities != 1 {
            return Err(Error::Config(format!("expected exactly one target_cavity part, found {cavities}")));
        }
        for p in &self.parts {
            if p.radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                return Err(Error::Config(format!("radii must be positive, got {:?}", p.radii)));
            }
            let r = p.rotation_matrix();
            let err = (r.transpose() * r - Matrix3::identity()).abs().max();
            if err > 1e-6 {
                return Err(Error::Config(format!("part rotation is not orthonormal (error {err:e})")));
            }
        }
        Ok(())
    }

    pub fn cavity(&self) -> &Part {
        self.parts.iter().find(|p| p.role == Role::TargetCavity).expect("validated spec has a cavity")
    }
}

/// 1 iff `pt` is inside (or on) any part with the given role.
pub fn occupancy_oracle(spec: &PhantomSpec, pt: WorldPoint, role: Role) -> u8 {
    spec.parts.iter().any(|p| p.role == role && p.contains(pt)) as u8
}

pub fn rasterize(spec: &PhantomSpec, dims: Dims, spacing: Spacing, role: Role) -> Result<Volume3> {
    check_grid(dims, spacing)?;
    Volume3::from_fn(dims, spacing, VolumeKind::Mask, |i, j, k| {
        let p = WorldPoint::new(i as f64 * spacing[0], j as f64 * spacing[1], k as f64 * spacing[2]);
        occupancy_oracle(spec, p, role) as f32
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Rendering parameters of one imaging domain. Blood (cavity and companion) takes
/// `intensity_inside`; the shell wall takes `intensity_wall`, or `intensity_outside` when
/// unset, in which case exactly two clean values appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub domain: Domain,
    pub speckle_sigma: f64,
    pub blur_sigma_mm: f64,
    pub cone_enabled: bool,
    pub intensity_inside: f64,
    pub intensity_outside: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity_wall: Option<f64>,
}

impl DomainConfig {
    /// Clean CT-like rendering: bright blood, mid-grey wall, dark background.
    pub fn source() -> Self {
        Self {
            domain: Domain::Source,
            speckle_sigma: 0.0,
            blur_sigma_mm: 0.0,
            cone_enabled: false,
            intensity_inside: 1.0,
            intensity_outside: 0.1,
            intensity_wall: Some(0.55),
        }
    }

    /// Ultrasound-like rendering: dark blood, bright wall, blurred, speckled, cone-limited.
    /// The speckle level matches fully developed speckle (Rayleigh amplitude, σ/μ ≈ 0.52).
    pub fn target() -> Self {
        Self {
            domain: Domain::Target,
            speckle_sigma: 0.52,
            blur_sigma_mm: 1.0,
            cone_enabled: true,
            intensity_inside: 0.15,
            intensity_outside: 0.4,
            intensity_wall: Some(0.85),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speckle_sigma >= 0.0 && self.blur_sigma_mm >= 0.0) {
            return Err(Error::Config("speckle_sigma and blur_sigma_mm must be >= 0".into()));
        }
        if self.domain == Domain::Source && (self.speckle_sigma != 0.0 || self.cone_enabled) {
            return Err(Error::Config("source domain allows neither speckle nor the cone".into()));
        }
        Ok(())
    }
}

/// Clean piecewise-constant rendering of a spec (no degradation).
fn render_clean(spec: &PhantomSpec, cfg: &DomainConfig, dims: Dims, spacing: Spacing) -> Vec<f64> {
    let wall = cfg.intensity_wall.unwrap_or(cfg.intensity_outside);
    let mut out = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = WorldPoint::new(i as f64 * spacing[0], j as f64 * spacing[1], k as f64 * spacing[2]);
                let v = if occupancy_oracle(spec, p, Role::TargetCavity) == 1
                    || occupancy_oracle(spec, p, Role::Companion) == 1
                {
                    cfg.intensity_inside
                } else if occupancy_oracle(spec, p, Role::Shell) == 1 {
                    wall
                } else {
                    cfg.intensity_outside
                };
                out.push(v);
            }
        }
    }
    out
}

/// Renders the intensity image of a spec. Source images are the clean rendering; target
/// images are blurred, multiplied by `1 + η` with `η ~ N(0, speckle_sigma²)` per voxel and,
/// when enabled, zeroed outside a 45° cone whose apex is the center of the top (max-z) face
/// and whose axis points along −z.
pub fn render_domain(spec: &PhantomSpec, cfg: &DomainConfig, dims: Dims, spacing: Spacing, seed: u64) -> Result<Volume3> {
    cfg.validate()?;
    check_grid(dims, spacing)?;
    let mut v = render_clean(spec, cfg, dims, spacing);
    if cfg.domain == Domain::Target {
        v = gaussian_blur_f64(&v, dims, spacing, cfg.blur_sigma_mm);
        if cfg.speckle_sigma > 0.0 {
            let normal = Normal::new(0.0, cfg.speckle_sigma).map_err(|e| Error::Config(e.to_string()))?;
            let mut rng = seeds::rng(seed);
            for x in v.iter_mut() {
                *x *= 1.0 + normal.sample(&mut rng);
            }
        }
        if cfg.cone_enabled {
            let c = center_of(dims, spacing);
            let apex_z = (dims[2] as f64 - 0.5) * spacing[2];
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        let dx = i as f64 * spacing[0] - c.x;
                        let dy = j as f64 * spacing[1] - c.y;
                        let depth = apex_z - k as f64 * spacing[2];
                        if (dx * dx + dy * dy).sqrt() > depth {
                            v[i + dims[0] * (j + dims[1] * k)] = 0.0;
                        }
                    }
                }
            }
        }
    }
    Volume3::new(dims, spacing, VolumeKind::Intensity, v.into_iter().map(|x| x as f32).collect())
}

/// Sampling ranges for phantom anatomy, in mm. The defaults are sized for a 32 mm field of
/// view: the cavity and shell always fit inside the grid, the companion sits off one end of
/// the cavity's long axis and may be clipped by the border.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomRanges {
    pub center_jitter_mm: f64,
    pub cavity_long_radius: (f64, f64),
    pub cavity_short_radius: (f64, f64),
    pub shell_thickness: (f64, f64),
    pub companion_radius: (f64, f64),
    /// Companion center offset beyond the shell, as a fraction of the companion radius.
    pub companion_offset: (f64, f64),
}

impl Default for PhantomRanges {
    fn default() -> Self {
        Self {
            center_jitter_mm: 1.5,
            cavity_long_radius: (8.0, 10.0),
            cavity_short_radius: (5.0, 7.0),
            shell_thickness: (2.0, 3.0),
            companion_radius: (4.0, 5.5),
            companion_offset: (0.2, 0.6),
        }
    }
}

/// Rotation uniformly distributed over SO(3) (normalized Gaussian quaternion).
pub(crate) fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    let q = Vector4::new(n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng));
    *UnitQuaternion::from_quaternion(nalgebra::Quaternion::from_vector(q)).to_rotation_matrix().matrix()
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo { rng.random_range(lo..hi) } else { lo }
}

pub fn sample_phantom(dims: Dims, spacing: Spacing, ranges: &PhantomRanges, seed: u64) -> PhantomSpec {
    let mut rng = seeds::rng(seed);
    let c0 = center_of(dims, spacing);
    let j = ranges.center_jitter_mm;
    let center = Vector3::new(
        c0.x + rng.random_range(-j..=j),
        c0.y + rng.random_range(-j..=j),
        c0.z + rng.random_range(-j..=j),
    );
    let rot = random_rotation(&mut rng);
    let radii = [
        uniform(&mut rng, ranges.cavity_long_radius),
        uniform(&mut rng, ranges.cavity_short_radius),
        uniform(&mut rng, ranges.cavity_short_radius),
    ];
    let t = uniform(&mut rng, ranges.shell_thickness);
    let rc = uniform(&mut rng, ranges.companion_radius);
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let offset = radii[0] + t + rc * uniform(&mut rng, ranges.companion_offset);
    let comp_center = center + rot.column(0) * (side * offset);
    let comp_rot = random_rotation(&mut rng);
    let comp_radii = [rc, rc * uniform(&mut rng, (0.8, 1.0)), rc * uniform(&mut rng, (0.8, 1.0))];
    let arr = |v: Vector3<f64>| [v.x, v.y, v.z];
    PhantomSpec {
        parts: vec![
            Part { center: arr(center), radii, rotation: matrix_rows(&rot), role: Role::TargetCavity },
            Part {
                center: arr(center),
                radii: radii.map(|r| r + t),
                rotation: matrix_rows(&rot),
                role: Role::Shell,
            },
            Part { center: arr(comp_center), radii: comp_radii, rotation: matrix_rows(&comp_rot), role: Role::Companion },
        ],
        seed,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub domain: Domain,
    pub intensity: Volume3,
    pub masks: BTreeMap<Role, Volume3>,
    pub spec: PhantomSpec,
}

impl Case {
    pub fn mask(&self, role: Role) -> &Volume3 {
        &self.masks[&role]
    }

    pub fn all_masks(&self) -> Vec<&Volume3> {
        self.masks.values().collect()
    }

    pub fn dims(&self) -> Dims {
        self.intensity.dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.intensity.spacing()
    }
}

/// `n_cases` phantoms rendered in one domain. Case `i` draws its anatomy from sub-seed
/// `(seed, "phantom", i)` and its rendering noise from `(seed, "render", i)`, so cases are
/// independent and any prefix of a dataset is reproducible on its own.
pub fn make_dataset(n_cases: usize, dims: Dims, spacing: Spacing, cfg: &DomainConfig, seed: u64) -> Result<Vec<Case>> {
    make_dataset_with(n_cases, dims, spacing, cfg, &PhantomRanges::default(), seed)
}

pub fn make_dataset_with(
    n_cases: usize,
    dims: Dims,
    spacing: Spacing,
    cfg: &DomainConfig,
    ranges: &PhantomRanges,
    seed: u64,
) -> Result<Vec<Case>> {
    if n_cases == 0 {
        return Err(Error::Config("n_cases must be at least 1".into()));
    }
    cfg.validate()?;
    check_grid(dims, spacing)?;
    (0..n_cases)
        .map(|i| {
            let spec = sample_phantom(dims, spacing, ranges, seeds::derive(seed, "phantom", i as u64));
            let intensity = render_domain(&spec, cfg, dims, spacing, seeds::derive(seed, "render", i as u64))?;
            let masks = Role::ALL
                .into_iter()
                .map(|r| Ok((r, rasterize(&spec, dims, spacing, r)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(Case { id: format!("case_{i:04}"), domain: cfg.domain, intensity, masks, spec })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(r: f64, c: [f64; 3]) -> PhantomSpec {
        PhantomSpec {
            parts: vec![Part {
                center: c,
                radii: [r; 3],
                rotation: matrix_rows(&Matrix3::identity()),
                role: Role::TargetCavity,
            }],
            seed: 0,
        }
    }

    #[test]
    fn oracle_center_far_and_surface() {
        let s = sphere(3.0, [1.0, 2.0, 3.0]);
        assert_eq!(occupancy_oracle(&s, WorldPoint::new(1.0, 2.0, 3.0), Role::TargetCavity), 1);
        assert_eq!(occupancy_oracle(&s, WorldPoint::new(7.0, 2.0, 3.0), Role::TargetCavity), 0);
        assert_eq!(occupancy_oracle(&s, WorldPoint::new(4.0, 2.0, 3.0), Role::TargetCavity), 1);
        assert_eq!(occupancy_oracle(&s, WorldPoint::new(1.0, 2.0, 3.0), Role::Shell), 0);
    }

    #[test]
    fn validation_catches_bad_specs() {
        let mut s = sphere(3.0, [0.0; 3]);
        assert!(s.validate().is_ok());
        s.parts[0].rotation[0][0] = 1.1;
        assert!(s.validate().is_err());
        s.parts.clear();
        assert!(s.validate().is_err());
        let mut cfg = DomainConfig::source();
        cfg.cone_enabled = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn random_rotations_are_orthonormal() {
        let mut rng = seeds::rng(3);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_phantoms_are_valid() {
        for s in 0..20 {
            sample_phantom([32; 3], [1.0; 3], &PhantomRanges::default(), s).validate().unwrap();
        }
    }
}
