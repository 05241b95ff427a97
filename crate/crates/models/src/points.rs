//! Training-point sampling for the occupancy decoder: Gaussian perturbations of surface
//! points at two scales plus uniform points, labelled by the analytic oracle when a phantom
//! spec is available and by nearest-voxel lookup in a mask otherwise.

use condshape_core::metrics::surface_points;
use condshape_core::synthgen::{occupancy_oracle, PhantomSpec, Role};
use condshape_core::{seeds, Volume3, VolumeKind, WorldPoint};
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointSampling {
    pub near_fraction: f64,
    pub near_sigma_mm: f64,
    pub far_fraction: f64,
    pub far_sigma_mm: f64,
}

impl Default for PointSampling {
    /// 50% at σ = 2 mm, 40% at σ = 6 mm, the remaining 10% uniform.
    fn default() -> Self {
        Self { near_fraction: 0.5, near_sigma_mm: 2.0, far_fraction: 0.4, far_sigma_mm: 6.0 }
    }
}

impl PointSampling {
    /// `(near, far, uniform)` counts: floors of the fractions, uniform takes the rest.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let near = (self.near_fraction * n as f64).floor() as usize;
        let far = ((self.far_fraction * n as f64).floor() as usize).min(n - near);
        (near, far, n - near - far)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.near_fraction >= 0.0
            && self.far_fraction >= 0.0
            && self.near_fraction + self.far_fraction <= 1.0
            && self.near_sigma_mm >= 0.0
            && self.far_sigma_mm >= 0.0;
        if !ok {
            return Err(ModelError::Config("invalid point sampling fractions or sigmas".into()));
        }
        Ok(())
    }
}

/// Ground truth for labelling.
#[derive(Debug, Clone, Copy)]
pub enum LabelSource<'a> {
    /// Analytic phantom; labels come from the oracle for `role`, the grid fixes the bounds.
    Spec { spec: &'a PhantomSpec, role: Role, grid: &'a Volume3 },
    Mask(&'a Volume3),
}

impl LabelSource<'_> {
    fn grid(&self) -> &Volume3 {
        match self {
            LabelSource::Spec { grid, .. } => grid,
            LabelSource::Mask(m) => m,
        }
    }

    pub fn label(&self, p: WorldPoint) -> u8 {
        match self {
            LabelSource::Spec { spec, role, .. } => occupancy_oracle(spec, p, *role),
            LabelSource::Mask(m) => (m.sample_nearest(p) >= 0.5) as u8,
        }
    }

    fn surface_point(&self, mask_surface: &[WorldPoint], rng: &mut impl Rng) -> Result<WorldPoint> {
        match self {
            LabelSource::Spec { spec, role, .. } => {
                let parts: Vec<_> = spec.parts.iter().filter(|p| p.role == *role).collect();
                if parts.is_empty() {
                    return Err(ModelError::Config(format!("spec has no {} part", role.as_str())));
                }
                let part = parts[rng.random_range(0..parts.len())];
                let u = loop {
                    let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
                    let n: f64 = v.norm();
                    if n > 1e-12 {
                        break v / n;
                    }
                };
                let local = Vector3::new(u.x * part.radii[0], u.y * part.radii[1], u.z * part.radii[2]);
                let w = part.rotation_matrix() * local;
                Ok(WorldPoint::new(part.center[0] + w.x, part.center[1] + w.y, part.center[2] + w.z))
            }
            LabelSource::Mask(_) => Ok(mask_surface[rng.random_range(0..mask_surface.len())]),
        }
    }
}

/// Points with labels in stratum order: near-surface, far-surface, uniform.
pub fn sample_training_points(
    src: LabelSource<'_>,
    n: usize,
    strategy: &PointSampling,
    seed: u64,
) -> Result<Vec<(WorldPoint, u8)>> {
    sample_training_points_with(src, n, strategy, &mut seeds::rng(seed))
}

pub fn sample_training_points_with(
    src: LabelSource<'_>,
    n: usize,
    strategy: &PointSampling,
    rng: &mut impl Rng,
) -> Result<Vec<(WorldPoint, u8)>> {
    if n == 0 {
        return Err(ModelError::Config("at least one training point is needed".into()));
    }
    strategy.validate()?;
    let grid = src.grid();
    let mask_surface = match src {
        LabelSource::Mask(m) => {
            m.require_kind("sample_training_points", VolumeKind::Mask)?;
            surface_points(m)?.points().to_vec()
        }
        LabelSource::Spec { .. } => Vec::new(),
    };
    let (lo, hi) = grid.bounds();
    let (lo, hi) = (lo.to_array(), hi.to_array());
    let clamp = |p: WorldPoint| WorldPoint::from_array(std::array::from_fn(|a| p.to_array()[a].clamp(lo[a], hi[a])));
    let (near, far, _) = strategy.counts(n);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = if i < near + far {
            let sigma = if i < near { strategy.near_sigma_mm } else { strategy.far_sigma_mm };
            let normal = Normal::new(0.0, sigma).map_err(|e| ModelError::Config(e.to_string()))?;
            let s = src.surface_point(&mask_surface, rng)?;
            clamp(WorldPoint::new(s.x + normal.sample(rng), s.y + normal.sample(rng), s.z + normal.sample(rng)))
        } else {
            WorldPoint::from_array(std::array::from_fn(|a| rng.random_range(lo[a]..=hi[a])))
        };
        out.push((p, src.label(p)));
    }
    Ok(out)
}
