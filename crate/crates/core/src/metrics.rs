//! Dice, symmetric average surface distance and full Hausdorff distance between masks.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume3, VolumeKind, WorldPoint};

fn check_pair(op: &'static str, a: &Volume3, b: &Volume3) -> Result<()> {
    a.require_kind(op, VolumeKind::Mask)?;
    b.require_kind(op, VolumeKind::Mask)?;
    if !a.same_grid(b) {
        return Err(Error::Mismatch(format!(
            "{op}: grids differ ({:?} @ {:?} vs {:?} @ {:?})",
            a.dims(),
            a.spacing(),
            b.dims(),
            b.spacing()
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice(a: &Volume3, b: &Volume3) -> Result<f64> {
    check_pair("dice", a, b)?;
    let (mut sa, mut sb, mut both) = (0usize, 0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (*x > 0.5, *y > 0.5);
        sa += x as usize;
        sb += y as usize;
        both += (x && y) as usize;
    }
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (sa + sb) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePoints {
    points: Vec<WorldPoint>,
    cell_mm: f64,
}

impl SurfacePoints {
    /// Wraps an arbitrary nonempty point set; the bucketing cell is sized so that a cell
    /// holds about one point on average.
    pub fn new(points: Vec<WorldPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySurface);
        }
        let (lo, hi) = bbox(&points);
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let cell_mm = (extent / (points.len() as f64).cbrt()).max(1e-6);
        Ok(Self { points, cell_mm })
    }

    pub fn points(&self) -> &[WorldPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies a point map (e.g. a rigid transform) to every point.
    pub fn map(&self, f: impl Fn(WorldPoint) -> WorldPoint) -> Self {
        Self { points: self.points.iter().map(|p| f(*p)).collect(), cell_mm: self.cell_mm }
    }
}

/// Centers of foreground voxels with at least one 6-neighbour that is background or off
/// the grid.
pub fn surface_points(mask: &Volume3) -> Result<SurfacePoints> {
    mask.require_kind("surface_points", VolumeKind::Mask)?;
    let [nx, ny, nz] = mask.dims();
    let fg = |i: usize, j: usize, k: usize| mask.get(i, j, k) > 0.5;
    let mut points = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !fg(i, j, k) {
                    continue;
                }
                let boundary = i == 0
                    || j == 0
                    || k == 0
                    || i + 1 == nx
                    || j + 1 == ny
                    || k + 1 == nz
                    || !fg(i - 1, j, k)
                    || !fg(i + 1, j, k)
                    || !fg(i, j - 1, k)
                    || !fg(i, j + 1, k)
                    || !fg(i, j, k - 1)
                    || !fg(i, j, k + 1);
                if boundary {
                    points.push(mask.world_of(i, j, k));
                }
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptySurface);
    }
    let cell_mm = mask.spacing().into_iter().fold(0.0, f64::max);
    Ok(SurfacePoints { points, cell_mm })
}

fn bbox(points: &[WorldPoint]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for (a, v) in p.to_array().into_iter().enumerate() {
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    (lo, hi)
}

fn dist(a: WorldPoint, b: WorldPoint) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Uniform-grid bucketing of a point set for exact nearest-neighbour distances.
pub struct NearestIndex<'a> {
    points: &'a [WorldPoint],
    origin: [f64; 3],
    cell: f64,
    dims: [i64; 3],
    buckets: HashMap<[i64; 3], Vec<u32>>,
}

impl<'a> NearestIndex<'a> {
    pub fn new(points: &'a [WorldPoint], cell: f64) -> Self {
        assert!(!points.is_empty() && cell > 0.0);
        let (lo, hi) = bbox(points);
        let dims = std::array::from_fn(|a| ((hi[a] - lo[a]) / cell).floor() as i64 + 1);
        let mut idx = Self { points, origin: lo, cell, dims, buckets: HashMap::new() };
        for (n, p) in points.iter().enumerate() {
            let c = idx.cell_of(*p);
            idx.buckets.entry(c).or_default().push(n as u32);
        }
        idx
    }

    fn cell_of(&self, p: WorldPoint) -> [i64; 3] {
        let p = p.to_array();
        std::array::from_fn(|a| ((p[a] - self.origin[a]) / self.cell).floor() as i64)
    }

    /// Exact distance from `q` to the nearest indexed point. Cells are visited in rings of
    /// growing Chebyshev radius `r`; once the best distance is at most `r · cell`, no
    /// unvisited cell can hold anything closer.
    pub fn nearest(&self, q: WorldPoint) -> f64 {
        let c = self.cell_of(q);
        let gap = (0..3)
            .map(|a| (-c[a]).max(c[a] - (self.dims[a] - 1)).max(0))
            .max()
            .unwrap();
        let reach = (0..3).map(|a| (c[a]).abs().max((c[a] - (self.dims[a] - 1)).abs())).max().unwrap();
        let mut best = f64::INFINITY;
        let mut r = gap;
        loop {
            self.scan_ring(c, r, q, &mut best);
            if best <= r as f64 * self.cell || r >= reach {
                return best;
            }
            r += 1;
        }
    }

    fn scan_ring(&self, c: [i64; 3], r: i64, q: WorldPoint, best: &mut f64) {
        let range = |a: usize| (c[a] - r).max(0)..=(c[a] + r).min(self.dims[a] - 1);
        let mut visit = |cell: [i64; 3]| {
            if let Some(ids) = self.buckets.get(&cell) {
                for &n in ids {
                    *best = best.min(dist(q, self.points[n as usize]));
                }
            }
        };
        for z in range(2) {
            for y in range(1) {
                if (z - c[2]).abs() == r || (y - c[1]).abs() == r {
                    for x in range(0) {
                        visit([x, y, z]);
                    }
                } else {
                    for x in [c[0] - r, c[0] + r] {
                        if x >= 0 && x < self.dims[0] && (r > 0 || x == c[0]) {
                            visit([x, y, z]);
                        }
                        if r == 0 {
                            break;
                        }
                    }
                }
            }
        }
    }
}

/// For each point of `from`, the distance to the nearest point of `to`.
pub fn directed_distances(from: &SurfacePoints, to: &SurfacePoints) -> Vec<f64> {
    let index = NearestIndex::new(&to.points, to.cell_mm.max(from.cell_mm));
    from.points.iter().map(|p| index.nearest(*p)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Symmetric average surface distance: the mean of the two directed mean distances.
pub fn avg_surface_distance(a: &SurfacePoints, b: &SurfacePoints) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySurface);
    }
    Ok((mean(&directed_distances(a, b)) + mean(&directed_distances(b, a))) / 2.0)
}

/// Full (100th percentile) symmetric Hausdorff distance.
pub fn hausdorff(a: &SurfacePoints, b: &SurfacePoints) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySurface);
    }
    let ab = directed_distances(a, b).into_iter().fold(0.0, f64::max);
    let ba = directed_distances(b, a).into_iter().fold(0.0, f64::max);
    Ok(ab.max(ba))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dice: f64,
    pub asd_mm: f64,
    pub hd_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let m = mean(values);
        let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
        Self { mean: m, std: var.sqrt() }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ({:.2})", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dice: Stat,
    pub asd_mm: Stat,
    pub hd_mm: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Self {
        let col = |f: fn(&CaseMetrics) -> f64| Stat::of(&cases.iter().map(f).collect::<Vec<_>>());
        let aggregate = Aggregate { dice: col(|c| c.dice), asd_mm: col(|c| c.asd_mm), hd_mm: col(|c| c.hd_mm) };
        Self { cases, aggregate }
    }
}

pub fn evaluate_case(id: &str, pred: &Volume3, gt: &Volume3) -> Result<CaseMetrics> {
    let d = dice(pred, gt)?;
    let (sp, sg) = (surface_points(pred)?, surface_points(gt)?);
    Ok(CaseMetrics {
        id: id.to_string(),
        dice: d,
        asd_mm: avg_surface_distance(&sp, &sg)?,
        hd_mm: hausdorff(&sp, &sg)?,
    })
}

/// Evaluates predictions against ground truth matched by case id; rows follow the order
/// of `gt`.
pub fn evaluate_cases(pred: &[(String, Volume3)], gt: &[(String, Volume3)]) -> Result<MetricsReport> {
    let by_id: HashMap<&str, &Volume3> = pred.iter().map(|(id, v)| (id.as_str(), v)).collect();
    if by_id.len() != pred.len() {
        return Err(Error::Mismatch("duplicate prediction case ids".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::Mismatch(format!("{} predictions for {} ground-truth cases", pred.len(), gt.len())));
    }
    let mut rows = Vec::with_capacity(gt.len());
    for (id, g) in gt {
        let p = by_id.get(id.as_str()).ok_or_else(|| Error::Mismatch(format!("no prediction for case {id}")))?;
        rows.push(evaluate_case(id, p, g)?);
    }
    Ok(MetricsReport::from_cases(rows))
}
