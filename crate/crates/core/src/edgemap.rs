//! Binary mask → Sobel edge set → exact Euclidean distance transform → `exp(-λ·EDT)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{filter_axis, Dims, Spacing, Volume3, VolumeKind};

/// Per-millimetre sharpness of the edge map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeParams {
    lambda: f64,
}

impl EdgeParams {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub total_epochs: u32,
}

impl LambdaSchedule {
    /// The sharpening schedule used to train the edge detector: 0.001 → 2.
    pub fn standard(total_epochs: u32) -> Self {
        Self { lambda_start: 0.001, lambda_end: 2.0, total_epochs }
    }

    /// Cosine annealing from `lambda_start` at epoch 0 to `lambda_end` at `total_epochs`.
    ///
    /// Written as a convex combination so both endpoints are reproduced exactly.
    pub fn lambda_at(&self, epoch: u32) -> Result<f64> {
        if self.total_epochs == 0 {
            return Err(Error::Domain("schedule needs at least one epoch".into()));
        }
        if epoch > self.total_epochs {
            return Err(Error::Domain(format!("epoch {epoch} outside [0, {}]", self.total_epochs)));
        }
        let w = 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / self.total_epochs as f64).cos());
        Ok(self.lambda_start * w + self.lambda_end * (1.0 - w))
    }
}

/// Edge set of a binary mask: voxels where any separable 3×3×3 Sobel response is nonzero.
pub fn sobel_edges(mask: &Volume3) -> Result<Volume3> {
    mask.require_kind("sobel_edges", VolumeKind::Mask)?;
    let src = mask.values_f64();
    let edges = sobel_nonzero(&src, mask.dims());
    Ok(Volume3::from_parts(
        mask.dims(),
        mask.spacing(),
        VolumeKind::EdgeSet,
        edges.into_iter().map(|e| if e { 1.0 } else { 0.0 }).collect(),
    ))
}

/// Union of the edge sets of several masks on one grid. Taking the union before the EDT is
/// the same as the pointwise maximum of the per-structure edge maps, since `exp(-λd)` is
/// decreasing in `d` and the nearest edge of the union is the nearest over structures.
pub fn union_edges(masks: &[&Volume3]) -> Result<Volume3> {
    let first = masks.first().ok_or_else(|| Error::Domain("union of zero masks".into()))?;
    let mut acc = vec![false; first.len()];
    for m in masks {
        m.require_kind("union_edges", VolumeKind::Mask)?;
        if !m.same_grid(first) {
            return Err(Error::Mismatch("masks live on different grids".into()));
        }
        for (a, e) in acc.iter_mut().zip(sobel_nonzero(&m.values_f64(), m.dims())) {
            *a |= e;
        }
    }
    Ok(Volume3::from_parts(
        first.dims(),
        first.spacing(),
        VolumeKind::EdgeSet,
        acc.into_iter().map(|e| if e { 1.0 } else { 0.0 }).collect(),
    ))
}

fn sobel_nonzero(src: &[f64], dims: Dims) -> Vec<bool> {
    const DERIV: [f64; 3] = [-1.0, 0.0, 1.0];
    const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];
    let mut edge = vec![false; src.len()];
    for axis in 0..3 {
        let mut g = src.to_vec();
        for a in 0..3 {
            g = filter_axis(&g, dims, a, if a == axis { &DERIV } else { &SMOOTH });
        }
        for (e, v) in edge.iter_mut().zip(g) {
            *e |= v != 0.0;
        }
    }
    edge
}

/// Exact Euclidean distance (mm) from every voxel center to the nearest edge voxel center;
/// `+inf` everywhere when the edge set is empty.
pub fn edt(edges: &Volume3) -> Result<Volume3> {
    edt_with_axis_order(edges, [0, 1, 2])
}

/// [`edt`] with an explicit order of the three 1-D passes; every permutation gives the
/// same distances.
pub fn edt_with_axis_order(edges: &Volume3, order: [usize; 3]) -> Result<Volume3> {
    edges.require_kind("edt", VolumeKind::EdgeSet)?;
    let mut sorted = order;
    sorted.sort_unstable();
    if sorted != [0, 1, 2] {
        return Err(Error::Domain(format!("axis order {order:?} is not a permutation")));
    }
    let sq = squared_edt(edges.data().iter().map(|v| *v != 0.0), edges.dims(), edges.spacing(), order);
    Ok(Volume3::from_parts(
        edges.dims(),
        edges.spacing(),
        VolumeKind::Intensity,
        sq.into_iter().map(|d| d.sqrt() as f32).collect(),
    ))
}

fn squared_edt(sites: impl Iterator<Item = bool>, dims: Dims, spacing: Spacing, order: [usize; 3]) -> Vec<f64> {
    let mut f: Vec<f64> = sites.map(|s| if s { 0.0 } else { f64::INFINITY }).collect();
    let longest = *dims.iter().max().unwrap();
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut env = Envelope::with_capacity(longest);
    for axis in order {
        let n = dims[axis];
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let w = spacing[axis] * spacing[axis];
        for start in line_starts(dims, axis) {
            for q in 0..n {
                line[q] = f[start + q * stride];
            }
            env.transform(&line[..n], w, &mut out[..n]);
            for q in 0..n {
                f[start + q * stride] = out[q];
            }
        }
    }
    f
}

fn line_starts(dims: Dims, axis: usize) -> Vec<usize> {
    let [nx, ny, nz] = dims;
    let mut starts = Vec::new();
    match axis {
        0 => {
            for k in 0..nz {
                for j in 0..ny {
                    starts.push(nx * (j + ny * k));
                }
            }
        }
        1 => {
            for k in 0..nz {
                for i in 0..nx {
                    starts.push(i + nx * ny * k);
                }
            }
        }
        _ => {
            for j in 0..ny {
                for i in 0..nx {
                    starts.push(i + nx * j);
                }
            }
        }
    }
    starts
}

/// Lower envelope of the parabolas `w·(p - q)² + f(q)` over the finite samples of `f`.
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self { v: Vec::with_capacity(n), z: Vec::with_capacity(n + 1) }
    }

    fn transform(&mut self, f: &[f64], w: f64, out: &mut [f64]) {
        self.v.clear();
        self.z.clear();
        let cross = |q: usize, p: usize| {
            let (qf, pf) = (q as f64, p as f64);
            ((f[q] + w * qf * qf) - (f[p] + w * pf * pf)) / (2.0 * w * (qf - pf))
        };
        for q in (0..f.len()).filter(|q| f[*q].is_finite()) {
            loop {
                match self.v.last() {
                    None => {
                        self.v.push(q);
                        self.z.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        let s = cross(q, p);
                        if s <= *self.z.last().unwrap() {
                            self.v.pop();
                            self.z.pop();
                        } else {
                            self.v.push(q);
                            self.z.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if self.v.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (p, o) in out.iter_mut().enumerate() {
            while k + 1 < self.v.len() && self.z[k + 1] < p as f64 {
                k += 1;
            }
            let q = self.v[k];
            let d = p as f64 - q as f64;
            *o = w * d * d + f[q];
        }
    }
}

/// `exp(-λ·d)` applied to a distance volume, with `+inf` mapped to exactly 0.
pub fn edge_map_from_distances(dist: &Volume3, params: EdgeParams) -> Volume3 {
    let lambda = params.lambda();
    let data = dist
        .data()
        .iter()
        .map(|d| if d.is_infinite() { 0.0 } else { (-lambda * *d as f64).exp() as f32 })
        .collect();
    Volume3::from_parts(dist.dims(), dist.spacing(), VolumeKind::EdgeMap, data)
}

pub fn edge_map(mask: &Volume3, params: EdgeParams) -> Result<Volume3> {
    Ok(edge_map_from_distances(&edt(&sobel_edges(mask)?)?, params))
}

/// Single-channel edge map of several structures (union of their edge sets).
pub fn edge_map_union(masks: &[&Volume3], params: EdgeParams) -> Result<Volume3> {
    Ok(edge_map_from_distances(&edt(&union_edges(masks)?)?, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: Dims, f: impl Fn(usize, usize, usize) -> bool) -> Volume3 {
        Volume3::from_fn(dims, [1.0; 3], VolumeKind::Mask, |i, j, k| f(i, j, k) as u8 as f32).unwrap()
    }

    #[test]
    fn constant_masks_have_no_edges() {
        for v in [false, true] {
            let e = sobel_edges(&mask([4, 4, 4], |_, _, _| v)).unwrap();
            assert_eq!(e.count_nonzero(), 0);
        }
    }

    #[test]
    fn isolated_voxel_edges_are_its_neighbours() {
        let e = sobel_edges(&mask([5, 5, 5], |i, j, k| (i, j, k) == (2, 2, 2))).unwrap();
        assert_eq!(e.count_nonzero(), 26);
        assert_eq!(e.get(2, 2, 2), 0.0);
        assert_eq!(e.get(1, 3, 1), 1.0);
    }

    #[test]
    fn single_site_distances_are_norms() {
        let edges = Volume3::from_fn([3, 3, 3], [1.0; 3], VolumeKind::EdgeSet, |i, j, k| {
            ((i, j, k) == (1, 1, 1)) as u8 as f32
        })
        .unwrap();
        let d = edt(&edges).unwrap();
        assert_eq!(d.get(1, 1, 1), 0.0);
        assert_eq!(d.get(0, 1, 1), 1.0);
        assert!((d.get(0, 0, 0) as f64 - 3f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn empty_edges_give_infinity_and_zero_map() {
        let edges = Volume3::filled([3, 2, 2], [1.0; 3], VolumeKind::EdgeSet, 0.0).unwrap();
        assert!(edt(&edges).unwrap().data().iter().all(|d| d.is_infinite()));
        let e = edge_map(&mask([3, 2, 2], |_, _, _| true), EdgeParams::new(1.0).unwrap()).unwrap();
        assert!(e.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn edge_map_at_one_millimetre() {
        let m = mask([6, 1, 1], |i, _, _| i >= 3);
        let e = edge_map(&m, EdgeParams::new(2.0).unwrap()).unwrap();
        assert_eq!(e.get(2, 0, 0), 1.0);
        assert_eq!(e.get(3, 0, 0), 1.0);
        assert!((e.get(1, 0, 0) as f64 - (-2f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn schedule_endpoints_and_errors() {
        let s = LambdaSchedule::standard(10);
        assert_eq!(s.lambda_at(0).unwrap(), 0.001);
        assert_eq!(s.lambda_at(10).unwrap(), 2.0);
        assert!((s.lambda_at(5).unwrap() - 1.0005).abs() < 1e-12);
        assert!(s.lambda_at(11).is_err());
        assert!(EdgeParams::new(0.0).is_err());
    }

    #[test]
    fn kind_errors() {
        let v = Volume3::filled([2, 2, 2], [1.0; 3], VolumeKind::Intensity, 0.0).unwrap();
        assert!(matches!(sobel_edges(&v), Err(Error::Kind { .. })));
        assert!(matches!(edt(&v), Err(Error::Kind { .. })));
    }
}
