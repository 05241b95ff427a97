//! Reference computations for tests. Everything here works on plain slices and is written
//! the slow, obvious way so it shares no code path with the library implementations.
//!
//! Grids are x-fastest: `index = x + nx * (y + ny * z)`; voxel `(i, j, k)` has its center at
//! world `(i * sx, j * sy, k * sz)`.

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];
pub type Point = [f64; 3];

pub fn idx(d: Dims, i: usize, j: usize, k: usize) -> usize {
    i + d[0] * (j + d[1] * k)
}

fn coords(d: Dims) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..d[2]).flat_map(move |k| (0..d[1]).flat_map(move |j| (0..d[0]).map(move |i| (i, j, k))))
}

/// Trilinear interpolation written as the explicit 8-term weighted sum, with coordinates
/// clamped to the voxel-center range.
pub fn trilinear(data: &[f64], d: Dims, s: Spacing, p: Point) -> f64 {
    let mut base = [0usize; 3];
    let mut t = [0f64; 3];
    for a in 0..3 {
        let g = (p[a] / s[a]).clamp(0.0, (d[a] - 1) as f64);
        let b = if d[a] > 1 { (g.floor() as usize).min(d[a] - 2) } else { 0 };
        base[a] = b;
        t[a] = g - b as f64;
    }
    let at = |di: usize, dj: usize, dk: usize| {
        let i = (base[0] + di).min(d[0] - 1);
        let j = (base[1] + dj).min(d[1] - 1);
        let k = (base[2] + dk).min(d[2] - 1);
        data[idx(d, i, j, k)]
    };
    let (x, y, z) = (t[0], t[1], t[2]);
    at(0, 0, 0) * (1.0 - x) * (1.0 - y) * (1.0 - z)
        + at(1, 0, 0) * x * (1.0 - y) * (1.0 - z)
        + at(0, 1, 0) * (1.0 - x) * y * (1.0 - z)
        + at(0, 0, 1) * (1.0 - x) * (1.0 - y) * z
        + at(1, 1, 0) * x * y * (1.0 - z)
        + at(1, 0, 1) * x * (1.0 - y) * z
        + at(0, 1, 1) * (1.0 - x) * y * z
        + at(1, 1, 1) * x * y * z
}

/// Sobel edge set by direct 3×3×3 convolution with the full (non-separated) kernels and
/// replicate padding. A voxel is an edge iff any of the three responses is nonzero.
pub fn sobel_edges(mask: &[f64], d: Dims) -> Vec<bool> {
    let smooth = [1.0, 2.0, 1.0];
    let deriv = [-1.0, 0.0, 1.0];
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![false; mask.len()];
    for (i, j, k) in coords(d) {
        let mut resp = [0.0f64; 3];
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let v = mask[idx(
                        d,
                        clampi(i as isize + a as isize - 1, d[0]),
                        clampi(j as isize + b as isize - 1, d[1]),
                        clampi(k as isize + c as isize - 1, d[2]),
                    )];
                    resp[0] += v * deriv[a] * smooth[b] * smooth[c];
                    resp[1] += v * smooth[a] * deriv[b] * smooth[c];
                    resp[2] += v * smooth[a] * smooth[b] * deriv[c];
                }
            }
        }
        out[idx(d, i, j, k)] = resp.iter().map(|r| r * r).sum::<f64>() > 0.0;
    }
    out
}

/// All-pairs nearest-site distance in mm; `+inf` everywhere when there are no sites.
pub fn edt(sites: &[bool], d: Dims, s: Spacing) -> Vec<f64> {
    let site_pts: Vec<Point> = coords(d)
        .filter(|&(i, j, k)| sites[idx(d, i, j, k)])
        .map(|(i, j, k)| [i as f64 * s[0], j as f64 * s[1], k as f64 * s[2]])
        .collect();
    coords(d)
        .map(|(i, j, k)| {
            let p = [i as f64 * s[0], j as f64 * s[1], k as f64 * s[2]];
            site_pts.iter().map(|q| dist(p, *q)).fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// `exp(-lambda * EDT(Sobel(mask)))` composed from the brute-force pieces above.
pub fn edge_map(mask: &[f64], d: Dims, s: Spacing, lambda: f64) -> Vec<f64> {
    edt(&sobel_edges(mask, d), d, s)
        .into_iter()
        .map(|e| if e.is_infinite() { 0.0 } else { (-lambda * e).exp() })
        .collect()
}

/// Seven nested loops over (out channel, in channel, output voxel, kernel tap) for
/// `x: [n, cin, d0, d1, d2]` row-major, `w: [cout, cin, k, k, k]`, zero padding `k / 2`.
pub fn conv3d(x: &[f64], xs: [usize; 5], w: &[f64], ws: [usize; 5], b: &[f64], stride: usize) -> (Vec<f64>, [usize; 5]) {
    let [n, cin, d0, d1, d2] = xs;
    let [cout, _, k, _, _] = ws;
    let p = (k / 2) as isize;
    let od = [d0, d1, d2].map(|dd| (dd + 2 * (k / 2) - k) / stride + 1);
    let mut out = vec![0.0; n * cout * od[0] * od[1] * od[2]];
    let xat = |nn: usize, c: usize, a: isize, bb: isize, cc: isize| -> f64 {
        if a < 0 || bb < 0 || cc < 0 || a >= d0 as isize || bb >= d1 as isize || cc >= d2 as isize {
            return 0.0;
        }
        x[(((nn * cin + c) * d0 + a as usize) * d1 + bb as usize) * d2 + cc as usize]
    };
    for nn in 0..n {
        for co in 0..cout {
            for o0 in 0..od[0] {
                for o1 in 0..od[1] {
                    for o2 in 0..od[2] {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for a in 0..k {
                                for bb in 0..k {
                                    for cc in 0..k {
                                        let wv = w[(((co * cin + ci) * k + a) * k + bb) * k + cc];
                                        acc += wv
                                            * xat(
                                                nn,
                                                ci,
                                                (o0 * stride + a) as isize - p,
                                                (o1 * stride + bb) as isize - p,
                                                (o2 * stride + cc) as isize - p,
                                            );
                                    }
                                }
                            }
                        }
                        out[(((nn * cout + co) * od[0] + o0) * od[1] + o1) * od[2] + o2] = acc;
                    }
                }
            }
        }
    }
    (out, [n, cout, od[0], od[1], od[2]])
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn finite_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over paired gradient entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Scalar Adam iterated by hand: returns the parameter after each step.
pub fn adam_scalar(p0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    let mut out = Vec::with_capacity(grads.len());
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        p -= lr * mhat / (vhat.sqrt() + eps);
        out.push(p);
    }
    out
}

pub fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// For every point of `from`, the distance to its nearest point of `to` (all pairs).
pub fn nearest_distances(from: &[Point], to: &[Point]) -> Vec<f64> {
    from.iter()
        .map(|a| to.iter().map(|b| dist(*a, *b)).fold(f64::INFINITY, f64::min))
        .collect()
}

pub fn avg_surface_distance(a: &[Point], b: &[Point]) -> f64 {
    let ab = nearest_distances(a, b);
    let ba = nearest_distances(b, a);
    (ab.iter().sum::<f64>() / ab.len() as f64 + ba.iter().sum::<f64>() / ba.len() as f64) / 2.0
}

pub fn hausdorff(a: &[Point], b: &[Point]) -> f64 {
    let ab = nearest_distances(a, b).into_iter().fold(0.0, f64::max);
    let ba = nearest_distances(b, a).into_iter().fold(0.0, f64::max);
    ab.max(ba)
}

pub fn dice(a: &[f64], b: &[f64]) -> f64 {
    let sa = a.iter().filter(|v| **v > 0.5).count();
    let sb = b.iter().filter(|v| **v > 0.5).count();
    let inter = a.iter().zip(b).filter(|(x, y)| **x > 0.5 && **y > 0.5).count();
    if sa + sb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sa + sb) as f64
    }
}

/// Foreground voxel centers with a background (or out-of-grid) face neighbour, found by
/// testing the six neighbours of every voxel.
pub fn surface_scan(mask: &[f64], d: Dims, s: Spacing) -> Vec<Point> {
    let fg = |i: isize, j: isize, k: isize| -> bool {
        if i < 0 || j < 0 || k < 0 || i >= d[0] as isize || j >= d[1] as isize || k >= d[2] as isize {
            return false;
        }
        mask[idx(d, i as usize, j as usize, k as usize)] > 0.5
    };
    let mut out = Vec::new();
    for (i, j, k) in coords(d) {
        let (ii, jj, kk) = (i as isize, j as isize, k as isize);
        if !fg(ii, jj, kk) {
            continue;
        }
        let n6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
        if n6.iter().any(|(a, b, c)| !fg(ii + a, jj + b, kk + c)) {
            out.push([i as f64 * s[0], j as f64 * s[1], k as f64 * s[2]]);
        }
    }
    out
}
