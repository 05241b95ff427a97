use condshape_core::edgemap::{
    edge_map, edge_map_from_distances, edge_map_union, edt, edt_with_axis_order, sobel_edges, union_edges,
    EdgeParams, LambdaSchedule,
};
use condshape_core::{Volume3, VolumeKind};
use condshape_oracles as oracle;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3], p: f64) -> Volume3 {
    Volume3::from_fn(dims, spacing, VolumeKind::Mask, |_, _, _| rng.random_bool(p) as u8 as f32).unwrap()
}

fn random_edges(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3], p: f64) -> Volume3 {
    Volume3::from_fn(dims, spacing, VolumeKind::EdgeSet, |_, _, _| rng.random_bool(p) as u8 as f32).unwrap()
}

#[test]
fn sobel_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let dims = [rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9)];
        let m = random_mask(&mut rng, dims, [1.0; 3], 0.3);
        let want = oracle::sobel_edges(&m.values_f64(), dims);
        let got = sobel_edges(&m).unwrap();
        assert!(got.data().iter().zip(&want).all(|(g, w)| (*g == 1.0) == *w));
    }
}

#[test]
fn half_space_edges_are_two_planes() {
    let m = Volume3::from_fn([4, 4, 4], [1.0; 3], VolumeKind::Mask, |i, _, _| (i >= 2) as u8 as f32).unwrap();
    let e = sobel_edges(&m).unwrap();
    for k in 0..4 {
        for j in 0..4 {
            for i in 0..4 {
                assert_eq!(e.get(i, j, k) == 1.0, i == 1 || i == 2);
            }
        }
    }
}

#[test]
fn edt_matches_brute_force_with_anisotropic_spacing() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let dims = [rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16)];
        let p = [0.0, 0.002, 0.02, 0.2][rng.random_range(0..4)];
        let e = random_edges(&mut rng, dims, [1.0, 1.0, 2.0], p);
        let sites: Vec<bool> = e.data().iter().map(|v| *v == 1.0).collect();
        let want = oracle::edt(&sites, dims, e.spacing());
        let got = edt(&e).unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            if w.is_infinite() {
                assert!(g.is_infinite());
            } else {
                assert!((*g as f64 - w).abs() <= 1e-5, "{g} vs {w}");
            }
        }
    }
}

#[test]
fn edge_map_matches_composed_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let density = rng.random_range(0.01..0.2);
        let m = random_mask(&mut rng, [12; 3], [1.0; 3], density);
        for lambda in [0.01, 0.5, 2.0] {
            let want = oracle::edge_map(&m.values_f64(), m.dims(), m.spacing(), lambda);
            let got = edge_map(&m, EdgeParams::new(lambda).unwrap()).unwrap();
            for (g, w) in got.data().iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn union_edge_map_is_pointwise_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_mask(&mut rng, [10; 3], [1.0, 1.5, 1.0], 0.05);
    let b = random_mask(&mut rng, [10; 3], [1.0, 1.5, 1.0], 0.05);
    let params = EdgeParams::new(0.7).unwrap();
    let u = edge_map_union(&[&a, &b], params).unwrap();
    let (ea, eb) = (edge_map(&a, params).unwrap(), edge_map(&b, params).unwrap());
    for ((x, y), z) in ea.data().iter().zip(eb.data()).zip(u.data()) {
        assert_eq!(x.max(*y), *z);
    }
}

#[test]
fn schedule_is_monotone_with_exact_endpoints() {
    for total in [1, 2, 7, 30, 300] {
        let s = LambdaSchedule::standard(total);
        assert_eq!(s.lambda_at(0).unwrap(), 0.001);
        assert_eq!(s.lambda_at(total).unwrap(), 2.0);
        let vals: Vec<f64> = (0..=total).map(|e| s.lambda_at(e).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edt_is_one_lipschitz(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_edges(&mut rng, [7, 6, 5], [0.7, 1.0, 1.9], 0.03);
        let d = edt(&e).unwrap();
        prop_assume!(d.data().iter().all(|v| v.is_finite()));
        for _ in 0..200 {
            let a = [rng.random_range(0..7), rng.random_range(0..6), rng.random_range(0..5)];
            let b = [rng.random_range(0..7), rng.random_range(0..6), rng.random_range(0..5)];
            let gap = (d.get(a[0], a[1], a[2]) as f64 - d.get(b[0], b[1], b[2]) as f64).abs();
            let w = d.world_of(a[0], a[1], a[2]).distance(d.world_of(b[0], b[1], b[2]));
            prop_assert!(gap <= w + 1e-5);
        }
    }

    #[test]
    fn edt_is_independent_of_pass_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_edges(&mut rng, [9, 5, 7], [1.0, 1.0, 2.0], 0.05);
        let base = edt(&e).unwrap();
        for order in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let other = edt_with_axis_order(&e, order).unwrap();
            for (a, b) in base.data().iter().zip(other.data()) {
                prop_assert!(a == b || (a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn complement_has_the_same_edges(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(&mut rng, [6, 7, 5], [1.0; 3], 0.4);
        let c = m.map(VolumeKind::Mask, |v| 1.0 - v).unwrap();
        prop_assert_eq!(sobel_edges(&m).unwrap(), sobel_edges(&c).unwrap());
    }

    #[test]
    fn edge_map_orders_and_ranges(seed in any::<u64>(), l1 in 0.01f64..2.0, dl in 0.01f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(&mut rng, [8, 8, 8], [1.0, 1.0, 1.5], 0.05);
        let q = union_edges(&[&m]).unwrap();
        let d = edt(&q).unwrap();
        let e1 = edge_map_from_distances(&d, EdgeParams::new(l1).unwrap());
        let e2 = edge_map_from_distances(&d, EdgeParams::new(l1 + dl).unwrap());
        for idx in 0..m.len() {
            let (a, b) = (e1.data()[idx], e2.data()[idx]);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a == 1.0, q.data()[idx] == 1.0);
            let dist = d.data()[idx];
            if dist > 0.0 && dist.is_finite() {
                prop_assert!(b < a || a == 0.0, "lambda order broken at d={}", dist);
            }
        }
        // Strictly decreasing in distance for fixed lambda.
        let mut pairs: Vec<(f32, f32)> = d.data().iter().cloned().zip(e1.data().iter().cloned())
            .filter(|(x, _)| x.is_finite()).collect();
        pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        for w in pairs.windows(2) {
            if w[1].0 > w[0].0 {
                prop_assert!(w[1].1 <= w[0].1);
            }
        }
    }
}
