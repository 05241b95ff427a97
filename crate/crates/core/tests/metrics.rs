use condshape_core::metrics::{
    avg_surface_distance, dice, directed_distances, evaluate_cases, hausdorff, surface_points, MetricsReport,
    Stat, SurfacePoints,
};
use condshape_core::{Error, Volume3, VolumeKind, WorldPoint};
use condshape_oracles as oracle;
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3], p: f64) -> Volume3 {
    Volume3::from_fn(dims, spacing, VolumeKind::Mask, |_, _, _| rng.random_bool(p) as u8 as f32).unwrap()
}

fn blob(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3]) -> Volume3 {
    let c: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.3..0.7) * dims[a] as f64 * spacing[a]);
    let r = rng.random_range(2.0..6.0);
    Volume3::from_fn(dims, spacing, VolumeKind::Mask, |i, j, k| {
        let p = [i as f64 * spacing[0], j as f64 * spacing[1], k as f64 * spacing[2]];
        (oracle::dist(p, c) <= r) as u8 as f32
    })
    .unwrap()
}

fn arrays(s: &SurfacePoints) -> Vec<[f64; 3]> {
    s.points().iter().map(|p| p.to_array()).collect()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> SurfacePoints {
    SurfacePoints::new(
        (0..n)
            .map(|_| WorldPoint::new(rng.random_range(0.0..scale), rng.random_range(0.0..scale), rng.random_range(0.0..scale)))
            .collect(),
    )
    .unwrap()
}

#[test]
fn surface_matches_neighbourhood_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let m = random_mask(&mut rng, [8; 3], [1.0, 0.5, 2.0], 0.6);
        let want = oracle::surface_scan(&m.values_f64(), m.dims(), m.spacing());
        assert_eq!(arrays(&surface_points(&m).unwrap()), want);
    }
    let single = Volume3::from_fn([3; 3], [1.0; 3], VolumeKind::Mask, |i, j, k| ((i, j, k) == (2, 0, 1)) as u8 as f32)
        .unwrap();
    assert_eq!(arrays(&surface_points(&single).unwrap()), vec![[2.0, 0.0, 1.0]]);
}

#[test]
fn distances_match_brute_force_on_point_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let a = random_points(&mut rng, 200, 20.0);
        let scale = rng.random_range(5.0..40.0);
        let b = random_points(&mut rng, 200, scale);
        let (pa, pb) = (arrays(&a), arrays(&b));
        assert_eq!(directed_distances(&a, &b), oracle::nearest_distances(&pa, &pb));
        assert!((avg_surface_distance(&a, &b).unwrap() - oracle::avg_surface_distance(&pa, &pb)).abs() < 1e-9);
        assert_eq!(hausdorff(&a, &b).unwrap(), oracle::hausdorff(&pa, &pb));
    }
}

#[test]
fn mask_metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let spacing = [1.0, 1.0, rng.random_range(1.0..2.0)];
        let (a, b) = (blob(&mut rng, [16; 3], spacing), blob(&mut rng, [16; 3], spacing));
        assert_eq!(dice(&a, &b).unwrap(), oracle::dice(&a.values_f64(), &b.values_f64()));
        let (sa, sb) = (surface_points(&a).unwrap(), surface_points(&b).unwrap());
        let (pa, pb) = (arrays(&sa), arrays(&sb));
        assert!((avg_surface_distance(&sa, &sb).unwrap() - oracle::avg_surface_distance(&pa, &pb)).abs() < 1e-9);
        assert_eq!(hausdorff(&sa, &sb).unwrap(), oracle::hausdorff(&pa, &pb));
    }
}

#[test]
fn evaluation_report() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gt: Vec<(String, Volume3)> = (0..10).map(|i| (format!("c{i}"), blob(&mut rng, [12; 3], [1.0; 3]))).collect();
    let same = evaluate_cases(&gt, &gt).unwrap();
    assert_eq!(same.aggregate.dice, Stat { mean: 1.0, std: 0.0 });
    assert_eq!(same.aggregate.hd_mm, Stat { mean: 0.0, std: 0.0 });
    assert_eq!(same.aggregate.asd_mm, Stat { mean: 0.0, std: 0.0 });

    let mut pred: Vec<(String, Volume3)> = gt.iter().map(|(id, _)| (id.clone(), blob(&mut rng, [12; 3], [1.0; 3]))).collect();
    pred.reverse();
    let report = evaluate_cases(&pred, &gt).unwrap();
    for (row, (id, g)) in report.cases.iter().zip(&gt) {
        let p = &pred.iter().find(|(pid, _)| pid == id).unwrap().1;
        assert_eq!(&row.id, id);
        assert_eq!(row.dice, dice(p, g).unwrap());
        let (sp, sg) = (surface_points(p).unwrap(), surface_points(g).unwrap());
        assert_eq!(row.asd_mm, avg_surface_distance(&sp, &sg).unwrap());
        assert_eq!(row.hd_mm, hausdorff(&sp, &sg).unwrap());
    }
    let dices: Vec<f64> = report.cases.iter().map(|c| c.dice).collect();
    let mean = dices.iter().sum::<f64>() / 10.0;
    let std = (dices.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 10.0).sqrt();
    assert!((report.aggregate.dice.mean - mean).abs() < 1e-12);
    assert!((report.aggregate.dice.std - std).abs() < 1e-12);

    let json = serde_json::to_value(&report).unwrap();
    assert!(json["cases"][0]["hd_mm"].is_number());
    assert!(json["aggregate"]["asd_mm"]["std"].is_number());
    let back: MetricsReport = serde_json::from_value(json).unwrap();
    assert_eq!(back, report);

    pred[0].0 = "nope".into();
    assert!(matches!(evaluate_cases(&pred, &gt), Err(Error::Mismatch(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric_and_ordered(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_points(&mut rng, 60, 10.0), random_points(&mut rng, 80, 14.0));
        prop_assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff(&b, &a).unwrap());
        prop_assert!((avg_surface_distance(&a, &b).unwrap() - avg_surface_distance(&b, &a).unwrap()).abs() < 1e-12);
        let ab = directed_distances(&a, &b);
        let ba = directed_distances(&b, &a);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let h = hausdorff(&a, &b).unwrap();
        prop_assert!(h >= mean(&ab).max(mean(&ba)));
        prop_assert!(ab.iter().chain(&ba).all(|d| *d >= 0.0 && *d <= h));
        let (m1, m2) = (random_mask(&mut rng, [5; 3], [1.0; 3], 0.5), random_mask(&mut rng, [5; 3], [1.0; 3], 0.5));
        prop_assert_eq!(dice(&m1, &m2).unwrap(), dice(&m2, &m1).unwrap());
    }

    #[test]
    fn distances_are_rigid_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_points(&mut rng, 100, 12.0), random_points(&mut rng, 100, 12.0));
        let rot = Rotation3::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0));
        let t = Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let f = |p: WorldPoint| {
            let q = rot * Vector3::new(p.x, p.y, p.z) + t;
            WorldPoint::new(q.x, q.y, q.z)
        };
        let (ta, tb) = (a.map(f), b.map(f));
        prop_assert!((avg_surface_distance(&a, &b).unwrap() - avg_surface_distance(&ta, &tb).unwrap()).abs() < 1e-9);
        prop_assert!((hausdorff(&a, &b).unwrap() - hausdorff(&ta, &tb).unwrap()).abs() < 1e-9);
    }
}
