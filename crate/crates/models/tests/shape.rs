use condshape_core::edgemap::{edge_map_union, EdgeParams};
use condshape_core::metrics::dice;
use condshape_core::synthgen::{make_dataset, rasterize, DomainConfig, Role};
use condshape_core::{Volume3, VolumeKind, WorldPoint};
use condshape_models::points::{sample_training_points, LabelSource, PointSampling};
use condshape_models::shape_train::{draw_lambda, make_shape_sample, ShapeSample};
use condshape_models::{train_shape_model, FeaturePyramid, ShapeAugment, ShapeConfig, ShapeModel, ShapeTrainConfig};
use condshape_oracles as oracle;
use condshape_tensorgrad::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn source_cases(n: usize, seed: u64) -> Vec<condshape_core::synthgen::Case> {
    make_dataset(n, [32; 3], [1.0; 3], &DomainConfig::source(), seed).unwrap()
}

fn gt_edge_map(case: &condshape_core::synthgen::Case, lambda: f64) -> Volume3 {
    edge_map_union(&case.all_masks(), EdgeParams::new(lambda).unwrap()).unwrap()
}

fn random_pyramid(rng: &mut ChaCha8Rng, channels: &[usize], dims: [usize; 3], spacing: [f64; 3]) -> FeaturePyramid {
    let model = ShapeModel::build(
        &ShapeConfig { encoder_channels: channels.to_vec(), ..ShapeConfig::default() },
        0,
    )
    .unwrap();
    let grids = model.level_grids(dims, spacing);
    let levels = grids
        .iter()
        .map(|g| {
            let [nx, ny, nz] = g.dims;
            let n = g.channels * nx * ny * nz;
            Tensor::new(vec![1, g.channels, nz, ny, nx], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        })
        .collect();
    FeaturePyramid { levels, grids }
}

#[test]
fn encoder_levels_have_expected_sides_and_channels() {
    let case = &source_cases(1, 1)[0];
    let model = ShapeModel::build(&ShapeConfig::default(), 3).unwrap();
    let pyr = model.encode(&gt_edge_map(case, 1.0)).unwrap();
    let shapes: Vec<Vec<usize>> = pyr.levels.iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![vec![1, 8, 32, 32, 32], vec![1, 16, 16, 16, 16], vec![1, 32, 8, 8, 8], vec![1, 64, 4, 4, 4]]
    );
    assert_eq!(model.config().feature_width(), 840);
    let f = model.point_features(&pyr, WorldPoint::new(10.3, 15.0, 20.7)).unwrap();
    assert_eq!(f.len(), 840);
}

#[test]
fn encoder_rejects_indivisible_sides_and_out_of_range_values() {
    let model = ShapeModel::build(&ShapeConfig::default(), 3).unwrap();
    let v = Volume3::filled([20, 32, 32], [1.0; 3], VolumeKind::EdgeMap, 0.5).unwrap();
    assert!(model.encode(&v).is_err());
    let v = Volume3::filled([32; 3], [1.0; 3], VolumeKind::Intensity, 1.5).unwrap();
    assert!(model.encode(&v).is_err());
}

#[test]
fn encoder_is_deterministic_and_input_dependent() {
    let cases = source_cases(2, 2);
    let model = ShapeModel::build(&ShapeConfig::default(), 5).unwrap();
    let a = model.encode(&gt_edge_map(&cases[0], 1.0)).unwrap();
    let b = model.encode(&gt_edge_map(&cases[0], 1.0)).unwrap();
    let c = model.encode(&gt_edge_map(&cases[1], 1.0)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.levels[0], c.levels[0]);
    let again = ShapeModel::build(&ShapeConfig::default(), 5).unwrap();
    assert_eq!(model.to_bytes().unwrap(), again.to_bytes().unwrap());
}

#[test]
fn point_feature_blocks_match_trilinear_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let channels = [3, 4, 5, 2];
    let spacing = [1.0, 1.25, 0.8];
    let pyr = random_pyramid(&mut rng, &channels, [16, 16, 32], spacing);
    let pf = condshape_models::PointFeatureConfig { neighbor_distance_mm: 1.7 };
    for _ in 0..50 {
        let x = WorldPoint::new(rng.random_range(-2.0..18.0), rng.random_range(-2.0..22.0), rng.random_range(-2.0..28.0));
        let got = pyr.point_features(x, &pf).unwrap();
        assert_eq!(got.len(), 7 * channels.iter().sum::<usize>());
        let mut col = 0;
        for off in pf.stencil() {
            let p = x + off;
            for (k, t) in pyr.levels.iter().enumerate() {
                let f = (1usize << k) as f64;
                let [_, c, nz, ny, nx] = t.shape().try_into().unwrap();
                let dims = [nx, ny, nz];
                let lsp = spacing.map(|s| s * f);
                // Level origin: the center of the first pooled cell.
                let local: [f64; 3] = std::array::from_fn(|a| p.to_array()[a] - (f - 1.0) / 2.0 * spacing[a]);
                for ch in 0..c {
                    let data: Vec<f64> =
                        t.data()[ch * nx * ny * nz..(ch + 1) * nx * ny * nz].iter().map(|v| *v as f64).collect();
                    let want = oracle::trilinear(&data, dims, lsp, local);
                    assert!((got[col] as f64 - want).abs() < 1e-5, "level {k} channel {ch}: {} vs {want}", got[col]);
                    col += 1;
                }
            }
        }
    }
}

#[test]
fn constant_grids_give_identical_stencil_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pyr = random_pyramid(&mut rng, &[2, 3], [8, 8, 8], [1.0; 3]);
    for (k, t) in pyr.levels.iter_mut().enumerate() {
        let c = t.shape()[1];
        let vox = t.numel() / c;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = (k * 10 + i / vox) as f32;
        }
    }
    let f = pyr.point_features(WorldPoint::new(3.2, 4.1, 2.9), &Default::default()).unwrap();
    let block = &f[..5];
    assert_eq!(block, &[0.0, 1.0, 10.0, 11.0, 12.0]);
    for s in f.chunks(5) {
        assert_eq!(s, block);
    }
}

#[test]
fn zero_decoder_gives_one_half() {
    let mut model = ShapeModel::build(&ShapeConfig::default(), 1).unwrap();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.entry(id).name.starts_with("dec") {
            model.params.get_mut(id).data_mut().fill(0.0);
        }
    }
    let f: Vec<f32> = (0..840).map(|i| (i as f32).sin() * 100.0).collect();
    assert_eq!(model.decode(&f).unwrap(), 0.5);
    assert!(model.decode(&f[..839]).is_err());
}

#[test]
fn decoder_output_is_strictly_inside_unit_interval() {
    let model = ShapeModel::build(&ShapeConfig::default(), 1).unwrap();
    for scale in [0.0f32, 1.0, 1e3, -1e3, 1e6, -1e6] {
        let f: Vec<f32> = (0..840).map(|i| scale * if i % 3 == 0 { 1.0 } else { -0.5 }).collect();
        let y = model.decode(&f).unwrap();
        assert!(y > 0.0 && y < 1.0, "{y}");
        assert_eq!(y, model.decode(&f).unwrap());
    }
}

#[test]
fn infer_mask_shapes_and_ranges() {
    let case = &source_cases(1, 3)[0];
    let model = ShapeModel::build(&ShapeConfig::default(), 2).unwrap();
    let em = gt_edge_map(case, 1.0);
    let (occ, mask) = model.infer_mask(&em, em.dims()).unwrap();
    assert_eq!(occ.dims(), [32; 3]);
    assert_eq!(mask.dims(), [32; 3]);
    assert_eq!(mask.spacing(), em.spacing());
    assert_eq!(occ.kind(), VolumeKind::Occupancy);
    assert!(occ.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    assert!(mask.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    let (big, _) = model.infer_mask(&em, [64; 3]).unwrap();
    assert_eq!(big.spacing(), [0.5; 3]);
    // Same physical extent: 64 voxels of 0.5 mm cover the 32 mm of the input.
    let extent = |v: &Volume3| {
        let (lo, hi) = v.bounds();
        (hi - lo).to_array()
    };
    assert_eq!(extent(&big), extent(&em));
}

#[test]
fn point_strata_counts_and_oracle_labels() {
    let case = &source_cases(1, 4)[0];
    let grid = case.mask(Role::TargetCavity);
    let src = LabelSource::Spec { spec: &case.spec, role: Role::TargetCavity, grid };
    let strategy = PointSampling::default();
    assert_eq!(strategy.counts(1000), (500, 400, 100));
    let pts = sample_training_points(src, 1000, &strategy, 11).unwrap();
    assert_eq!(pts.len(), 1000);
    assert_eq!(pts, sample_training_points(src, 1000, &strategy, 11).unwrap());
    let (lo, hi) = grid.bounds();
    for (p, _) in &pts {
        assert!((0..3).all(|a| p.to_array()[a] >= lo.to_array()[a] && p.to_array()[a] <= hi.to_array()[a]));
    }
    for (p, label) in pts.iter().step_by(5) {
        let c = case.spec.cavity();
        let r = c.rotation_matrix();
        let d = nalgebra::Vector3::from((*p - WorldPoint::from_array(c.center)).to_array());
        let local = r.transpose() * d;
        let q: f64 = (0..3).map(|a| (local[a] / c.radii[a]).powi(2)).sum();
        assert_eq!(*label, (q <= 1.0) as u8);
    }
    // Near-surface points are balanced between inside and outside, uniform ones mostly outside.
    let inside_near = pts[..500].iter().filter(|(_, l)| *l == 1).count();
    assert!((150..350).contains(&inside_near), "{inside_near}");
}

#[test]
fn mask_labels_use_nearest_voxel() {
    let case = &source_cases(1, 5)[0];
    let mask = case.mask(Role::TargetCavity);
    let pts = sample_training_points(LabelSource::Mask(mask), 300, &PointSampling::default(), 2).unwrap();
    for (p, l) in pts {
        let want = mask.sample_nearest(p);
        assert_eq!(l as f32, want);
    }
    assert!(sample_training_points(LabelSource::Mask(mask), 0, &PointSampling::default(), 2).is_err());
}

#[test]
fn lambda_draws_fill_the_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws: Vec<f64> = (0..1000).map(|_| draw_lambda(ShapeAugment::default().lambda_range, &mut rng)).collect();
    assert!(draws.iter().all(|l| (0.01..=2.0).contains(l)));
    assert!(draws.iter().cloned().fold(f64::INFINITY, f64::min) < 0.1);
    assert!(draws.iter().cloned().fold(0.0, f64::max) > 1.8);
}

#[test]
fn augmented_samples_keep_exact_labels() {
    let case = &source_cases(1, 6)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..4 {
        let ShapeSample { lambda, edge_map, points } =
            make_shape_sample(case, 200, &PointSampling::default(), &ShapeAugment::default(), &mut rng).unwrap();
        assert!((0.01..=2.0).contains(&lambda));
        assert_eq!(edge_map.kind(), VolumeKind::EdgeMap);
        assert!(edge_map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(points.len(), 200);
        assert!(points.iter().any(|(_, l)| *l == 1) && points.iter().any(|(_, l)| *l == 0));
    }
    // Without geometric augmentation labels agree with the untransformed oracle.
    let s = make_shape_sample(case, 200, &PointSampling::default(), &ShapeAugment::lambda_only(), &mut rng).unwrap();
    for (p, l) in s.points {
        assert_eq!(l, condshape_core::synthgen::occupancy_oracle(&case.spec, p, Role::TargetCavity));
    }
}

#[test]
fn trainer_rejects_target_domain_and_empty_sets() {
    let target = make_dataset(1, [32; 3], [1.0; 3], &DomainConfig::target(), 1).unwrap();
    let cfg = ShapeTrainConfig { epochs: 1, ..Default::default() };
    assert!(train_shape_model(&target, &ShapeConfig::default(), &cfg, 0).is_err());
    assert!(train_shape_model(&[], &ShapeConfig::default(), &cfg, 0).is_err());
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shape.ckpt");
    let cfg = ShapeConfig { point_features: condshape_models::PointFeatureConfig { neighbor_distance_mm: 3.0 }, ..Default::default() };
    let model = ShapeModel::build(&cfg, 8).unwrap();
    model.save(&path).unwrap();
    let back = ShapeModel::load(&path).unwrap();
    assert_eq!(back.config(), &cfg);
    assert_eq!(back.to_bytes().unwrap(), model.to_bytes().unwrap());
}

/// Overfits one case: 500 steps with λ augmentation only, then mean BCE on freshly drawn
/// points below 0.1. Also checks run-to-run determinism of the checkpoint.
#[test]
fn overfits_a_single_case() {
    let cases = source_cases(1, 12);
    let cfg = ShapeTrainConfig {
        epochs: 500,
        batch_size: 1,
        points_per_sample: 512,
        augment: ShapeAugment::lambda_only(),
        ..Default::default()
    };
    let trained = train_shape_model(&cases, &ShapeConfig::default(), &cfg, 1).unwrap();
    let case = &cases[0];
    let grid = case.mask(Role::TargetCavity);
    let src = LabelSource::Spec { spec: &case.spec, role: Role::TargetCavity, grid };
    let pts = sample_training_points(src, 2000, &PointSampling::default(), 999).unwrap();
    let mut bce = 0.0;
    for lambda in [0.1, 1.0, 2.0] {
        let pyr = trained.model.encode(&gt_edge_map(case, lambda)).unwrap();
        let xs: Vec<WorldPoint> = pts.iter().map(|(p, _)| *p).collect();
        let occ = trained.model.occupancy_at(&pyr, &xs).unwrap();
        bce += occ
            .iter()
            .zip(&pts)
            .map(|(o, (_, l))| {
                let o = (*o as f64).clamp(1e-7, 1.0 - 1e-7);
                if *l == 1 { -o.ln() } else { -(1.0 - o).ln() }
            })
            .sum::<f64>()
            / pts.len() as f64;
    }
    bce /= 3.0;
    assert!(bce < 0.1, "mean bce {bce}");
    let (_, mask) = trained.model.infer_mask(&gt_edge_map(case, 1.0), case.dims()).unwrap();
    let gt = rasterize(&case.spec, case.dims(), case.spacing(), Role::TargetCavity).unwrap();
    assert!(dice(&mask, &gt).unwrap() > 0.9);
}

#[test]
fn training_is_deterministic() {
    let cases = source_cases(2, 13);
    let cfg = ShapeTrainConfig { epochs: 2, points_per_sample: 64, ..Default::default() };
    let a = train_shape_model(&cases, &ShapeConfig::default(), &cfg, 4).unwrap();
    let b = train_shape_model(&cases, &ShapeConfig::default(), &cfg, 4).unwrap();
    assert_eq!(a.model.to_bytes().unwrap(), b.model.to_bytes().unwrap());
    assert_eq!(a.log, b.log);
    let c = train_shape_model(&cases, &ShapeConfig::default(), &cfg, 5).unwrap();
    assert_ne!(a.model.to_bytes().unwrap(), c.model.to_bytes().unwrap());
}

/// Shifting the edge map by whole voxels shifts the predicted mask by the same amount away
/// from the borders.
#[test]
fn integer_shift_commutes_with_inference() {
    let case = &source_cases(1, 14)[0];
    let model = ShapeModel::build(&ShapeConfig::default(), 6).unwrap();
    let em = gt_edge_map(case, 0.5);
    let shift = 3usize;
    let shifted = Volume3::from_fn(em.dims(), em.spacing(), VolumeKind::EdgeMap, |i, j, k| {
        if i >= shift { em.get(i - shift, j, k) } else { em.get(0, j, k) }
    })
    .unwrap();
    let (occ_a, _) = model.infer_mask(&em, em.dims()).unwrap();
    let (occ_b, _) = model.infer_mask(&shifted, em.dims()).unwrap();
    // Pooling breaks exact equivariance for shifts that are not multiples of the coarsest cell,
    // so compare the finest-level features instead, which are exactly equivariant off the border.
    let pa = model.encode(&em).unwrap();
    let pb = model.encode(&shifted).unwrap();
    let t = &pa.levels[0];
    let [_, c, nz, ny, nx] = t.shape().try_into().unwrap();
    let border = 2 * model.config().convs_per_stage;
    for ch in 0..c {
        for k in border..nz - border {
            for j in border..ny - border {
                for i in border + shift..nx - border {
                    let a = t.data()[((ch * nz + k) * ny + j) * nx + i - shift];
                    let b = pb.levels[0].data()[((ch * nz + k) * ny + j) * nx + i];
                    assert!((a - b).abs() < 1e-4, "{a} vs {b}");
                }
            }
        }
    }
    assert_eq!(occ_a.dims(), occ_b.dims());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn feature_length_matches_config(levels in 2usize..5, base in 1usize..6, d in 0.5f64..4.0) {
        let channels: Vec<usize> = (0..levels).map(|k| base << k).collect();
        let cfg = ShapeConfig {
            encoder_channels: channels.clone(),
            decoder_widths: vec![8],
            point_features: condshape_models::PointFeatureConfig { neighbor_distance_mm: d },
            ..Default::default()
        };
        let model = ShapeModel::build(&cfg, 0).unwrap();
        let side = 1usize << (levels - 1);
        let em = Volume3::filled([side * 2; 3], [1.0; 3], VolumeKind::EdgeMap, 0.3).unwrap();
        let pyr = model.encode(&em).unwrap();
        let f = model.point_features(&pyr, WorldPoint::new(0.4, 1.1, 0.2)).unwrap();
        prop_assert_eq!(f.len(), 7 * channels.iter().sum::<usize>());
        prop_assert_eq!(f.len(), cfg.feature_width());
    }
}
