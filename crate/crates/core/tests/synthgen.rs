use condshape_core::dataset::{read_dataset, write_dataset, DatasetConfig};
use condshape_core::synthgen::{
    make_dataset, occupancy_oracle, rasterize, render_domain, DomainConfig, Part, PhantomRanges, PhantomSpec, Role,
};
use condshape_core::volio::encode_volume;
use condshape_core::{Volume3, WorldPoint};

const GRID: [usize; 3] = [32; 3];
const MM: [f64; 3] = [1.0; 3];

fn sphere(radius: f64) -> PhantomSpec {
    PhantomSpec {
        parts: vec![Part {
            center: [15.5; 3],
            radii: [radius; 3],
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            role: Role::TargetCavity,
        }],
        seed: 0,
    }
}

fn plain(cfg: DomainConfig) -> DomainConfig {
    DomainConfig { intensity_wall: None, ..cfg }
}

#[test]
fn rasterized_sphere_volume() {
    let m = rasterize(&sphere(8.0), GRID, MM, Role::TargetCavity).unwrap();
    let want = 4.0 / 3.0 * std::f64::consts::PI * 512.0;
    let got = m.count_nonzero() as f64;
    assert!((got - want).abs() / want < 0.05, "{got} vs {want}");
    assert_eq!(rasterize(&sphere(8.0), GRID, MM, Role::Companion).unwrap().count_nonzero(), 0);
    assert_eq!(m, rasterize(&sphere(8.0), GRID, MM, Role::TargetCavity).unwrap());
}

#[test]
fn source_rendering_is_two_valued_without_a_wall_intensity() {
    let cases = make_dataset(2, GRID, MM, &DomainConfig::source(), 4).unwrap();
    let v = render_domain(&cases[0].spec, &plain(DomainConfig::source()), GRID, MM, 1).unwrap();
    let mut values: Vec<f32> = v.data().to_vec();
    values.sort_by(f32::total_cmp);
    values.dedup();
    assert_eq!(values.len(), 2);
}

#[test]
fn degenerate_target_equals_source() {
    let spec = &make_dataset(1, GRID, MM, &DomainConfig::source(), 9).unwrap()[0].spec;
    let src = render_domain(spec, &DomainConfig::source(), GRID, MM, 3).unwrap();
    let tgt_cfg = DomainConfig {
        speckle_sigma: 0.0,
        blur_sigma_mm: 0.0,
        cone_enabled: false,
        ..DomainConfig { domain: condshape_core::synthgen::Domain::Target, ..DomainConfig::source() }
    };
    assert_eq!(render_domain(spec, &tgt_cfg, GRID, MM, 3).unwrap(), src);
}

#[test]
fn speckle_has_the_configured_variance() {
    let dims = [64; 3];
    let spec = PhantomSpec {
        parts: vec![Part { center: [31.5; 3], ..sphere(20.0).parts[0].clone() }],
        seed: 0,
    };
    let clean_cfg = DomainConfig::source();
    let noisy_cfg = DomainConfig {
        domain: condshape_core::synthgen::Domain::Target,
        speckle_sigma: 0.2,
        blur_sigma_mm: 0.0,
        cone_enabled: false,
        ..clean_cfg.clone()
    };
    let clean = render_domain(&spec, &clean_cfg, dims, MM, 0).unwrap();
    let noisy = render_domain(&spec, &noisy_cfg, dims, MM, 17).unwrap();
    let ratios: Vec<f64> = clean
        .data()
        .iter()
        .zip(noisy.data())
        .map(|(c, n)| *n as f64 / *c as f64 - 1.0)
        .collect();
    let m = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let var = ratios.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / (ratios.len() - 1) as f64;
    assert!((var - 0.04).abs() < 0.2 * 0.04, "variance {var}");
}

#[test]
fn cone_blanks_the_upper_corners() {
    let spec = &make_dataset(1, GRID, MM, &DomainConfig::source(), 2).unwrap()[0].spec;
    let v = render_domain(spec, &DomainConfig::target(), GRID, MM, 5).unwrap();
    assert_eq!(v.get(0, 0, 31), 0.0);
    assert_eq!(v.get(31, 31, 20), 0.0);
    assert_ne!(v.get(16, 16, 10), 0.0);
}

#[test]
fn datasets_are_reproducible_and_consistent() {
    let a = make_dataset(3, GRID, MM, &DomainConfig::target(), 42).unwrap();
    let b = make_dataset(3, GRID, MM, &DomainConfig::target(), 42).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(encode_volume(&x.intensity), encode_volume(&y.intensity));
        for role in Role::ALL {
            assert_eq!(encode_volume(x.mask(role)), encode_volume(y.mask(role)));
        }
    }
    for case in &a {
        assert!(case.mask(Role::TargetCavity).count_nonzero() > 0);
        for role in Role::ALL {
            assert_eq!(case.mask(role), &rasterize(&case.spec, GRID, MM, role).unwrap());
        }
    }
    assert_ne!(a[0].spec, a[1].spec);
}

#[test]
fn oracle_and_raster_agree_at_voxel_centers() {
    let case = &make_dataset(1, GRID, MM, &DomainConfig::source(), 8).unwrap()[0];
    let m = case.mask(Role::Shell);
    for k in 0..32 {
        for j in 0..32 {
            for i in 0..32 {
                let o = occupancy_oracle(&case.spec, m.world_of(i, j, k), Role::Shell);
                assert_eq!(o as f32, m.get(i, j, k));
            }
        }
    }
}

#[test]
fn domains_share_anatomy() {
    let s = make_dataset(4, GRID, MM, &DomainConfig::source(), 77).unwrap();
    let t = make_dataset(4, GRID, MM, &DomainConfig::target(), 77).unwrap();
    for (a, b) in s.iter().zip(&t) {
        assert_eq!(a.spec, b.spec);
        assert_eq!(a.masks, b.masks);
        assert_ne!(a.intensity, b.intensity);
    }
}

#[test]
fn cavities_stay_inside_the_grid() {
    let cases = make_dataset(30, GRID, MM, &DomainConfig::source(), 1).unwrap();
    for c in &cases {
        let m: &Volume3 = c.mask(Role::Shell);
        for k in 0..32 {
            for j in 0..32 {
                assert_eq!(m.get(0, j, k), 0.0);
                assert_eq!(m.get(31, j, k), 0.0);
                assert_eq!(m.get(j, k, 0), 0.0);
                assert_eq!(m.get(j, 0, k), 0.0);
            }
        }
        assert!(occupancy_oracle(&c.spec, WorldPoint::from_array(c.spec.cavity().center), Role::TargetCavity) == 1);
    }
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        n_cases: 2,
        dims: [16; 3],
        spacing_mm: [2.0; 3],
        domain: DomainConfig::target(),
        ranges: PhantomRanges::default(),
        seed: 3,
    };
    let cases = cfg.generate().unwrap();
    write_dataset(dir.path(), &cfg, &cases).unwrap();
    let (manifest, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(manifest.config, cfg);
    assert_eq!(back, cases);
    assert!(dir.path().join("case_0001/mask_target_cavity.vol").exists());
}
