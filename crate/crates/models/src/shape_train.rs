//! Source-domain training of the shape model. Every sample is rebuilt on the fly: the
//! phantom is moved by a random rigid-plus-scale transform (labels stay analytic), the union
//! edge map is rendered at a random λ, then corrupted by intensity noise and local blur.

use condshape_core::augment::{
    apply_geo_to_spec, draw_geo_in, edge_dropout_regions, noise_inject, random_regions, DropoutRegion, GeoRanges,
};
use condshape_core::edgemap::{edge_map_union, EdgeParams};
use condshape_core::synthgen::{rasterize, Case, Domain, Role};
use condshape_core::{seeds, Volume3, WorldPoint};
use condshape_tensorgrad::{AdamHyper, AdamState, GatherRow, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::net::stack_volumes;
use crate::points::{sample_training_points_with, LabelSource, PointSampling};
use crate::shape::{gather_row, ShapeConfig, ShapeModel};
use crate::unet_train::{EpochLog, Trained};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeAugment {
    pub lambda_range: (f64, f64),
    /// Rigid-plus-scale transform about the volume center; `None` disables it.
    pub geometric: Option<GeoRanges>,
    pub noise_prob: f64,
    /// Upper ends of the uniform draws of the Gaussian and speckle sigmas.
    pub gauss_sigma_max: f64,
    pub speckle_sigma_max: f64,
    pub dropout_prob: f64,
    pub dropout_regions: (usize, usize),
    pub dropout_radius_mm: (f64, f64),
    pub dropout_sigma_mm: f64,
}

impl Default for ShapeAugment {
    fn default() -> Self {
        Self {
            lambda_range: (0.01, 2.0),
            // Full rotation and scale ranges; translation shrunk to the 32 mm field of view.
            geometric: Some(GeoRanges { rotation_deg: 150.0, translation_mm: 4.0, scale: (0.7, 1.0) }),
            noise_prob: 0.5,
            gauss_sigma_max: 0.1,
            speckle_sigma_max: 0.3,
            dropout_prob: 0.5,
            dropout_regions: (1, 4),
            dropout_radius_mm: (2.0, 6.0),
            dropout_sigma_mm: 2.0,
        }
    }
}

impl ShapeAugment {
    /// λ augmentation only.
    pub fn lambda_only() -> Self {
        Self { geometric: None, noise_prob: 0.0, dropout_prob: 0.0, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        let (l0, l1) = self.lambda_range;
        let (r0, r1) = self.dropout_regions;
        let ok = l0 > 0.0
            && l1 >= l0
            && (0.0..=1.0).contains(&self.noise_prob)
            && (0.0..=1.0).contains(&self.dropout_prob)
            && r0 >= 1
            && r1 >= r0
            && self.gauss_sigma_max >= 0.0
            && self.speckle_sigma_max >= 0.0;
        if !ok {
            return Err(ModelError::Config("invalid shape augmentation ranges".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub points_per_sample: usize,
    pub adam: AdamHyper,
    pub sampling: PointSampling,
    pub augment: ShapeAugment,
}

impl Default for ShapeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 2,
            points_per_sample: 1024,
            adam: AdamHyper::default(),
            sampling: PointSampling::default(),
            augment: ShapeAugment::default(),
        }
    }
}

/// One augmented training example.
#[derive(Debug, Clone)]
pub struct ShapeSample {
    pub lambda: f64,
    pub edge_map: Volume3,
    pub points: Vec<(WorldPoint, u8)>,
}

pub fn draw_lambda((lo, hi): (f64, f64), rng: &mut impl Rng) -> f64 {
    if hi > lo { rng.random_range(lo..=hi) } else { lo }
}

pub fn make_shape_sample(
    case: &Case,
    n_points: usize,
    sampling: &PointSampling,
    aug: &ShapeAugment,
    rng: &mut impl Rng,
) -> Result<ShapeSample> {
    let (dims, spacing) = (case.dims(), case.spacing());
    let lambda = draw_lambda(aug.lambda_range, rng);
    let spec = match &aug.geometric {
        Some(ranges) => {
            let g = draw_geo_in(ranges, rng);
            apply_geo_to_spec(&case.spec, &g, case.intensity.center())
        }
        None => case.spec.clone(),
    };
    let masks = Role::ALL.iter().map(|r| rasterize(&spec, dims, spacing, *r)).collect::<Result<Vec<_>, _>>()?;
    let mut edge_map = edge_map_union(&masks.iter().collect::<Vec<_>>(), EdgeParams::new(lambda)?)?;
    let grid = &masks[0];
    let src = LabelSource::Spec { spec: &spec, role: Role::TargetCavity, grid };
    if rng.random_bool(aug.noise_prob) {
        let gs = rng.random_range(0.0..=aug.gauss_sigma_max);
        let ss = rng.random_range(0.0..=aug.speckle_sigma_max);
        edge_map = noise_inject(&edge_map, gs, ss, rng.random())?;
    }
    if rng.random_bool(aug.dropout_prob) {
        let n = rng.random_range(aug.dropout_regions.0..=aug.dropout_regions.1);
        let mut regions = random_regions(&edge_map, n, aug.dropout_radius_mm, rng);
        // One region straddles the structure boundary.
        let anchor = sample_training_points_with(
            src,
            1,
            &PointSampling { near_fraction: 1.0, near_sigma_mm: 0.0, far_fraction: 0.0, far_sigma_mm: 0.0 },
            rng,
        )?;
        regions[0] = DropoutRegion { center: anchor[0].0, ..regions[0] };
        edge_map = edge_dropout_regions(&edge_map, &regions, aug.dropout_sigma_mm);
    }
    let points = sample_training_points_with(src, n_points, sampling, rng)?;
    Ok(ShapeSample { lambda, edge_map, points })
}

/// Trains on source-domain cases only and returns the last-epoch model.
pub fn train_shape_model(
    cases: &[Case],
    model_cfg: &ShapeConfig,
    cfg: &ShapeTrainConfig,
    seed: u64,
) -> Result<Trained<ShapeModel>> {
    if cases.is_empty() {
        return Err(ModelError::Config("shape model training set is empty".into()));
    }
    if let Some(c) = cases.iter().find(|c| c.domain != Domain::Source) {
        return Err(ModelError::Config(format!(
            "shape model trains on source-domain cases only; {} is {:?}",
            c.id, c.domain
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.points_per_sample == 0 {
        return Err(ModelError::Config("epochs, batch_size and points_per_sample must be positive".into()));
    }
    cfg.augment.validate()?;
    cfg.sampling.validate()?;
    let mut model = ShapeModel::build(model_cfg, seeds::derive(seed, "shape-init", 0))?;
    let mut adam = AdamState::new(&model.params, cfg.adam);
    let mut rng = seeds::derived_rng(seed, "shape-train", 0);
    let pf = model_cfg.point_features;
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let samples = batch
                .iter()
                .map(|&i| make_shape_sample(&cases[i], cfg.points_per_sample, &cfg.sampling, &cfg.augment, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let x = stack_volumes(&samples.iter().map(|s| &s.edge_map).collect::<Vec<_>>())?;
            let grids = model.level_grids(samples[0].edge_map.dims(), samples[0].edge_map.spacing());
            let mut rows: Vec<GatherRow> = Vec::with_capacity(samples.len() * cfg.points_per_sample);
            let mut labels = Vec::with_capacity(rows.capacity());
            for (b, s) in samples.iter().enumerate() {
                for (p, l) in &s.points {
                    rows.push(gather_row(&grids, b, *p, &pf));
                    labels.push(*l as f32);
                }
            }
            let mut g = Graph::new(&model.params, true);
            let xv = g.input(x);
            let levels = model.encode_graph(&mut g, xv)?;
            let feats = g.gather_trilinear(&levels, &rows)?;
            let pred = model.decode_graph(&mut g, feats)?;
            let y = g.input(Tensor::new(vec![labels.len(), 1], labels)?);
            let loss = g.bce_loss(pred, y)?;
            total += g.value(loss).data()[0] as f64;
            g.backward(loss)?;
            let grads = g.param_grads();
            let updates = g.take_buffer_updates();
            drop(g);
            adam.step(&mut model.params, &grads)?;
            model.params.apply_buffer_updates(updates);
            batches += 1;
        }
        log.push(EpochLog { epoch, train_loss: total / batches as f64, valid_metric: None, lambda: None });
    }
    Ok(Trained { model, log, chosen_epoch: cfg.epochs })
}
