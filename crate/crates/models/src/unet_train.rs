//! Patch-wise trainers for the two UNet roles.
//!
//! The edge detector regresses union edge maps with MSE while λ follows the cosine
//! schedule (targets are rebuilt from the masks every epoch) and returns the last epoch.
//! The baseline segments the target cavity with the Jaccard loss under rotation and
//! translation augmentation and returns the epoch with the best validation Dice.

use condshape_core::augment::{draw_geo_in, warp_volume, GeoParams, GeoRanges};
use condshape_core::edgemap::{edge_map_union, EdgeParams, LambdaSchedule};
use condshape_core::metrics::dice;
use condshape_core::synthgen::{Case, Role};
use condshape_core::{seeds, Volume3, VolumeKind};
use condshape_tensorgrad::{AdamHyper, AdamState, Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::net::{tensor_to_volume, volume_to_tensor};
use crate::unet::{UNet, UNetConfig, UNetRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetTrainConfig {
    pub epochs: usize,
    /// Patches drawn per epoch regardless of the training-set size, so runs with different
    /// amounts of data get the same number of optimizer steps.
    pub patches_per_epoch: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    /// Share of patches forced to intersect the structure's bounding box.
    pub foreground_fraction: f64,
    /// Rotation/translation augmentation (voxel warp of image and target together).
    pub augment: bool,
    pub augment_ranges: GeoRanges,
}

impl UNetTrainConfig {
    pub fn edge_detector() -> Self {
        Self {
            epochs: 20,
            patches_per_epoch: 64,
            batch_size: 2,
            adam: AdamHyper::default(),
            foreground_fraction: 0.5,
            augment: false,
            augment_ranges: GeoRanges { rotation_deg: 30.0, translation_mm: 4.0, scale: (1.0, 1.0) },
        }
    }

    pub fn baseline() -> Self {
        Self { augment: true, ..Self::edge_detector() }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patches_per_epoch < self.batch_size {
            return Err(ModelError::Config(
                "epochs, batch_size and patches_per_epoch >= batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: Option<f64>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose parameters were returned.
    pub chosen_epoch: usize,
}

/// Inclusive voxel bounding box of the nonzero voxels.
fn bbox(v: &Volume3) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (idx, x) in v.data().iter().enumerate() {
        if *x != 0.0 {
            let c = v.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            any = true;
        }
    }
    any.then_some((lo, hi))
}

fn draw_corner(dims: [usize; 3], side: usize, focus: Option<([usize; 3], [usize; 3])>, rng: &mut ChaCha8Rng) -> [usize; 3] {
    std::array::from_fn(|a| {
        let max = dims[a] - side;
        match focus {
            Some((lo, hi)) => {
                let from = (lo[a] + 1).saturating_sub(side).min(max);
                let to = hi[a].min(max).max(from);
                rng.random_range(from..=to)
            }
            None => rng.random_range(0..=max),
        }
    })
}

fn extract(v: &Volume3, corner: [usize; 3], side: usize, out: &mut Vec<f32>) {
    for k in corner[2]..corner[2] + side {
        for j in corner[1]..corner[1] + side {
            let start = v.index(corner[0], j, k);
            out.extend_from_slice(&v.data()[start..start + side]);
        }
    }
}

struct Sample {
    image: Volume3,
    target: Volume3,
    focus: Option<([usize; 3], [usize; 3])>,
}

/// One epoch of patch-wise optimization over `samples`; returns the mean batch loss.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    net: &mut UNet,
    adam: &mut AdamState<f32>,
    samples: &[Sample],
    cfg: &UNetTrainConfig,
    rng: &mut ChaCha8Rng,
    loss_kind: UNetRole,
) -> Result<f64> {
    let side = net.config().patch_size;
    let steps = cfg.patches_per_epoch / cfg.batch_size;
    let mut total = 0.0;
    for _ in 0..steps {
        let mut xs = Vec::with_capacity(cfg.batch_size * side * side * side);
        let mut ys = Vec::with_capacity(xs.capacity());
        for _ in 0..cfg.batch_size {
            let s = &samples[rng.random_range(0..samples.len())];
            let dims = s.image.dims();
            if dims.iter().any(|d| *d < side) {
                return Err(ModelError::Config(format!("volume {dims:?} is smaller than the {side}³ patch")));
            }
            let focused = rng.random_bool(cfg.foreground_fraction.clamp(0.0, 1.0));
            let corner = draw_corner(dims, side, if focused { s.focus } else { None }, rng);
            if cfg.augment {
                let g: GeoParams = draw_geo_in(&cfg.augment_ranges, rng);
                let fill = s.image.data()[0];
                let image = warp_volume(&s.image, &g, fill)?;
                let target = warp_volume(&s.target, &g, 0.0)?;
                extract(&image, corner, side, &mut xs);
                extract(&target, corner, side, &mut ys);
            } else {
                extract(&s.image, corner, side, &mut xs);
                extract(&s.target, corner, side, &mut ys);
            }
        }
        let shape = vec![cfg.batch_size, 1, side, side, side];
        let mut g = Graph::new(&net.params, true);
        let x = g.input(Tensor::new(shape.clone(), xs)?);
        let y = g.input(Tensor::new(shape, ys)?);
        let pred = net.forward(&mut g, x)?;
        let loss = match loss_kind {
            UNetRole::EdgeDetector => g.mse_loss(pred, y)?,
            UNetRole::Baseline => g.jaccard_loss(pred, y)?,
        };
        total += g.value(loss).data()[0] as f64;
        g.backward(loss)?;
        let grads = g.param_grads();
        let updates = g.take_buffer_updates();
        drop(g);
        adam.step(&mut net.params, &grads)?;
        net.params.apply_buffer_updates(updates);
    }
    Ok(total / steps as f64)
}

/// Full-volume prediction of a single-channel network on one image.
pub fn predict_volume(net: &UNet, image: &Volume3, kind: VolumeKind) -> Result<Volume3> {
    let out = net.predict(&volume_to_tensor(image))?;
    // Sigmoid outputs are in [0, 1] up to rounding at the ends.
    let v = tensor_to_volume(&out, 0, 0, image.spacing(), VolumeKind::Intensity)?;
    Ok(v.map(kind, |x| x.clamp(0.0, 1.0))?)
}

/// Thresholds a probability volume at 0.5.
pub fn threshold(prob: &Volume3) -> Volume3 {
    prob.map(VolumeKind::Mask, |x| if x >= 0.5 { 1.0 } else { 0.0 }).expect("binary values")
}

fn require_cases(cases: &[Case], what: &str) -> Result<()> {
    if cases.is_empty() {
        return Err(ModelError::Config(format!("{what} set is empty")));
    }
    Ok(())
}

fn union_target(case: &Case, lambda: f64) -> Result<Volume3> {
    Ok(edge_map_union(&case.all_masks(), EdgeParams::new(lambda)?)?)
}

/// λ for a 1-based epoch: the schedule runs over `epochs - 1` intervals so that the first
/// epoch uses `lambda_start` and the last uses `lambda_end`.
pub fn edge_lambda(epochs: usize, epoch: usize) -> Result<f64> {
    let sched = LambdaSchedule::standard((epochs.max(2) - 1) as u32);
    Ok(sched.lambda_at((epoch - 1) as u32)?)
}

pub fn train_edge_detector(
    train: &[Case],
    valid: &[Case],
    net_cfg: &UNetConfig,
    cfg: &UNetTrainConfig,
    seed: u64,
) -> Result<Trained<UNet>> {
    require_cases(train, "training")?;
    cfg.validate()?;
    if net_cfg.role != UNetRole::EdgeDetector {
        return Err(ModelError::Config("train_edge_detector needs an edge_detector config".into()));
    }
    let mut net = UNet::build(net_cfg, seeds::derive(seed, "edge-init", 0))?;
    let mut adam = AdamState::new(&net.params, cfg.adam);
    let mut rng = seeds::derived_rng(seed, "edge-train", 0);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lambda = edge_lambda(cfg.epochs, epoch)?;
        let samples = train
            .iter()
            .map(|c| {
                let target = union_target(c, lambda)?;
                let focus = bbox(&target.map(VolumeKind::Intensity, |v| (v >= 1.0) as u8 as f32)?);
                Ok(Sample { image: c.intensity.clone(), target, focus })
            })
            .collect::<Result<Vec<_>>>()?;
        let train_loss = run_epoch(&mut net, &mut adam, &samples, cfg, &mut rng, UNetRole::EdgeDetector)?;
        let valid_metric = if valid.is_empty() {
            None
        } else {
            let mut s = 0.0;
            for c in valid {
                let pred = predict_volume(&net, &c.intensity, VolumeKind::EdgeMap)?;
                let gt = union_target(c, lambda)?;
                s += pred.data().iter().zip(gt.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
                    / pred.len() as f64;
            }
            Some(s / valid.len() as f64)
        };
        log.push(EpochLog { epoch, train_loss, valid_metric, lambda: Some(lambda) });
    }
    Ok(Trained { model: net, log, chosen_epoch: cfg.epochs })
}

pub fn train_baseline(
    train: &[Case],
    valid: &[Case],
    net_cfg: &UNetConfig,
    cfg: &UNetTrainConfig,
    seed: u64,
) -> Result<Trained<UNet>> {
    require_cases(train, "training")?;
    require_cases(valid, "validation")?;
    cfg.validate()?;
    if net_cfg.role != UNetRole::Baseline {
        return Err(ModelError::Config("train_baseline needs a baseline config".into()));
    }
    let mut net = UNet::build(net_cfg, seeds::derive(seed, "baseline-init", 0))?;
    let mut adam = AdamState::new(&net.params, cfg.adam);
    let mut rng = seeds::derived_rng(seed, "baseline-train", 0);
    let samples: Vec<Sample> = train
        .iter()
        .map(|c| {
            let target = c.mask(Role::TargetCavity).clone();
            Sample { image: c.intensity.clone(), focus: bbox(&target), target }
        })
        .collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, UNet)> = None;
    for epoch in 1..=cfg.epochs {
        let train_loss = run_epoch(&mut net, &mut adam, &samples, cfg, &mut rng, UNetRole::Baseline)?;
        let mut score = 0.0;
        for c in valid {
            let pred = threshold(&predict_volume(&net, &c.intensity, VolumeKind::Occupancy)?);
            score += dice(&pred, c.mask(Role::TargetCavity))?;
        }
        score /= valid.len() as f64;
        log.push(EpochLog { epoch, train_loss, valid_metric: Some(score), lambda: None });
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, net.clone()));
        }
    }
    let (_, chosen_epoch, model) = best.expect("at least one epoch");
    Ok(Trained { model, log, chosen_epoch })
}
