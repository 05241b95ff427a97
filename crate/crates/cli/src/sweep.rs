//! The data-efficiency sweep: for each seed the target pool is shuffled once and nested
//! prefixes are taken for every fraction; each (fraction, seed) cell trains an edge detector
//! and a baseline on its subsample, then both methods segment the fixed test split. The
//! shape model is passed in frozen and never trained here.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use condshape_core::metrics::{evaluate_case, CaseMetrics, MetricsReport, Stat};
use condshape_core::synthgen::{Case, Role};
use condshape_core::{seeds, Volume3, VolumeKind};
use condshape_models::unet_train::{predict_volume, threshold};
use condshape_models::{train_baseline, train_edge_detector, EpochLog, ShapeModel, Trained, UNet};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::StudyConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dcsm,
    Baseline,
}

/// Indices into the training pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

/// Subsample size for a pool share (rounded to the nearest case).
pub fn subsample_size(pool_len: usize, fraction: f64) -> usize {
    (fraction * pool_len as f64).round() as usize
}

/// Nested subsample: the pool is shuffled once per seed and the first `n` indices are taken;
/// of those, the first `max(1, ceil(valid_fraction · n))` validate and the rest train.
pub fn subsample(pool_len: usize, fraction: f64, seed: u64, valid_fraction: f64) -> Result<Split> {
    let n = subsample_size(pool_len, fraction);
    let n_valid = ((valid_fraction * n as f64).ceil() as usize).max(1);
    if n <= n_valid {
        return Err(CliError::Config(format!(
            "fraction {fraction} of a {pool_len}-case pool leaves no training cases"
        )));
    }
    let mut order: Vec<usize> = (0..pool_len).collect();
    order.shuffle(&mut seeds::derived_rng(seed, "subsample", 0));
    Ok(Split { valid: order[..n_valid].to_vec(), train: order[n_valid..n].to_vec() })
}

/// Splits a target dataset into the fixed test set (first `test_cases`) and the pool.
pub fn split_target(mut cases: Vec<Case>, test_cases: usize) -> Result<(Vec<Case>, Vec<Case>)> {
    if test_cases == 0 || test_cases >= cases.len() {
        return Err(CliError::Config(format!(
            "need 0 < test_cases < {} target cases, got {test_cases}",
            cases.len()
        )));
    }
    let pool = cases.split_off(test_cases);
    Ok((cases, pool))
}

pub fn pick(pool: &[Case], idx: &[usize]) -> Vec<Case> {
    idx.iter().map(|&i| pool[i].clone()).collect()
}

/// Training seeds depend on the sweep seed and the method only, so a standalone training
/// command with the same seed and fraction reproduces a sweep cell exactly.
pub fn edge_seed(seed: u64) -> u64 {
    seeds::derive(seed, "edge-detector", 0)
}

pub fn baseline_seed(seed: u64) -> u64 {
    seeds::derive(seed, "baseline", 0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPlan {
    pub fraction: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub pool_cases: usize,
    pub test_cases: usize,
    pub cells: Vec<CellPlan>,
    pub config: StudyConfig,
}

pub fn plan(cfg: &StudyConfig, pool_len: usize) -> Result<SweepPlan> {
    cfg.sweep.validate()?;
    let mut cells = Vec::new();
    for &fraction in &cfg.sweep.fractions {
        for &seed in &cfg.sweep.seeds {
            let s = subsample(pool_len, fraction, seed, cfg.sweep.valid_fraction)?;
            cells.push(CellPlan { fraction, seed, n_train: s.train.len(), n_valid: s.valid.len() });
        }
    }
    Ok(SweepPlan { pool_cases: pool_len, test_cases: cfg.test_cases, cells, config: cfg.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub method: Method,
    pub fraction: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
    /// Epoch whose parameters were used (last for the edge detector, best for the baseline).
    pub chosen_epoch: usize,
    pub checkpoint_sha256: String,
    /// Hash of the frozen shape model used by DCSM cells.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape_model_sha256: Option<String>,
    /// Test cases whose prediction was empty; they score Dice 0 and the distance penalty.
    pub empty_predictions: usize,
    pub metrics: MetricsReport,
    /// Wall-clock inference time; the only nondeterministic field of the report.
    pub time_per_volume_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodPair {
    pub baseline: String,
    pub dcsm: String,
}

/// One row per fraction, metrics pooled over seeds, laid out as `mean (std)` per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub percent: f64,
    /// `"train,valid"` case counts.
    pub n_train_valid: String,
    pub dice: MethodPair,
    pub asd_mm: MethodPair,
    pub hd_mm: MethodPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub shape_model_sha256: String,
    pub edge_width_factor: f64,
    pub baseline_width_factor: f64,
    pub cells: Vec<CellReport>,
    pub table: Vec<TableRow>,
}

impl SweepReport {
    /// Mean Hausdorff distance of one cell.
    pub fn mean_hd(&self, method: Method, fraction: f64, seed: u64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.fraction == fraction && c.seed == seed)
            .map(|c| c.metrics.aggregate.hd_mm.mean)
    }

    /// The report with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.cells.iter_mut().for_each(|c| c.time_per_volume_s = 0.0);
        r
    }
}

/// Metrics with the empty-prediction policy: an empty mask has no surface, so it scores
/// Dice 0 and `penalty_mm` for both distances instead of aborting the sweep.
pub fn evaluate_or_penalize(id: &str, pred: &Volume3, gt: &Volume3, penalty_mm: f64) -> Result<(CaseMetrics, bool)> {
    if pred.count_nonzero() == 0 {
        return Ok((CaseMetrics { id: id.to_string(), dice: 0.0, asd_mm: penalty_mm, hd_mm: penalty_mm }, true));
    }
    Ok((evaluate_case(id, pred, gt)?, false))
}

/// Diagonal of the volume extent: no two surface points can be farther apart.
pub fn distance_penalty(v: &Volume3) -> f64 {
    let (lo, hi) = v.bounds();
    lo.distance(hi)
}

pub fn segment_dcsm(edge: &UNet, shape: &ShapeModel, case: &Case) -> Result<Volume3> {
    let em = predict_volume(edge, &case.intensity, VolumeKind::EdgeMap)?;
    Ok(shape.infer_mask(&em, case.dims())?.1)
}

pub fn segment_baseline(net: &UNet, case: &Case) -> Result<Volume3> {
    Ok(threshold(&predict_volume(net, &case.intensity, VolumeKind::Occupancy)?))
}

/// Segments and scores every test case; returns the report, the empty count and the mean
/// inference time per volume.
pub fn score(test: &[Case], segment: impl Fn(&Case) -> Result<Volume3> + Sync) -> Result<(MetricsReport, usize, f64)> {
    let rows = test
        .par_iter()
        .map(|c| {
            let t = Instant::now();
            let pred = segment(c)?;
            let dt = t.elapsed().as_secs_f64();
            let gt = c.mask(Role::TargetCavity);
            let (m, empty) = evaluate_or_penalize(&c.id, &pred, gt, distance_penalty(gt))?;
            Ok((m, empty, dt))
        })
        .collect::<Result<Vec<_>>>()?;
    let empty = rows.iter().filter(|r| r.1).count();
    let time = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;
    Ok((MetricsReport::from_cases(rows.into_iter().map(|r| r.0).collect()), empty, time))
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(log)?)?;
    Ok(())
}

pub struct CellModels {
    pub edge: Trained<UNet>,
    pub baseline: Trained<UNet>,
}

/// Trains both networks of one cell.
pub fn train_cell(cfg: &StudyConfig, pool: &[Case], fraction: f64, seed: u64) -> Result<(Split, CellModels)> {
    let split = subsample(pool.len(), fraction, seed, cfg.sweep.valid_fraction)?;
    let (train, valid) = (pick(pool, &split.train), pick(pool, &split.valid));
    let edge = train_edge_detector(&train, &valid, &cfg.edge_net, &cfg.edge_train, edge_seed(seed))?;
    let baseline = train_baseline(&train, &valid, &cfg.baseline_net, &cfg.baseline_train, baseline_seed(seed))?;
    Ok((split, CellModels { edge, baseline }))
}

pub fn cell_dir(out: &Path, fraction: f64, seed: u64) -> PathBuf {
    out.join("cells").join(format!("fraction_{fraction}_seed_{seed}"))
}

/// Runs every cell. With `out` set, checkpoints, logs and `report.json` are written there.
pub fn run_sweep(
    cfg: &StudyConfig,
    shape: &ShapeModel,
    target: Vec<Case>,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<SweepReport> {
    cfg.sweep.validate()?;
    let (test, pool) = split_target(target, cfg.test_cases)?;
    plan(cfg, pool.len())?;
    let shape_hash = sha256_hex(&shape.to_bytes()?);
    let mut cells = Vec::new();
    for &fraction in &cfg.sweep.fractions {
        for &seed in &cfg.sweep.seeds {
            let t = Instant::now();
            let (split, models) = train_cell(cfg, &pool, fraction, seed)?;
            let (n_train, n_valid) = (split.train.len(), split.valid.len());
            let (dm, de, dt) = score(&test, |c| segment_dcsm(&models.edge.model, shape, c))?;
            let (bm, be, bt) = score(&test, |c| segment_baseline(&models.baseline.model, c))?;
            let edge_bytes = models.edge.model.to_bytes()?;
            let base_bytes = models.baseline.model.to_bytes()?;
            if let Some(out) = out {
                let dir = cell_dir(out, fraction, seed);
                fs::create_dir_all(&dir)?;
                models.edge.model.save(&dir.join("edge.ckpt"))?;
                models.baseline.model.save(&dir.join("baseline.ckpt"))?;
                write_log(&dir.join("edge_log.json"), &models.edge.log)?;
                write_log(&dir.join("baseline_log.json"), &models.baseline.log)?;
            }
            cells.push(CellReport {
                method: Method::Dcsm,
                fraction,
                seed,
                n_train,
                n_valid,
                chosen_epoch: models.edge.chosen_epoch,
                checkpoint_sha256: sha256_hex(&edge_bytes),
                shape_model_sha256: Some(sha256_hex(&shape.to_bytes()?)),
                empty_predictions: de,
                metrics: dm,
                time_per_volume_s: dt,
            });
            cells.push(CellReport {
                method: Method::Baseline,
                fraction,
                seed,
                n_train,
                n_valid,
                chosen_epoch: models.baseline.chosen_epoch,
                checkpoint_sha256: sha256_hex(&base_bytes),
                shape_model_sha256: None,
                empty_predictions: be,
                metrics: bm,
                time_per_volume_s: bt,
            });
            let n = cells.len();
            progress(&format!(
                "fraction {fraction} seed {seed} ({n_train},{n_valid}): hd dcsm {:.2} baseline {:.2} [{:.0} s]",
                cells[n - 2].metrics.aggregate.hd_mm.mean,
                cells[n - 1].metrics.aggregate.hd_mm.mean,
                t.elapsed().as_secs_f64()
            ));
        }
    }
    let report = SweepReport {
        shape_model_sha256: shape_hash,
        edge_width_factor: cfg.edge_net.width_factor,
        baseline_width_factor: cfg.baseline_net.width_factor,
        table: table(&cells, &cfg.sweep.fractions),
        cells,
    };
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(report)
}

fn table(cells: &[CellReport], fractions: &[f64]) -> Vec<TableRow> {
    fractions
        .iter()
        .map(|&f| {
            let of = |m: Method| -> Vec<&CaseMetrics> {
                cells.iter().filter(|c| c.fraction == f && c.method == m).flat_map(|c| &c.metrics.cases).collect()
            };
            let (b, d) = (of(Method::Baseline), of(Method::Dcsm));
            let pair = |get: fn(&CaseMetrics) -> f64| MethodPair {
                baseline: Stat::of(&b.iter().map(|c| get(c)).collect::<Vec<_>>()).to_string(),
                dcsm: Stat::of(&d.iter().map(|c| get(c)).collect::<Vec<_>>()).to_string(),
            };
            let first = cells.iter().find(|c| c.fraction == f);
            TableRow {
                percent: f * 100.0,
                n_train_valid: first.map_or_else(String::new, |c| format!("{},{}", c.n_train, c.n_valid)),
                dice: pair(|c| c.dice),
                asd_mm: pair(|c| c.asd_mm),
                hd_mm: pair(|c| c.hd_mm),
            }
        })
        .collect()
}
