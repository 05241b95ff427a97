//! Subcommand implementations; `main` only parses arguments and reports errors.

use std::fs;
use std::path::{Path, PathBuf};

use condshape_core::dataset::{read_dataset, write_dataset, DatasetConfig};
use condshape_core::edgemap::{edge_map_union, EdgeParams};
use condshape_core::metrics::MetricsReport;
use condshape_core::synthgen::{Case, Role};
use condshape_core::volio::{read_volume, write_volume};
use condshape_core::Volume3;
use condshape_models::{train_shape_model, EpochLog, ShapeModel, UNet};

use crate::config::StudyConfig;
use crate::error::{CliError, Result};
use crate::sweep::{self, pick, split_target, subsample, Method};

pub const VOLUME_EXT: &str = "vol";

pub fn load_dataset(dir: &Path) -> Result<Vec<Case>> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::Missing(format!("no dataset at {}", dir.display())));
    }
    Ok(read_dataset(dir)?.1)
}

/// Writes a generated dataset and returns its case count.
pub fn gen_data(config: &DatasetConfig, out: &Path) -> Result<usize> {
    let cases = config.generate()?;
    write_dataset(out, config, &cases)?;
    Ok(cases.len())
}

/// Union edge map of one or more mask files.
pub fn edge_map(inputs: &[PathBuf], lambda: f64, out: &Path) -> Result<Volume3> {
    if inputs.is_empty() {
        return Err(CliError::Config("edge-map needs at least one mask".into()));
    }
    let masks = inputs.iter().map(read_volume).collect::<Result<Vec<_>, _>>()?;
    let em = edge_map_union(&masks.iter().collect::<Vec<_>>(), EdgeParams::new(lambda)?)?;
    write_volume(&em, out)?;
    Ok(em)
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(log)?)?;
    Ok(())
}

fn log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".log.json");
    s.into()
}

/// Training cases of a target dataset exactly as the sweep cell `(fraction, seed)` sees them.
pub fn target_subsample(cfg: &StudyConfig, data: &Path, fraction: f64, seed: u64) -> Result<(Vec<Case>, Vec<Case>)> {
    let (_, pool) = split_target(load_dataset(data)?, cfg.test_cases)?;
    let split = subsample(pool.len(), fraction, seed, cfg.sweep.valid_fraction)?;
    Ok((pick(&pool, &split.train), pick(&pool, &split.valid)))
}

pub fn train_edge(cfg: &StudyConfig, data: &Path, fraction: f64, seed: u64, out: &Path) -> Result<UNet> {
    let (train, valid) = target_subsample(cfg, data, fraction, seed)?;
    let t = condshape_models::train_edge_detector(&train, &valid, &cfg.edge_net, &cfg.edge_train, sweep::edge_seed(seed))?;
    t.model.save(out)?;
    write_log(&log_path(out), &t.log)?;
    Ok(t.model)
}

pub fn train_baseline(cfg: &StudyConfig, data: &Path, fraction: f64, seed: u64, out: &Path) -> Result<UNet> {
    let (train, valid) = target_subsample(cfg, data, fraction, seed)?;
    let t = condshape_models::train_baseline(&train, &valid, &cfg.baseline_net, &cfg.baseline_train, sweep::baseline_seed(seed))?;
    t.model.save(out)?;
    write_log(&log_path(out), &t.log)?;
    Ok(t.model)
}

pub fn train_shape(cfg: &StudyConfig, data: &Path, seed: u64, out: &Path) -> Result<ShapeModel> {
    let cases = load_dataset(data)?;
    let t = train_shape_model(&cases, &cfg.shape_net, &cfg.shape_train, seed)?;
    t.model.save(out)?;
    write_log(&log_path(out), &t.log)?;
    Ok(t.model)
}

pub enum Segmenter {
    Dcsm { edge: UNet, shape: ShapeModel },
    Baseline(UNet),
}

impl Segmenter {
    pub fn method(&self) -> Method {
        match self {
            Segmenter::Dcsm { .. } => Method::Dcsm,
            Segmenter::Baseline(_) => Method::Baseline,
        }
    }

    pub fn segment(&self, case: &Case) -> Result<Volume3> {
        match self {
            Segmenter::Dcsm { edge, shape } => sweep::segment_dcsm(edge, shape, case),
            Segmenter::Baseline(net) => sweep::segment_baseline(net, case),
        }
    }
}

/// Writes `<out>/<case id>.vol` masks for every case of a dataset; returns the ids.
pub fn infer(seg: &Segmenter, data: &Path, out: &Path) -> Result<Vec<String>> {
    let cases = load_dataset(data)?;
    fs::create_dir_all(out)?;
    let mut ids = Vec::with_capacity(cases.len());
    for c in &cases {
        let mask = seg.segment(c)?;
        write_volume(&mask, out.join(format!("{}.{VOLUME_EXT}", c.id)))?;
        ids.push(c.id.clone());
    }
    Ok(ids)
}

/// `(id, mask)` pairs of a directory of volume files, or the target-cavity masks of a
/// dataset directory, sorted by id.
pub fn load_masks(dir: &Path) -> Result<Vec<(String, Volume3)>> {
    if dir.join("manifest.json").is_file() {
        return Ok(load_dataset(dir)?.into_iter().map(|c| (c.id.clone(), c.mask(Role::TargetCavity).clone())).collect());
    }
    let entries = fs::read_dir(dir).map_err(|e| CliError::Missing(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for e in entries {
        let path = e?.path();
        if path.extension().is_some_and(|x| x == VOLUME_EXT) {
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.push((id, read_volume(&path)?));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

pub fn eval(pred: &Path, gt: &Path) -> Result<MetricsReport> {
    Ok(condshape_core::metrics::evaluate_cases(&load_masks(pred)?, &load_masks(gt)?)?)
}
