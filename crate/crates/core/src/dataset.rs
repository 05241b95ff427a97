//! On-disk datasets: one directory per case holding `intensity.vol`, `mask_<role>.vol` and
//! `spec.json`, plus a top-level `manifest.json` with the generating configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::{make_dataset_with, Case, DomainConfig, PhantomRanges, PhantomSpec, Role};
use crate::volio::{read_volume, write_volume};
use crate::volume::{Dims, Spacing};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_cases: usize,
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub domain: DomainConfig,
    #[serde(default)]
    pub ranges: PhantomRanges,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn generate(&self) -> Result<Vec<Case>> {
        make_dataset_with(self.n_cases, self.dims, self.spacing_mm, &self.domain, &self.ranges, self.seed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub cases: Vec<String>,
}

pub fn write_dataset(dir: &Path, config: &DatasetConfig, cases: &[Case]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for case in cases {
        let cdir = dir.join(&case.id);
        fs::create_dir_all(&cdir)?;
        write_volume(&case.intensity, cdir.join("intensity.vol"))?;
        for (role, mask) in &case.masks {
            write_volume(mask, cdir.join(format!("mask_{}.vol", role.as_str())))?;
        }
        fs::write(cdir.join("spec.json"), serde_json::to_vec_pretty(&case.spec)?)?;
    }
    let manifest = Manifest { config: config.clone(), cases: cases.iter().map(|c| c.id.clone()).collect() };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| {
        Error::Config(format!("cannot read dataset manifest {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Case>)> {
    let manifest = read_manifest(dir)?;
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for id in &manifest.cases {
        let cdir = dir.join(id);
        let intensity = read_volume(cdir.join("intensity.vol"))?;
        let mut masks = BTreeMap::new();
        for role in Role::ALL {
            masks.insert(role, read_volume(cdir.join(format!("mask_{}.vol", role.as_str())))?);
        }
        let spec: PhantomSpec = serde_json::from_slice(&fs::read(cdir.join("spec.json"))?)?;
        cases.push(Case { id: id.clone(), domain: manifest.config.domain.domain, intensity, masks, spec });
    }
    Ok((manifest, cases))
}
