//! Configurable 3D UNet: encoder stages of two (conv, batch norm, leaky ReLU) units followed
//! by max-downsampling, a bottom block, and a symmetric decoder of nearest-neighbour
//! upsampling, skip concatenation and conv blocks, closed by a 1×1 convolution head.

use std::fs;
use std::path::Path;

use condshape_tensorgrad::{checkpoint, Graph, Layer, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::net::{adopt_params, run, Init};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UNetRole {
    EdgeDetector,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutActivation {
    Sigmoid,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub role: UNetRole,
    /// Full-scale channel count of each encoder stage; one downsampling per stage.
    pub down_channels: Vec<usize>,
    /// Multiplier applied to `down_channels` (rounded, at least 1).
    pub width_factor: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    pub out_activation: OutActivation,
    /// Training patch side in voxels.
    pub patch_size: usize,
}

impl UNetConfig {
    /// Five stages, 32-64-128-256-256 channels at full scale.
    pub fn baseline() -> Self {
        Self {
            role: UNetRole::Baseline,
            down_channels: vec![32, 64, 128, 256, 256],
            width_factor: 0.25,
            in_channels: 1,
            out_channels: 1,
            out_activation: OutActivation::Sigmoid,
            patch_size: 32,
        }
    }

    /// Four stages, 32-64-128-256 channels at full scale.
    pub fn edge_detector() -> Self {
        Self { role: UNetRole::EdgeDetector, down_channels: vec![32, 64, 128, 256], ..Self::baseline() }
    }

    pub fn depth(&self) -> usize {
        self.down_channels.len()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.down_channels.iter().map(|c| ((*c as f64 * self.width_factor).round() as usize).max(1)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.down_channels.is_empty() || self.down_channels.contains(&0) {
            return Err(ModelError::Config("down_channels must be a nonempty list of positive counts".into()));
        }
        if !(self.width_factor > 0.0) || self.in_channels == 0 {
            return Err(ModelError::Config("width_factor and in_channels must be positive".into()));
        }
        if self.out_channels != 1 || self.out_activation != OutActivation::Sigmoid {
            return Err(ModelError::Config(format!(
                "{:?} networks have one sigmoid output channel",
                self.role
            )));
        }
        check_side(self.patch_size, self.depth())
    }
}

fn check_side(side: usize, depth: usize) -> Result<()> {
    let f = 1usize << depth;
    if side == 0 || side % f != 0 {
        return Err(ModelError::Config(format!(
            "spatial side {side} is not divisible by 2^{depth} = {f}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    pub params: ParamStore<f32>,
    enc: Vec<Vec<Layer>>,
    bottom: Vec<Layer>,
    dec: Vec<Vec<Layer>>,
    head: Vec<Layer>,
}

impl UNet {
    /// Deterministic construction: the same config and seed give identical parameters.
    pub fn build(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels();
        let mut params = ParamStore::new();
        let mut init = Init { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut enc = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &c) in ch.iter().enumerate() {
            enc.push(init.conv_block(&format!("enc{i}"), cin, c, 2)?);
            cin = c;
        }
        let bottom = init.conv_block("bottom", cin, cin, 2)?;
        let mut dec = vec![Vec::new(); ch.len()];
        let mut below = cin;
        for i in (0..ch.len()).rev() {
            dec[i] = init.conv_block(&format!("dec{i}"), below + ch[i], ch[i], 2)?;
            below = ch[i];
        }
        let mut head = vec![init.conv("head", ch[0], cfg.out_channels, 1)?];
        if cfg.out_activation == OutActivation::Sigmoid {
            head.push(Layer::Sigmoid);
        }
        Ok(Self { cfg: cfg.clone(), params, enc, bottom, dec, head })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn num_encoder_stages(&self) -> usize {
        self.enc.len()
    }

    /// `x: [N, C_in, S0, S1, S2]` with every side divisible by `2^depth`.
    pub fn forward(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 5 || s[1] != self.cfg.in_channels {
            return Err(ModelError::Config(format!(
                "unet input must be [N, {}, S, S, S], got {s:?}",
                self.cfg.in_channels
            )));
        }
        for side in &s[2..] {
            check_side(*side, self.cfg.depth())?;
        }
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for block in &self.enc {
            h = run(block, g, h)?;
            skips.push(h);
            h = g.max_downsample(h)?;
        }
        h = run(&self.bottom, g, h)?;
        for (block, skip) in self.dec.iter().zip(&skips).rev() {
            let up = g.nearest_upsample(h)?;
            let cat = g.concat(&[up, *skip], 1)?;
            h = run(block, g, cat)?;
        }
        run(&self.head, g, h)
    }

    /// Evaluation-mode forward pass.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new(&self.params, false);
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(checkpoint::encode(&self.params, None)?)
    }

    /// Writes `<path>` (checkpoint) and `<path>.json` (architecture sidecar).
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        fs::write(sidecar(path), serde_json::to_vec_pretty(&self.cfg)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: UNetConfig = serde_json::from_slice(&fs::read(sidecar(path))?)?;
        let (store, _) = checkpoint::load(path)?;
        let mut net = Self::build(&cfg, 0)?;
        adopt_params(&mut net.params, store)?;
        Ok(net)
    }
}

pub(crate) fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
