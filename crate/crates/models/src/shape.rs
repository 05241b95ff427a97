//! Edge-map-conditioned implicit shape model: a multi-scale convolutional encoder produces a
//! feature pyramid, features are trilinearly sampled at a 7-point stencil around each query
//! point, and a point-wise MLP decodes the stacked features into an occupancy.

use std::fs;
use std::path::Path;

use condshape_core::{Volume3, VolumeKind, WorldPoint};
use condshape_tensorgrad::{checkpoint, GatherRow, Graph, Layer, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::net::{adopt_params, run, volume_to_tensor, Init};
use crate::unet::sidecar;

/// Points decoded per graph during dense inference.
const INFER_CHUNK: usize = 4096;

/// Reported occupancies are kept in the open interval: an f32 sigmoid rounds to exactly 0
/// or 1 for large logits.
fn open_unit(v: f32) -> f32 {
    v.clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointFeatureConfig {
    pub neighbor_distance_mm: f64,
}

impl Default for PointFeatureConfig {
    fn default() -> Self {
        Self { neighbor_distance_mm: 2.0 }
    }
}

impl PointFeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.neighbor_distance_mm > 0.0 && self.neighbor_distance_mm.is_finite()) {
            return Err(ModelError::Config("neighbor_distance_mm must be positive".into()));
        }
        Ok(())
    }

    /// World offsets in the order `0, +x, -x, +y, -y, +z, -z`.
    pub fn stencil(&self) -> [WorldPoint; 7] {
        let d = self.neighbor_distance_mm;
        [
            WorldPoint::new(0.0, 0.0, 0.0),
            WorldPoint::new(d, 0.0, 0.0),
            WorldPoint::new(-d, 0.0, 0.0),
            WorldPoint::new(0.0, d, 0.0),
            WorldPoint::new(0.0, -d, 0.0),
            WorldPoint::new(0.0, 0.0, d),
            WorldPoint::new(0.0, 0.0, -d),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeConfig {
    /// Channels of each encoder level at width 1; level `k` runs at `1/2^k` resolution.
    pub encoder_channels: Vec<usize>,
    pub width_factor: f64,
    /// (conv 3³, batch norm, leaky ReLU) units per encoder level.
    pub convs_per_stage: usize,
    /// Hidden widths of the decoder MLP; the output layer (width 1, sigmoid) is implied.
    pub decoder_widths: Vec<usize>,
    pub point_features: PointFeatureConfig,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![8, 16, 32, 64],
            width_factor: 1.0,
            convs_per_stage: 2,
            decoder_widths: vec![256, 256],
            point_features: PointFeatureConfig::default(),
        }
    }
}

impl ShapeConfig {
    pub fn channels(&self) -> Vec<usize> {
        self.encoder_channels.iter().map(|c| ((*c as f64 * self.width_factor).round() as usize).max(1)).collect()
    }

    pub fn num_levels(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Decoder input width: 7 stencil points times the channels of all levels.
    pub fn feature_width(&self) -> usize {
        7 * self.channels().iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() < 2 || self.encoder_channels.contains(&0) {
            return Err(ModelError::Config("the encoder needs at least two levels of positive width".into()));
        }
        if !(self.width_factor > 0.0) || self.convs_per_stage == 0 || self.decoder_widths.contains(&0) {
            return Err(ModelError::Config("width_factor, convs_per_stage and decoder widths must be positive".into()));
        }
        self.point_features.validate()
    }

    fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let f = 1usize << (self.num_levels() - 1);
        if dims.iter().any(|d| *d == 0 || d % f != 0) {
            return Err(ModelError::Config(format!(
                "edge map dims {dims:?} are not divisible by 2^{} = {f}",
                self.num_levels() - 1
            )));
        }
        Ok(())
    }
}

/// Grid-to-world map of one pyramid level. Cell `j` of level `k` pools input voxels
/// `j·2^k .. (j+1)·2^k - 1`, so its center sits at `(j·2^k + (2^k - 1)/2)·s` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelGrid {
    pub level: usize,
    pub channels: usize,
    /// `[nx, ny, nz]` of this level.
    pub dims: [usize; 3],
    /// Input-volume spacing.
    pub spacing: [f64; 3],
}

impl LevelGrid {
    pub fn factor(&self) -> f64 {
        (1usize << self.level) as f64
    }

    pub fn world_of(&self, j: [usize; 3]) -> WorldPoint {
        let f = self.factor();
        let w: [f64; 3] = std::array::from_fn(|a| (j[a] as f64 * f + (f - 1.0) / 2.0) * self.spacing[a]);
        WorldPoint::from_array(w)
    }

    /// Continuous grid coordinate of a world point, in tensor axis order `(z, y, x)`.
    pub fn grid_coord(&self, p: WorldPoint) -> [f64; 3] {
        let f = self.factor();
        let w = p.to_array();
        let g: [f64; 3] = std::array::from_fn(|a| (w[a] / self.spacing[a] - (f - 1.0) / 2.0) / f);
        [g[2], g[1], g[0]]
    }
}

fn level_grids(channels: &[usize], dims: [usize; 3], spacing: [f64; 3]) -> Vec<LevelGrid> {
    channels
        .iter()
        .enumerate()
        .map(|(level, &c)| LevelGrid { level, channels: c, dims: dims.map(|d| d >> level), spacing })
        .collect()
}

/// Stencil-major, level-minor sample layout of one query point.
pub fn gather_row(grids: &[LevelGrid], batch: usize, x: WorldPoint, pf: &PointFeatureConfig) -> GatherRow {
    let mut samples = Vec::with_capacity(7 * grids.len());
    for off in pf.stencil() {
        let p = x + off;
        for (l, grid) in grids.iter().enumerate() {
            samples.push((l, grid.grid_coord(p)));
        }
    }
    GatherRow { batch, samples }
}

/// Encoder output for one edge map: `levels[k]` is a `[1, C_k, nz_k, ny_k, nx_k]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor<f32>>,
    pub grids: Vec<LevelGrid>,
}

impl FeaturePyramid {
    /// Stacked stencil features of `x`, length `7·ΣC_k`.
    pub fn point_features(&self, x: WorldPoint, pf: &PointFeatureConfig) -> Result<Vec<f32>> {
        let params = ParamStore::new();
        let mut g = Graph::new(&params, false);
        let levels: Vec<Var> = self.levels.iter().map(|t| g.input(t.clone())).collect();
        let out = g.gather_trilinear(&levels, &[gather_row(&self.grids, 0, x, pf)])?;
        Ok(g.value(out).data().to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct ShapeModel {
    cfg: ShapeConfig,
    pub params: ParamStore<f32>,
    enc: Vec<Vec<Layer>>,
    dec: Vec<Layer>,
}

impl ShapeModel {
    pub fn build(cfg: &ShapeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels();
        let mut params = ParamStore::new();
        let mut init = Init { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut enc = Vec::with_capacity(ch.len());
        let mut cin = 1;
        for (k, &c) in ch.iter().enumerate() {
            let mut block = if k == 0 { Vec::new() } else { vec![Layer::MaxDownsample] };
            block.extend(init.conv_block(&format!("enc{k}"), cin, c, cfg.convs_per_stage)?);
            enc.push(block);
            cin = c;
        }
        let mut dec = Vec::new();
        let mut fin = cfg.feature_width();
        for (i, &w) in cfg.decoder_widths.iter().enumerate() {
            dec.push(init.linear(&format!("dec{i}"), fin, w)?);
            dec.push(Layer::LeakyRelu);
            fin = w;
        }
        dec.push(init.linear("dec_out", fin, 1)?);
        dec.push(Layer::Sigmoid);
        Ok(Self { cfg: cfg.clone(), params, enc, dec })
    }

    pub fn config(&self) -> &ShapeConfig {
        &self.cfg
    }

    pub fn level_grids(&self, dims: [usize; 3], spacing: [f64; 3]) -> Vec<LevelGrid> {
        level_grids(&self.cfg.channels(), dims, spacing)
    }

    /// `x: [B, 1, nz, ny, nx]` → one variable per level.
    pub fn encode_graph(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x).to_vec();
        if s.len() != 5 || s[1] != 1 {
            return Err(ModelError::Config(format!("shape encoder input must be [B, 1, D, H, W], got {s:?}")));
        }
        self.cfg.check_dims([s[4], s[3], s[2]])?;
        let mut levels = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for block in &self.enc {
            h = run(block, g, h)?;
            levels.push(h);
        }
        Ok(levels)
    }

    /// `features: [P, 7·ΣC_k]` → occupancies `[P, 1]`.
    pub fn decode_graph(&self, g: &mut Graph<'_, f32>, features: Var) -> Result<Var> {
        let s = g.shape(features);
        if s.len() != 2 || s[1] != self.cfg.feature_width() {
            return Err(ModelError::Config(format!(
                "decoder expects [P, {}] features, got {s:?}",
                self.cfg.feature_width()
            )));
        }
        run(&self.dec, g, features)
    }

    /// Evaluation-mode encoding of one edge map (values in `[0, 1]`).
    pub fn encode(&self, edge_map: &Volume3) -> Result<FeaturePyramid> {
        if edge_map.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ModelError::Config("edge map values must lie in [0, 1]".into()));
        }
        self.cfg.check_dims(edge_map.dims())?;
        let mut g = Graph::new(&self.params, false);
        let x = g.input(volume_to_tensor(edge_map));
        let levels = self.encode_graph(&mut g, x)?;
        Ok(FeaturePyramid {
            levels: levels.iter().map(|v| g.value(*v).clone()).collect(),
            grids: self.level_grids(edge_map.dims(), edge_map.spacing()),
        })
    }

    pub fn point_features(&self, pyr: &FeaturePyramid, x: WorldPoint) -> Result<Vec<f32>> {
        pyr.point_features(x, &self.cfg.point_features)
    }

    /// Occupancy of one stacked feature vector.
    pub fn decode(&self, features: &[f32]) -> Result<f32> {
        let mut g = Graph::new(&self.params, false);
        let f = g.input(Tensor::new(vec![1, features.len()], features.to_vec())?);
        let y = self.decode_graph(&mut g, f)?;
        Ok(open_unit(g.value(y).data()[0]))
    }

    /// Occupancies of many world points under one pyramid.
    pub fn occupancy_at(&self, pyr: &FeaturePyramid, points: &[WorldPoint]) -> Result<Vec<f32>> {
        let pf = self.cfg.point_features;
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(INFER_CHUNK) {
            let mut g = Graph::new(&self.params, false);
            let levels: Vec<Var> = pyr.levels.iter().map(|t| g.input(t.clone())).collect();
            let rows: Vec<GatherRow> = chunk.iter().map(|p| gather_row(&pyr.grids, 0, *p, &pf)).collect();
            let feats = g.gather_trilinear(&levels, &rows)?;
            let y = self.decode_graph(&mut g, feats)?;
            out.extend(g.value(y).data().iter().map(|v| open_unit(*v)));
        }
        Ok(out)
    }

    /// Dense inference on a grid of `out_dims` covering the edge map's extent. Output voxel
    /// `i` sits at `(i + 1/2)·s' - s/2` with `s' = n·s / n_out`, so equal dims reproduce the
    /// input voxel centers. Returns the occupancy volume and its 0.5-threshold mask.
    pub fn infer_mask(&self, edge_map: &Volume3, out_dims: [usize; 3]) -> Result<(Volume3, Volume3)> {
        if out_dims.contains(&0) {
            return Err(ModelError::Config("output dims must be positive".into()));
        }
        let pyr = self.encode(edge_map)?;
        let dims = edge_map.dims();
        let s = edge_map.spacing();
        let out_s: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * s[a] / out_dims[a] as f64);
        let [ox, oy, oz] = out_dims;
        let mut points = Vec::with_capacity(ox * oy * oz);
        for k in 0..oz {
            for j in 0..oy {
                for i in 0..ox {
                    let c = [i, j, k];
                    points.push(WorldPoint::from_array(std::array::from_fn(|a| {
                        (c[a] as f64 + 0.5) * out_s[a] - s[a] / 2.0
                    })));
                }
            }
        }
        let occ = self.occupancy_at(&pyr, &points)?;
        let mask = occ.iter().map(|v| if *v >= 0.5 { 1.0 } else { 0.0 }).collect();
        Ok((
            Volume3::new(out_dims, out_s, VolumeKind::Occupancy, occ)?,
            Volume3::new(out_dims, out_s, VolumeKind::Mask, mask)?,
        ))
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
        let cfg: ShapeConfig = serde_json::from_slice(&fs::read(sidecar(path))?)?;
        let (store, _) = checkpoint::load(path)?;
        let mut model = Self::build(&cfg, 0)?;
        adopt_params(&mut model.params, store)?;
        Ok(model)
    }
}
