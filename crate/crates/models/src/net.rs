//! Shared building blocks: deterministic parameter initialization, conv blocks and
//! volume/tensor conversion.

use condshape_core::{Volume3, VolumeKind};
use condshape_tensorgrad::{Graph, Layer, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, Result};

/// Adds named parameters to a store with fan-in scaled uniform ("He uniform") weights,
/// `U(-b, b)` with `b = sqrt(6 / fan_in)`, and zero biases.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, n: usize, fan_in: usize) -> Vec<f32> {
        let b = (6.0 / fan_in as f64).sqrt();
        (0..n).map(|_| self.rng.random_range(-b..b) as f32).collect()
    }

    fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>, trainable: bool) -> Result<condshape_tensorgrad::ParamId> {
        Ok(self.store.add(name, Tensor::new(shape, data)?, trainable)?)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<Layer> {
        let fan_in = cin * k * k * k;
        let w = self.uniform(cout * fan_in, fan_in);
        let weight = self.add(format!("{name}.weight"), vec![cout, cin, k, k, k], w, true)?;
        let bias = self.add(format!("{name}.bias"), vec![cout], vec![0.0; cout], true)?;
        Ok(Layer::Conv3d { weight, bias, stride: 1 })
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> Result<Layer> {
        Ok(Layer::BatchNorm {
            gamma: self.add(format!("{name}.gamma"), vec![c], vec![1.0; c], true)?,
            beta: self.add(format!("{name}.beta"), vec![c], vec![0.0; c], true)?,
            running_mean: self.add(format!("{name}.running_mean"), vec![c], vec![0.0; c], false)?,
            running_var: self.add(format!("{name}.running_var"), vec![c], vec![1.0; c], false)?,
        })
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Result<Layer> {
        let w = self.uniform(fout * fin, fin);
        let weight = self.add(format!("{name}.weight"), vec![fout, fin], w, true)?;
        let bias = self.add(format!("{name}.bias"), vec![fout], vec![0.0; fout], true)?;
        Ok(Layer::Linear { weight, bias })
    }

    /// `n` × (conv 3³, batch norm, leaky ReLU).
    pub fn conv_block(&mut self, name: &str, cin: usize, cout: usize, n: usize) -> Result<Vec<Layer>> {
        let mut layers = Vec::with_capacity(3 * n);
        for i in 0..n {
            let c_in = if i == 0 { cin } else { cout };
            layers.push(self.conv(&format!("{name}.conv{i}"), c_in, cout, 3)?);
            layers.push(self.batch_norm(&format!("{name}.bn{i}"), cout)?);
            layers.push(Layer::LeakyRelu);
        }
        Ok(layers)
    }
}

/// Replaces `current` with `loaded` after checking that names, shapes and trainability agree.
pub(crate) fn adopt_params(current: &mut ParamStore<f32>, loaded: ParamStore<f32>) -> Result<()> {
    let a = current.entries();
    let b = loaded.entries();
    if a.len() != b.len() {
        return Err(ModelError::Config(format!(
            "checkpoint has {} entries, architecture expects {}",
            b.len(),
            a.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        if x.name != y.name || x.tensor.shape() != y.tensor.shape() || x.trainable != y.trainable {
            return Err(ModelError::Config(format!(
                "checkpoint entry {} {:?} does not match architecture entry {} {:?}",
                y.name,
                y.tensor.shape(),
                x.name,
                x.tensor.shape()
            )));
        }
    }
    *current = loaded;
    Ok(())
}

/// Volume (x-fastest, dims `[nx, ny, nz]`) as a `[1, 1, nz, ny, nx]` tensor; no reordering
/// is needed because the last tensor axis is the fastest.
pub fn volume_to_tensor(v: &Volume3) -> Tensor<f32> {
    let [nx, ny, nz] = v.dims();
    Tensor::new(vec![1, 1, nz, ny, nx], v.data().to_vec()).expect("sizes agree")
}

/// Stacks single-channel volumes of equal dims into `[B, 1, nz, ny, nx]`.
pub fn stack_volumes(vols: &[&Volume3]) -> Result<Tensor<f32>> {
    let first = vols.first().ok_or_else(|| ModelError::Config("cannot stack zero volumes".into()))?;
    let [nx, ny, nz] = first.dims();
    let mut data = Vec::with_capacity(vols.len() * first.len());
    for v in vols {
        if v.dims() != first.dims() {
            return Err(ModelError::Config("stacked volumes differ in size".into()));
        }
        data.extend_from_slice(v.data());
    }
    Ok(Tensor::new(vec![vols.len(), 1, nz, ny, nx], data)?)
}

/// Channel `c` of batch item `n` of a `[B, C, nz, ny, nx]` tensor as a volume.
pub fn tensor_to_volume(t: &Tensor<f32>, n: usize, c: usize, spacing: [f64; 3], kind: VolumeKind) -> Result<Volume3> {
    let s = t.shape();
    if s.len() != 5 || n >= s[0] || c >= s[1] {
        return Err(ModelError::Config(format!("cannot take item {n} channel {c} of shape {s:?}")));
    }
    let vox = s[2] * s[3] * s[4];
    let start = (n * s[1] + c) * vox;
    Ok(Volume3::new([s[4], s[3], s[2]], spacing, kind, t.data()[start..start + vox].to_vec())?)
}

/// Forward through a list of layers.
pub(crate) fn run(layers: &[Layer], g: &mut Graph<'_, f32>, x: Var) -> Result<Var> {
    Ok(condshape_tensorgrad::apply_all(layers, g, x)?)
}
