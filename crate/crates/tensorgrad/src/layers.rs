use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamId;
use crate::scalar::Real;

/// Single-input layers addressed by parameter handles. Multi-input ops (concat, losses,
/// feature gathering) are called on [`Graph`] directly.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv3d { weight: ParamId, bias: ParamId, stride: usize },
    BatchNorm { gamma: ParamId, beta: ParamId, running_mean: ParamId, running_var: ParamId },
    LeakyRelu,
    Linear { weight: ParamId, bias: ParamId },
    MaxDownsample,
    NearestUpsample,
    Sigmoid,
}

impl Layer {
    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match *self {
            Layer::Conv3d { weight, bias, stride } => {
                let (w, b) = (g.param(weight), g.param(bias));
                g.conv3d(x, w, b, stride)
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                let (ga, be) = (g.param(gamma), g.param(beta));
                g.batch_norm(x, ga, be, running_mean, running_var)
            }
            Layer::LeakyRelu => Ok(g.leaky_relu(x)),
            Layer::Linear { weight, bias } => {
                let (w, b) = (g.param(weight), g.param(bias));
                g.linear(x, w, b)
            }
            Layer::MaxDownsample => g.max_downsample(x),
            Layer::NearestUpsample => g.nearest_upsample(x),
            Layer::Sigmoid => Ok(g.sigmoid(x)),
        }
    }
}

/// Applies layers in order.
pub fn apply_all<T: Real>(layers: &[Layer], g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
    for layer in layers {
        x = layer.apply(g, x)?;
    }
    Ok(x)
}
