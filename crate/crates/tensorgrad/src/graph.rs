//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward op in creation order; [`Graph::backward`] walks the
//! tape in reverse. Parameters are copied into the graph as leaves and their gradients are
//! read back with [`Graph::param_grads`].

use crate::error::{GradError, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::{matmul, Real};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const JACCARD_EPS: f64 = 1e-6;
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One output row of [`Graph::gather_trilinear`]: samples concatenated in order, each
/// contributing all channels of its level.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherRow {
    pub batch: usize,
    /// `(level index, continuous grid coordinate in (d0, d1, d2) order)`.
    pub samples: Vec<(usize, [f64; 3])>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LeakyRelu(Var),
    Sigmoid(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        centered_scale: Vec<(T, T)>,
    },
    MaxDownsample {
        x: Var,
        argmax: Vec<u32>,
    },
    NearestUpsample(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    Gather {
        levels: Vec<Var>,
        plan: GatherPlan,
    },
    Jaccard {
        pred: Var,
        gt: Var,
    },
    Mse {
        pred: Var,
        gt: Var,
    },
    Bce {
        pred: Var,
        gt: Var,
    },
}

#[derive(Debug)]
struct GatherPlan {
    /// Per sample: (level, batch, output column offset).
    samples: Vec<(usize, usize, usize)>,
    /// Eight (spatial offset, weight) taps per sample.
    taps: Vec<(u32, f64)>,
    row_width: usize,
    samples_per_row: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    train: bool,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    buffer_updates: Vec<(ParamId, Vec<T>)>,
}

impl<'p, T: Real> Graph<'p, T> {
    /// `train` selects batch statistics in batch norm (when the batch has at least two items).
    pub fn new(params: &'p ParamStore<T>, train: bool) -> Self {
        Self {
            params,
            train,
            nodes: Vec::new(),
            grads: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is kept, e.g. for input-gradient checks.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let entry = self.params.entry(id);
        let value = entry.tensor.clone();
        let trainable = entry.trainable;
        self.push(value, Op::Param(id), trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---------------------------------------------------------------- layers

    /// 3D convolution with cubic kernels of side 1 or 3, zero padding `k / 2`, stride 1 or 2.
    ///
    /// `x: [N, Cin, D0, D1, D2]`, `w: [Cout, Cin, k, k, k]`, `b: [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 5 {
            return Err(GradError::shape("conv3d", "[N, C, D0, D1, D2] input", &xs));
        }
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] || !(ws[2] == 1 || ws[2] == 3) {
            return Err(GradError::shape("conv3d", "[Cout, Cin, k, k, k] weight with k in {1, 3}", &ws));
        }
        if ws[1] != xs[1] {
            return Err(GradError::shape("conv3d", format!("input with {} channels", ws[1]), &xs));
        }
        if bs != [ws[0]] {
            return Err(GradError::shape("conv3d", format!("bias [{}]", ws[0]), &bs));
        }
        if !(stride == 1 || stride == 2) {
            return Err(GradError::Contract(format!("conv3d stride must be 1 or 2, got {stride}")));
        }
        let geo = ConvGeom::new(&xs, ws[0], ws[2], stride);
        let mut out = vec![T::zero(); xs[0] * geo.cout * geo.out_vox()];
        let vox = geo.out_vox();
        let plane = geo.od[1] * geo.od[2];
        let mut col = vec![T::zero(); geo.rows() * geo.planes_per_chunk() * plane];
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let xv = self.value(x).data();
        for n in 0..xs[0] {
            let xin = &xv[n * geo.in_item()..(n + 1) * geo.in_item()];
            let o = &mut out[n * geo.cout * vox..(n + 1) * geo.cout * vox];
            if geo.is_pointwise() {
                matmul(geo.cout, geo.rows(), vox, wv, xin, o, false);
            } else {
                for (p0, p1) in geo.chunks() {
                    let width = (p1 - p0) * plane;
                    im2col(xin, &geo, p0, p1, &mut col);
                    T::gemm(
                        geo.cout,
                        geo.rows(),
                        width,
                        T::one(),
                        wv,
                        geo.rows() as isize,
                        1,
                        &col,
                        width as isize,
                        1,
                        T::zero(),
                        &mut o[p0 * plane..],
                        vox as isize,
                        1,
                    );
                }
            }
            for (co, chunk) in o.chunks_mut(vox).enumerate() {
                let bias = bv[co];
                chunk.iter_mut().for_each(|v| *v = *v + bias);
            }
        }
        let shape = vec![xs[0], geo.cout, geo.od[0], geo.od[1], geo.od[2]];
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv3d { x, w, b, stride }, rg))
    }

    /// `x: [B, in]`, `w: [out, in]`, `b: [out]` → `[B, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if ws.len() != 2 {
            return Err(GradError::shape("linear", "[out, in] weight", &ws));
        }
        if xs.len() != 2 || xs[1] != ws[1] {
            return Err(GradError::shape("linear", format!("[B, {}] input", ws[1]), &xs));
        }
        if bs != [ws[0]] {
            return Err(GradError::shape("linear", format!("bias [{}]", ws[0]), &bs));
        }
        let (batch, fin, fout) = (xs[0], ws[1], ws[0]);
        let mut out = vec![T::zero(); batch * fout];
        T::gemm(
            batch,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            fin as isize,
            1,
            self.value(w).data(),
            1,
            fin as isize,
            T::zero(),
            &mut out,
            fout as isize,
            1,
        );
        let bv = self.value(b).data();
        for row in out.chunks_mut(fout) {
            row.iter_mut().zip(bv).for_each(|(o, &bb)| *o = *o + bb);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![batch, fout], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let slope = T::of(LEAKY_SLOPE);
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Per-channel batch normalization over `[N, C, ...]`.
    ///
    /// Uses batch statistics (and records running-statistic updates) only in training mode
    /// with `N >= 2`; otherwise it is the fixed affine map given by the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(GradError::shape("batch_norm", "[N, C, ...] input", &xs));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [c] {
                return Err(GradError::shape("batch_norm", format!("{what} [{c}]"), self.shape(v)));
            }
        }
        let rm = self.params.get(running_mean).data().to_vec();
        let rv = self.params.get(running_var).data().to_vec();
        if rm.len() != c || rv.len() != c {
            return Err(GradError::shape("batch_norm", format!("running stats [{c}]"), &[rm.len(), rv.len()]));
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let xv = self.value(x).data();
        let eps = T::of(BN_EPS);
        let mut out = vec![T::zero(); xv.len()];
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);

        if self.train && n >= 2 {
            let count = (n * spatial) as f64;
            let mut xhat = vec![T::zero(); xv.len()];
            let mut inv_std = vec![T::zero(); c];
            let mut new_rm = rm.clone();
            let mut new_rv = rv.clone();
            for ch in 0..c {
                let mut sum = 0.0f64;
                for item in 0..n {
                    let base = (item * c + ch) * spatial;
                    sum += xv[base..base + spatial].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0f64;
                for item in 0..n {
                    let base = (item * c + ch) * spatial;
                    sq += xv[base..base + spatial]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / count;
                let istd = T::of(1.0 / (var + BN_EPS).sqrt());
                inv_std[ch] = istd;
                let mean_t = T::of(mean);
                for item in 0..n {
                    let base = (item * c + ch) * spatial;
                    for i in base..base + spatial {
                        let h = (xv[i] - mean_t) * istd;
                        xhat[i] = h;
                        out[i] = gv[ch] * h + bv[ch];
                    }
                }
                let m = T::of(BN_MOMENTUM);
                let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                new_rm[ch] = (T::one() - m) * rm[ch] + m * mean_t;
                new_rv[ch] = (T::one() - m) * rv[ch] + m * T::of(unbiased);
            }
            self.buffer_updates.push((running_mean, new_rm));
            self.buffer_updates.push((running_var, new_rv));
            let value = Tensor::new(xs, out)?;
            Ok(self.push(
                value,
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                },
                rg,
            ))
        } else {
            let centered_scale: Vec<(T, T)> = (0..c).map(|ch| (rm[ch], T::one() / (rv[ch] + eps).sqrt())).collect();
            for item in 0..n {
                for ch in 0..c {
                    let (mu, s) = centered_scale[ch];
                    let base = (item * c + ch) * spatial;
                    for i in base..base + spatial {
                        out[i] = gv[ch] * (xv[i] - mu) * s + bv[ch];
                    }
                }
            }
            let value = Tensor::new(xs, out)?;
            Ok(self.push(
                value,
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    centered_scale,
                },
                rg,
            ))
        }
    }

    /// Factor-2 max pooling over the three spatial axes; ties go to the lowest linear index.
    pub fn max_downsample(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 || xs[2..].iter().any(|d| d % 2 != 0) {
            return Err(GradError::shape("max_downsample", "[N, C, D0, D1, D2] with even spatial sides", &xs));
        }
        let (d0, d1, d2) = (xs[2], xs[3], xs[4]);
        let (o0, o1, o2) = (d0 / 2, d1 / 2, d2 / 2);
        let slabs = xs[0] * xs[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(slabs * o0 * o1 * o2);
        let mut argmax = Vec::with_capacity(slabs * o0 * o1 * o2);
        for s in 0..slabs {
            let base = s * d0 * d1 * d2;
            for i in 0..o0 {
                for j in 0..o1 {
                    for k in 0..o2 {
                        let mut best_idx = base + ((2 * i) * d1 + 2 * j) * d2 + 2 * k;
                        let mut best = xv[best_idx];
                        for a in 0..2 {
                            for b in 0..2 {
                                for c in 0..2 {
                                    let idx = base + ((2 * i + a) * d1 + 2 * j + b) * d2 + 2 * k + c;
                                    if xv[idx] > best {
                                        best = xv[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx as u32);
                    }
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], o0, o1, o2], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxDownsample { x, argmax }, rg))
    }

    /// Factor-2 nearest-neighbour upsampling over the three spatial axes.
    pub fn nearest_upsample(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(GradError::shape("nearest_upsample", "[N, C, D0, D1, D2]", &xs));
        }
        let (d0, d1, d2) = (xs[2], xs[3], xs[4]);
        let (o0, o1, o2) = (2 * d0, 2 * d1, 2 * d2);
        let slabs = xs[0] * xs[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(slabs * o0 * o1 * o2);
        for s in 0..slabs {
            let base = s * d0 * d1 * d2;
            for i in 0..o0 {
                for j in 0..o1 {
                    let row = base + ((i / 2) * d1 + j / 2) * d2;
                    for k in 0..o2 {
                        out.push(xv[row + k / 2]);
                    }
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], o0, o1, o2], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::NearestUpsample(x), rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| GradError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(GradError::shape("concat", format!("rank > {axis}"), &base));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(GradError::shape("concat", format!("{base:?} except axis {axis}"), s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let blk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of(t.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Clamped trilinear sampling of `[N, C_l, D0, D1, D2]` feature grids at continuous grid
    /// coordinates. Each row concatenates its samples; the result is `[rows, width]`.
    ///
    /// Coordinates are clamped to `[0, side - 1]` per axis (replication at the faces).
    pub fn gather_trilinear(&mut self, levels: &[Var], rows: &[GatherRow]) -> Result<Var> {
        let shapes: Vec<Vec<usize>> = levels.iter().map(|v| self.shape(*v).to_vec()).collect();
        for s in &shapes {
            if s.len() != 5 {
                return Err(GradError::shape("gather_trilinear", "[N, C, D0, D1, D2] level", s));
            }
        }
        let first = rows
            .first()
            .ok_or_else(|| GradError::Contract("gather_trilinear needs at least one row".into()))?;
        let layout: Vec<usize> = first.samples.iter().map(|(l, _)| *l).collect();
        let mut row_width = 0;
        for &l in &layout {
            let s = shapes
                .get(l)
                .ok_or_else(|| GradError::Contract(format!("gather level {l} out of range")))?;
            row_width += s[1];
        }
        let mut samples = Vec::with_capacity(rows.len() * layout.len());
        let mut taps = Vec::with_capacity(rows.len() * layout.len() * 8);
        for row in rows {
            if row.samples.len() != layout.len() || row.samples.iter().zip(&layout).any(|((l, _), m)| l != m) {
                return Err(GradError::Contract("gather rows must share one level layout".into()));
            }
            let mut col = 0;
            for (level, coord) in &row.samples {
                let s = &shapes[*level];
                if row.batch >= s[0] {
                    return Err(GradError::Contract(format!("gather batch {} >= {}", row.batch, s[0])));
                }
                samples.push((*level, row.batch, col));
                col += s[1];
                push_taps(&mut taps, [s[2], s[3], s[4]], *coord);
            }
        }
        let mut out = vec![T::zero(); rows.len() * row_width];
        let spr = layout.len();
        for (si, &(level, batch, col)) in samples.iter().enumerate() {
            let row = si / spr;
            let s = &shapes[level];
            let vox = s[2] * s[3] * s[4];
            let data = self.value(levels[level]).data();
            let base = batch * s[1] * vox;
            let tp = &taps[si * 8..si * 8 + 8];
            let dst = &mut out[row * row_width + col..row * row_width + col + s[1]];
            for (c, d) in dst.iter_mut().enumerate() {
                let slab = &data[base + c * vox..base + (c + 1) * vox];
                // Accumulated in f64 so that constant fields are reproduced exactly.
                *d = T::of(tp.iter().fold(0.0, |acc, &(off, w)| acc + w * slab[off as usize].as_f64()));
            }
        }
        let rg = levels.iter().any(|v| self.rg(*v));
        let plan = GatherPlan {
            samples,
            taps,
            row_width,
            samples_per_row: spr,
        };
        Ok(self.push(
            Tensor::new(vec![rows.len(), row_width], out)?,
            Op::Gather {
                levels: levels.to_vec(),
                plan,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- losses

    /// `1 - (Σpg + ε) / (Σp + Σg - Σpg + ε)`; differentiable in `pred` only.
    pub fn jaccard_loss(&mut self, pred: Var, gt: Var) -> Result<Var> {
        self.same_shape("jaccard_loss", pred, gt)?;
        let (i, u) = jaccard_terms(self.value(pred).data(), self.value(gt).data());
        let eps = JACCARD_EPS;
        let loss = 1.0 - (i + eps) / (u + eps);
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(T::of(loss)), Op::Jaccard { pred, gt }, rg))
    }

    pub fn mse_loss(&mut self, pred: Var, gt: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, gt)?;
        let p = self.value(pred).data();
        let g = self.value(gt).data();
        let s: f64 = p.iter().zip(g).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
        let rg = self.rg(pred) || self.rg(gt);
        Ok(self.push(Tensor::scalar(T::of(s / p.len() as f64)), Op::Mse { pred, gt }, rg))
    }

    /// Mean binary cross-entropy with `pred` clamped to `[1e-7, 1 - 1e-7]`; differentiable in
    /// `pred` only.
    pub fn bce_loss(&mut self, pred: Var, gt: Var) -> Result<Var> {
        self.same_shape("bce_loss", pred, gt)?;
        let p = self.value(pred).data();
        let g = self.value(gt).data();
        let s: f64 = p
            .iter()
            .zip(g)
            .map(|(a, b)| {
                let a = a.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                let b = b.as_f64();
                -(b * a.ln() + (1.0 - b) * (1.0 - a).ln())
            })
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(T::of(s / p.len() as f64)), Op::Bce { pred, gt }, rg))
    }

    fn same_shape(&self, layer: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GradError::shape(layer, format!("{:?}", self.shape(a)), self.shape(b)));
        }
        Ok(())
    }

    // -------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`. Afterwards [`Graph::grad`] and
    /// [`Graph::param_grads`] expose the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(GradError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradients for every store entry (zeros for buffers and for parameters not reached).
    pub fn param_grads(&self) -> ParamGrads<T> {
        let mut out = ParamGrads::zeros_like(self.params);
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(Some(g))) = (&node.op, self.grads.get(i)) {
                if node.requires_grad {
                    for (a, b) in out.grads[id.0].iter_mut().zip(g) {
                        *a = *a + *b;
                    }
                }
            }
        }
        out
    }

    fn backward_node(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv3d { x, w, b, stride } => {
                let xs = nodes[x.0].value.shape();
                let ws = nodes[w.0].value.shape();
                let geo = ConvGeom::new(xs, ws[0], ws[2], *stride);
                let xv = nodes[x.0].value.data();
                let wv = nodes[w.0].value.data();
                let vox = geo.out_vox();
                if needs(b) {
                    let gb = slot(grads, nodes, *b);
                    for n in 0..xs[0] {
                        for co in 0..geo.cout {
                            let off = (n * geo.cout + co) * vox;
                            gb[co] = gb[co] + gout[off..off + vox].iter().copied().sum::<T>();
                        }
                    }
                }
                let plane = geo.od[1] * geo.od[2];
                let rows = geo.rows();
                let mut col = if geo.is_pointwise() {
                    Vec::new()
                } else {
                    vec![T::zero(); rows * geo.planes_per_chunk() * plane]
                };
                for n in 0..xs[0] {
                    let go = &gout[n * geo.cout * vox..(n + 1) * geo.cout * vox];
                    let xin = &xv[n * geo.in_item()..(n + 1) * geo.in_item()];
                    if geo.is_pointwise() {
                        if needs(w) {
                            // dW += dOut · xᵀ
                            let gw = slot(grads, nodes, *w);
                            T::gemm(geo.cout, vox, rows, T::one(), go, vox as isize, 1, xin, 1, vox as isize, T::one(), gw, rows as isize, 1);
                        }
                        if needs(x) {
                            // dx += Wᵀ · dOut
                            let gx = slot(grads, nodes, *x);
                            let gxn = &mut gx[n * geo.in_item()..(n + 1) * geo.in_item()];
                            T::gemm(rows, geo.cout, vox, T::one(), wv, 1, rows as isize, go, vox as isize, 1, T::one(), gxn, vox as isize, 1);
                        }
                        continue;
                    }
                    for (p0, p1) in geo.chunks() {
                        let width = (p1 - p0) * plane;
                        let go_chunk = &go[p0 * plane..];
                        if needs(w) {
                            im2col(xin, &geo, p0, p1, &mut col);
                            let gw = slot(grads, nodes, *w);
                            // dW += dOut · colᵀ
                            T::gemm(geo.cout, width, rows, T::one(), go_chunk, vox as isize, 1, &col, 1, width as isize, T::one(), gw, rows as isize, 1);
                        }
                        if needs(x) {
                            // dcol = Wᵀ · dOut
                            T::gemm(rows, geo.cout, width, T::one(), wv, 1, rows as isize, go_chunk, vox as isize, 1, T::zero(), &mut col, width as isize, 1);
                            let gx = slot(grads, nodes, *x);
                            col2im(&col, &geo, p0, p1, &mut gx[n * geo.in_item()..(n + 1) * geo.in_item()]);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let ws = nodes[w.0].value.shape();
                let (batch, fin, fout) = (xs[0], ws[1], ws[0]);
                if needs(b) {
                    let gb = slot(grads, nodes, *b);
                    for row in gout.chunks(fout) {
                        gb.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                    }
                }
                if needs(w) {
                    let xv = nodes[x.0].value.data();
                    let gw = slot(grads, nodes, *w);
                    // dW(out×in) += dYᵀ(out×B) · X(B×in)
                    T::gemm(fout, batch, fin, T::one(), gout, 1, fout as isize, xv, fin as isize, 1, T::one(), gw, fin as isize, 1);
                }
                if needs(x) {
                    let wv = nodes[w.0].value.data();
                    let gx = slot(grads, nodes, *x);
                    // dX(B×in) += dY(B×out) · W(out×in)
                    T::gemm(batch, fout, fin, T::one(), gout, fout as isize, 1, wv, fin as isize, 1, T::one(), gx, fin as isize, 1);
                }
            }
            Op::LeakyRelu(x) => {
                let slope = T::of(LEAKY_SLOPE);
                let xv = nodes[x.0].value.data();
                let gx = slot(grads, nodes, *x);
                for ((g, &v), &go) in gx.iter_mut().zip(xv).zip(gout) {
                    *g = *g + if v > T::zero() { go } else { go * slope };
                }
            }
            Op::Sigmoid(x) => {
                let yv = nodes[i].value.data();
                let gx = slot(grads, nodes, *x);
                for ((g, &y), &go) in gx.iter_mut().zip(yv).zip(gout) {
                    *g = *g + go * y * (T::one() - y);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xs = nodes[x.0].value.shape();
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let gv = nodes[gamma.0].value.data();
                let m = T::of((n * spatial) as f64);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for item in 0..n {
                    for ch in 0..c {
                        let base = (item * c + ch) * spatial;
                        for k in base..base + spatial {
                            sum_dy[ch] = sum_dy[ch] + gout[k];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + gout[k] * xhat[k];
                        }
                    }
                }
                if needs(gamma) {
                    let gg = slot(grads, nodes, *gamma);
                    gg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, &b)| *a = *a + b);
                }
                if needs(beta) {
                    let gb = slot(grads, nodes, *beta);
                    gb.iter_mut().zip(&sum_dy).for_each(|(a, &b)| *a = *a + b);
                }
                if needs(x) {
                    let gx = slot(grads, nodes, *x);
                    for item in 0..n {
                        for ch in 0..c {
                            let base = (item * c + ch) * spatial;
                            let k1 = gv[ch] * inv_std[ch] / m;
                            for k in base..base + spatial {
                                let v = m * gout[k] - sum_dy[ch] - xhat[k] * sum_dy_xhat[ch];
                                gx[k] = gx[k] + k1 * v;
                            }
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                centered_scale,
            } => {
                let xs = nodes[x.0].value.shape();
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let xv = nodes[x.0].value.data();
                let gv = nodes[gamma.0].value.data();
                if needs(gamma) || needs(beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for item in 0..n {
                        for ch in 0..c {
                            let (mu, s) = centered_scale[ch];
                            let base = (item * c + ch) * spatial;
                            for k in base..base + spatial {
                                dg[ch] = dg[ch] + gout[k] * (xv[k] - mu) * s;
                                db[ch] = db[ch] + gout[k];
                            }
                        }
                    }
                    if needs(gamma) {
                        let gg = slot(grads, nodes, *gamma);
                        gg.iter_mut().zip(&dg).for_each(|(a, &b)| *a = *a + b);
                    }
                    if needs(beta) {
                        let gb = slot(grads, nodes, *beta);
                        gb.iter_mut().zip(&db).for_each(|(a, &b)| *a = *a + b);
                    }
                }
                if needs(x) {
                    let gx = slot(grads, nodes, *x);
                    for item in 0..n {
                        for ch in 0..c {
                            let f = gv[ch] * centered_scale[ch].1;
                            let base = (item * c + ch) * spatial;
                            for k in base..base + spatial {
                                gx[k] = gx[k] + gout[k] * f;
                            }
                        }
                    }
                }
            }
            Op::MaxDownsample { x, argmax } => {
                let gx = slot(grads, nodes, *x);
                for (&idx, &g) in argmax.iter().zip(gout) {
                    gx[idx as usize] = gx[idx as usize] + g;
                }
            }
            Op::NearestUpsample(x) => {
                let xs = nodes[x.0].value.shape();
                let (d0, d1, d2) = (xs[2], xs[3], xs[4]);
                let (o1, o2) = (2 * d1, 2 * d2);
                let gx = slot(grads, nodes, *x);
                for s in 0..xs[0] * xs[1] {
                    let base = s * d0 * d1 * d2;
                    let obase = s * 8 * d0 * d1 * d2;
                    for i in 0..2 * d0 {
                        for j in 0..o1 {
                            let row = base + ((i / 2) * d1 + j / 2) * d2;
                            let orow = obase + (i * o1 + j) * o2;
                            for k in 0..o2 {
                                gx[row + k / 2] = gx[row + k / 2] + gout[orow + k];
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = nodes[i].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let blk = nodes[v.0].value.shape()[*axis] * inner;
                    if needs(v) {
                        let gv = slot(grads, nodes, *v);
                        for o in 0..outer {
                            let src = &gout[o * total + offset..o * total + offset + blk];
                            gv[o * blk..(o + 1) * blk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &b)| *a = *a + b);
                        }
                    }
                    offset += blk;
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        let g = slot(grads, nodes, *v);
                        g.iter_mut().zip(gout).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if needs(v) {
                        let ov = nodes[other.0].value.data();
                        let g = slot(grads, nodes, *v);
                        for ((x, &y), &o) in g.iter_mut().zip(gout).zip(ov) {
                            *x = *x + y * o;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let g = slot(grads, nodes, *x);
                g.iter_mut().for_each(|v| *v = *v + gout[0]);
            }
            Op::Mean(x) => {
                let g = slot(grads, nodes, *x);
                let f = gout[0] / T::of(g.len() as f64);
                g.iter_mut().for_each(|v| *v = *v + f);
            }
            Op::Gather { levels, plan } => {
                let spr = plan.samples_per_row;
                for (li, lv) in levels.iter().enumerate() {
                    if !needs(lv) {
                        continue;
                    }
                    let s = nodes[lv.0].value.shape().to_vec();
                    let vox = s[2] * s[3] * s[4];
                    let gl = slot(grads, nodes, *lv);
                    for (si, &(level, batch, col)) in plan.samples.iter().enumerate() {
                        if level != li {
                            continue;
                        }
                        let row = si / spr;
                        let base = batch * s[1] * vox;
                        let tp = &plan.taps[si * 8..si * 8 + 8];
                        let src = &gout[row * plan.row_width + col..row * plan.row_width + col + s[1]];
                        for (c, &g) in src.iter().enumerate() {
                            let slab = &mut gl[base + c * vox..base + (c + 1) * vox];
                            for &(off, w) in tp {
                                slab[off as usize] = slab[off as usize] + T::of(w) * g;
                            }
                        }
                    }
                }
            }
            Op::Jaccard { pred, gt } => {
                let p = nodes[pred.0].value.data();
                let g = nodes[gt.0].value.data();
                let (inter, union) = jaccard_terms(p, g);
                let eps = JACCARD_EPS;
                let denom = union + eps;
                let go = gout[0].as_f64();
                let gp = slot(grads, nodes, *pred);
                for (d, &gi) in gp.iter_mut().zip(g) {
                    let gi = gi.as_f64();
                    let v = -(gi * denom - (inter + eps) * (1.0 - gi)) / (denom * denom);
                    *d = *d + T::of(go * v);
                }
            }
            Op::Mse { pred, gt } => {
                let p = nodes[pred.0].value.data();
                let g = nodes[gt.0].value.data();
                let f = gout[0] * T::of(2.0 / p.len() as f64);
                if needs(pred) {
                    let gp = slot(grads, nodes, *pred);
                    for ((d, &a), &b) in gp.iter_mut().zip(p).zip(g) {
                        *d = *d + f * (a - b);
                    }
                }
                if needs(gt) {
                    let gg = slot(grads, nodes, *gt);
                    for ((d, &a), &b) in gg.iter_mut().zip(p).zip(g) {
                        *d = *d - f * (a - b);
                    }
                }
            }
            Op::Bce { pred, gt } => {
                let p = nodes[pred.0].value.data();
                let g = nodes[gt.0].value.data();
                let n = p.len() as f64;
                let go = gout[0].as_f64();
                let gp = slot(grads, nodes, *pred);
                for ((d, &a), &b) in gp.iter_mut().zip(p).zip(g) {
                    let a = a.as_f64();
                    if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&a) {
                        let v = (a - b.as_f64()) / (a * (1.0 - a)) / n;
                        *d = *d + T::of(go * v);
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()])
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `(Σ p·g, Σp + Σg - Σ p·g)` accumulated in f64.
fn jaccard_terms<T: Real>(p: &[T], g: &[T]) -> (f64, f64) {
    let (mut i, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        let (a, b) = (a.as_f64(), b.as_f64());
        i += a * b;
        sp += a;
        sg += b;
    }
    (i, sp + sg - i)
}

fn push_taps(taps: &mut Vec<(u32, f64)>, dims: [usize; 3], coord: [f64; 3]) {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let n = dims[a];
        let c = if coord[a].is_finite() { coord[a].clamp(0.0, (n - 1) as f64) } else { 0.0 };
        let base = if n >= 2 { (c.floor() as usize).min(n - 2) } else { 0 };
        lo[a] = base;
        hi[a] = (base + 1).min(n - 1);
        frac[a] = c - base as f64;
    }
    for corner in 0..8 {
        let pick = |a: usize| (corner >> (2 - a)) & 1 == 1;
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if pick(a) {
                idx[a] = hi[a];
                w *= frac[a];
            } else {
                idx[a] = lo[a];
                w *= 1.0 - frac[a];
            }
        }
        let off = (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2];
        taps.push((off as u32, w));
    }
}

#[derive(Debug, Clone)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    id: [usize; 3],
    od: [usize; 3],
}

impl ConvGeom {
    fn new(xs: &[usize], cout: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let id = [xs[2], xs[3], xs[4]];
        let od = id.map(|d| (d + 2 * pad - k) / stride + 1);
        Self {
            cin: xs[1],
            cout,
            k,
            stride,
            pad,
            id,
            od,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn out_vox(&self) -> usize {
        self.od.iter().product()
    }

    fn in_vox(&self) -> usize {
        self.id.iter().product()
    }

    fn in_item(&self) -> usize {
        self.cin * self.in_vox()
    }

    /// Output planes per im2col chunk, sized so a chunk stays cache resident.
    fn planes_per_chunk(&self) -> usize {
        const CHUNK_SCALARS: usize = 1 << 18;
        let per_plane = self.rows() * self.od[1] * self.od[2];
        (CHUNK_SCALARS / per_plane.max(1)).clamp(1, self.od[0])
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.planes_per_chunk();
        let n = self.od[0];
        (0..n).step_by(step).map(move |p0| (p0, (p0 + step).min(n)))
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Input index along one axis for output index `o` and kernel tap `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, axis: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < self.id[axis]).then_some(i as usize)
    }
}

/// Unfolds output planes `o0 in [p0, p1)` of one batch item into
/// `[Cin·k³, (p1 - p0)·od1·od2]`; out-of-range taps are zero.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, p0: usize, p1: usize, col: &mut [T]) {
    let [id0, id1, id2] = g.id;
    let [_, od1, od2] = g.od;
    let width = (p1 - p0) * od1 * od2;
    let mut r = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * id0 * id1 * id2..(ci + 1) * id0 * id1 * id2];
        for a in 0..g.k {
            for b in 0..g.k {
                for c in 0..g.k {
                    let row = &mut col[r * width..(r + 1) * width];
                    for o0 in p0..p1 {
                        let dst0 = &mut row[(o0 - p0) * od1 * od2..(o0 - p0 + 1) * od1 * od2];
                        let Some(i0) = g.src(o0, a, 0) else {
                            dst0.fill(T::zero());
                            continue;
                        };
                        for o1 in 0..od1 {
                            let dst = &mut dst0[o1 * od2..(o1 + 1) * od2];
                            let Some(i1) = g.src(o1, b, 1) else {
                                dst.fill(T::zero());
                                continue;
                            };
                            let line = &plane[(i0 * id1 + i1) * id2..(i0 * id1 + i1 + 1) * id2];
                            if g.stride == 1 {
                                // i2 = o2 + c - pad
                                let lo = g.pad.saturating_sub(c);
                                let hi = (id2 + g.pad - c).min(od2);
                                dst[..lo].fill(T::zero());
                                dst[lo..hi].copy_from_slice(&line[lo + c - g.pad..hi + c - g.pad]);
                                dst[hi..].fill(T::zero());
                            } else {
                                for (o2, d) in dst.iter_mut().enumerate() {
                                    *d = g.src(o2, c, 2).map_or(T::zero(), |i2| line[i2]);
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a plane chunk back onto the input grid.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, p0: usize, p1: usize, dx: &mut [T]) {
    let [id0, id1, id2] = g.id;
    let [_, od1, od2] = g.od;
    let width = (p1 - p0) * od1 * od2;
    let mut r = 0;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * id0 * id1 * id2..(ci + 1) * id0 * id1 * id2];
        for a in 0..g.k {
            for b in 0..g.k {
                for c in 0..g.k {
                    let row = &col[r * width..(r + 1) * width];
                    for o0 in p0..p1 {
                        let Some(i0) = g.src(o0, a, 0) else { continue };
                        for o1 in 0..od1 {
                            let Some(i1) = g.src(o1, b, 1) else { continue };
                            let at = ((o0 - p0) * od1 + o1) * od2;
                            let src = &row[at..at + od2];
                            let line = &mut plane[(i0 * id1 + i1) * id2..(i0 * id1 + i1 + 1) * id2];
                            if g.stride == 1 {
                                let lo = g.pad.saturating_sub(c);
                                let hi = (id2 + g.pad - c).min(od2);
                                line[lo + c - g.pad..hi + c - g.pad]
                                    .iter_mut()
                                    .zip(&src[lo..hi])
                                    .for_each(|(d, &s)| *d = *d + s);
                            } else {
                                for (o2, &s) in src.iter().enumerate() {
                                    if let Some(i2) = g.src(o2, c, 2) {
                                        line[i2] = line[i2] + s;
                                    }
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(entries: &[(&str, Tensor<f64>, bool)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = entries
            .iter()
            .map(|(n, t, tr)| s.add(*n, t.clone(), *tr).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn leaky_relu_values() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store, false);
        let x = g.input(Tensor::new(vec![2], vec![-2.0, 3.0]).unwrap());
        let y = g.leaky_relu(x);
        assert_eq!(g.value(y).data(), &[-0.02, 3.0]);
    }

    #[test]
    fn center_only_kernel_is_identity() {
        let mut w = vec![0.0; 27];
        w[13] = 1.0;
        let (store, ids) = store_with(&[
            ("w", Tensor::new(vec![1, 1, 3, 3, 3], w).unwrap(), true),
            ("b", Tensor::zeros(vec![1]), true),
        ]);
        let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::new(vec![1, 1, 4, 4, 4], data.clone()).unwrap());
        let y = Layer::Conv3d {
            weight: ids[0],
            bias: ids[1],
            stride: 1,
        }
        .apply(&mut g, x)
        .unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    use crate::layers::Layer;

    #[test]
    fn linear_sum_gradient_is_input() {
        let xs = vec![0.5, -1.25, 2.0, 4.0];
        let (store, ids) = store_with(&[
            ("w", Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true),
            ("unused", Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap(), true),
        ]);
        let mut g = Graph::new(&store, true);
        let w = g.param(ids[0]);
        let x = g.input(Tensor::new(vec![4], xs.clone()).unwrap());
        let wx = g.mul(w, x).unwrap();
        let loss = g.sum(wx);
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads.get(ids[0]), xs.as_slice());
        assert_eq!(grads.get(ids[1]), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store, false);
        let x = g.variable(Tensor::zeros(vec![3]));
        let y = g.leaky_relu(x);
        assert!(matches!(g.backward(y), Err(GradError::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let (store, ids) = store_with(&[
            ("w", Tensor::zeros(vec![2, 3, 3, 3, 3]), true),
            ("b", Tensor::zeros(vec![2]), true),
        ]);
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::zeros(vec![1, 2, 4, 4, 4]));
        let (w, b) = (g.param(ids[0]), g.param(ids[1]));
        match g.conv3d(x, w, b, 1) {
            Err(GradError::Shape { layer, actual, .. }) => {
                assert_eq!(layer, "conv3d");
                assert_eq!(actual, vec![1, 2, 4, 4, 4]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn batch_norm_single_item_uses_running_stats() {
        let (store, ids) = store_with(&[
            ("g", Tensor::new(vec![1], vec![2.0]).unwrap(), true),
            ("b", Tensor::new(vec![1], vec![0.5]).unwrap(), true),
            ("rm", Tensor::new(vec![1], vec![1.0]).unwrap(), false),
            ("rv", Tensor::new(vec![1], vec![4.0]).unwrap(), false),
        ]);
        for train in [false, true] {
            let mut g = Graph::new(&store, train);
            let x = g.input(Tensor::new(vec![1, 1, 3], vec![1.0, 3.0, -1.0]).unwrap());
            let (ga, be) = (g.param(ids[0]), g.param(ids[1]));
            let y = g.batch_norm(x, ga, be, ids[2], ids[3]).unwrap();
            let s = 1.0 / (4.0f64 + BN_EPS).sqrt();
            let expect: Vec<f64> = [1.0, 3.0, -1.0].iter().map(|v| 2.0 * (v - 1.0) * s + 0.5).collect();
            for (a, e) in g.value(y).data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
            assert!(g.take_buffer_updates().is_empty());
        }
    }

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let (store, ids) = store_with(&[
            ("g", Tensor::new(vec![1], vec![1.0]).unwrap(), true),
            ("b", Tensor::new(vec![1], vec![0.0]).unwrap(), true),
            ("rm", Tensor::new(vec![1], vec![0.0]).unwrap(), false),
            ("rv", Tensor::new(vec![1], vec![1.0]).unwrap(), false),
        ]);
        let mut g = Graph::new(&store, true);
        let x = g.input(Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let (ga, be) = (g.param(ids[0]), g.param(ids[1]));
        let y = g.batch_norm(x, ga, be, ids[2], ids[3]).unwrap();
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        let updates = g.take_buffer_updates();
        assert_eq!(updates.len(), 2);
        assert!((updates[0].1[0] - 0.4).abs() < 1e-12);
        // unbiased variance of {1,3,5,7} is 20/3
        assert!((updates[1].1[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn max_downsample_ties_take_lowest_index() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store, true);
        let x = g.variable(Tensor::filled(vec![1, 1, 2, 2, 2], 1.0));
        let y = g.max_downsample(x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(gx[0], 1.0);
        assert!(gx[1..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn loss_closed_forms() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store, false);
        let gt = g.input(Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let same = g.input(Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let disjoint = g.input(Tensor::new(vec![4], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let half = g.input(Tensor::filled(vec![4], 0.5));
        let j0 = g.jaccard_loss(same, gt).unwrap();
        let j1 = g.jaccard_loss(disjoint, gt).unwrap();
        let m = g.mse_loss(same, gt).unwrap();
        let b = g.bce_loss(half, gt).unwrap();
        assert!(g.value(j0).data()[0].abs() < 1e-6);
        assert!((g.value(j1).data()[0] - 1.0).abs() < 1e-6);
        assert_eq!(g.value(m).data()[0], 0.0);
        assert!((g.value(b).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn concat_then_split_gradients() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store, true);
        let a = g.variable(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = g.variable(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = g.input(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let cw = g.mul(c, w).unwrap();
        let l = g.sum(cw);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 4.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0, 3.0, 5.0, 6.0]);
    }
}
