//! Parameter storage and the forward/backward passes.
//!
//! Parameters live in a [`ParamStore`] indexed in parallel with
//! [`ArchSpec::layers`](crate::arch::ArchSpec). The forward pass records every
//! layer output plus the auxiliary state backward needs in a [`Cache`], which
//! also gives the importance metrics direct access to intermediate
//! activations.
//!
//! Batch normalization can run off batch statistics (training and gradient
//! checking) or off stored running statistics (evaluation). Running statistics
//! are an exponential moving average of batch statistics and can be recomputed
//! exactly over a dataset with [`recompute_bn_stats`], which matters after
//! surgery on the network (feature removal) invalidates them.

use std::io::{Read, Write};
use std::path::Path;

use crate::arch::{ArchSpec, DataShape, LayerKind, ParamShape, ShapePlan};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    col2im, conv_apply_cols, feature_major, im2col, matmul, transpose2, Tensor,
};

/// Weight of the exponential moving average that batch statistics contribute
/// to the stored running statistics on every training-mode forward pass.
pub const BN_MOMENTUM: f64 = 0.1;

/// Parameters owned by one layer. Classifier convolutions use the `Conv`
/// variant.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Conv {
        /// `[F, C, kh, kw]`
        weight: Tensor,
        /// `[F]`
        bias: Tensor,
    },
    Linear {
        /// `[out, in]`
        weight: Tensor,
        /// `[out]`
        bias: Tensor,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
}

impl LayerParams {
    /// The layer's weight tensor, if it has one. Per-output-feature slices of
    /// it are contiguous (`Tensor::feature`).
    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            LayerParams::Conv { weight, .. } | LayerParams::Linear { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            LayerParams::Conv { bias, .. } | LayerParams::Linear { bias, .. } => Some(bias),
            _ => None,
        }
    }
}

/// A borrowed view of one learnable tensor: its layer index, a stable name,
/// whether weight decay applies to it, and the tensor itself.
pub struct ParamRef<'a> {
    pub layer: usize,
    pub name: &'static str,
    pub decay: bool,
    pub tensor: &'a Tensor,
}

/// Mutable counterpart of [`ParamRef`].
pub struct ParamRefMut<'a> {
    pub layer: usize,
    pub name: &'static str,
    pub decay: bool,
    pub tensor: &'a mut Tensor,
}

/// All parameters of a network, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub layers: Vec<LayerParams>,
}

impl ParamStore {
    /// Allocate and initialize parameters for `arch`, drawing every weight
    /// from `rng` in layer order. Weights are N(0, 2/fan_in), biases zero,
    /// batchnorm scale one / shift zero with unit running variance.
    pub fn init(arch: &ArchSpec, rng: &mut Rng) -> Result<ParamStore> {
        let plan = arch.shape_plan()?;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for shape in &plan.params {
            layers.push(match shape {
                ParamShape::None => LayerParams::None,
                ParamShape::Conv { weight } => {
                    let fan_in = (weight[1] * weight[2] * weight[3]) as f64;
                    let mut w = Tensor::zeros(weight);
                    rng.fill_normal(w.data_mut(), 0.0, (2.0 / fan_in).sqrt());
                    LayerParams::Conv {
                        weight: w,
                        bias: Tensor::zeros(&[weight[0]]),
                    }
                }
                ParamShape::Linear { weight } => {
                    let fan_in = weight[1] as f64;
                    let mut w = Tensor::zeros(weight);
                    rng.fill_normal(w.data_mut(), 0.0, (2.0 / fan_in).sqrt());
                    LayerParams::Linear {
                        weight: w,
                        bias: Tensor::zeros(&[weight[0]]),
                    }
                }
                ParamShape::BatchNorm { channels } => LayerParams::BatchNorm {
                    gamma: Tensor::filled(&[*channels], 1.0),
                    beta: Tensor::zeros(&[*channels]),
                    running_mean: Tensor::zeros(&[*channels]),
                    running_var: Tensor::filled(&[*channels], 1.0),
                },
            });
        }
        Ok(ParamStore { layers })
    }

    /// Learnable tensors in a fixed order (running statistics excluded).
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias } => {
                    out.push(ParamRef { layer: i, name: "weight", decay: true, tensor: weight });
                    out.push(ParamRef { layer: i, name: "bias", decay: false, tensor: bias });
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push(ParamRef { layer: i, name: "gamma", decay: false, tensor: gamma });
                    out.push(ParamRef { layer: i, name: "beta", decay: false, tensor: beta });
                }
            }
        }
        out
    }

    /// Mutable view of the same tensors, in the same order as [`params`].
    ///
    /// [`params`]: ParamStore::params
    pub fn params_mut(&mut self) -> Vec<ParamRefMut<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias } => {
                    out.push(ParamRefMut { layer: i, name: "weight", decay: true, tensor: weight });
                    out.push(ParamRefMut { layer: i, name: "bias", decay: false, tensor: bias });
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push(ParamRefMut { layer: i, name: "gamma", decay: false, tensor: gamma });
                    out.push(ParamRefMut { layer: i, name: "beta", decay: false, tensor: beta });
                }
            }
        }
        out
    }

    /// Number of learnable scalars (weights, biases, batchnorm scale/shift).
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            match layer {
                LayerParams::None => w.write_all(&[0u8])?,
                LayerParams::Conv { weight, bias } => {
                    w.write_all(&[1u8])?;
                    weight.write_to(w)?;
                    bias.write_to(w)?;
                }
                LayerParams::Linear { weight, bias } => {
                    w.write_all(&[2u8])?;
                    weight.write_to(w)?;
                    bias.write_to(w)?;
                }
                LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                    w.write_all(&[3u8])?;
                    gamma.write_to(w)?;
                    beta.write_to(w)?;
                    running_mean.write_to(w)?;
                    running_var.write_to(w)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<ParamStore> {
        let mut count = [0u8; 4];
        r.read_exact(&mut count)?;
        let count = u32::from_le_bytes(count) as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            layers.push(match tag[0] {
                0 => LayerParams::None,
                1 => LayerParams::Conv { weight: Tensor::read_from(r)?, bias: Tensor::read_from(r)? },
                2 => LayerParams::Linear { weight: Tensor::read_from(r)?, bias: Tensor::read_from(r)? },
                3 => LayerParams::BatchNorm {
                    gamma: Tensor::read_from(r)?,
                    beta: Tensor::read_from(r)?,
                    running_mean: Tensor::read_from(r)?,
                    running_var: Tensor::read_from(r)?,
                },
                t => return Err(Error::Numeric(format!("unknown layer tag {t} in parameter file"))),
            });
        }
        Ok(ParamStore { layers })
    }

    /// Check that every parameter tensor has the shape `arch` requires.
    pub fn check_shapes(&self, arch: &ArchSpec) -> Result<()> {
        let plan = arch.shape_plan()?;
        if self.layers.len() != plan.params.len() {
            return Err(Error::Config(format!(
                "parameter store has {} layers, architecture has {}",
                self.layers.len(),
                plan.params.len()
            )));
        }
        for (i, (params, shape)) in self.layers.iter().zip(&plan.params).enumerate() {
            let ok = match (params, shape) {
                (LayerParams::None, ParamShape::None) => true,
                (LayerParams::Conv { weight, bias }, ParamShape::Conv { weight: ws }) => {
                    weight.shape() == ws && bias.shape() == [ws[0]]
                }
                (LayerParams::Linear { weight, bias }, ParamShape::Linear { weight: ws }) => {
                    weight.shape() == ws && bias.shape() == [ws[0]]
                }
                (LayerParams::BatchNorm { gamma, beta, running_mean, running_var }, ParamShape::BatchNorm { channels }) => {
                    [gamma, beta, running_mean, running_var].iter().all(|t| t.shape() == [*channels])
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Layer {
                    index: i,
                    kind: arch.layers[i].kind.name().to_string(),
                    msg: "stored parameters do not match architecture".into(),
                });
            }
        }
        Ok(())
    }
}

/// Gradients (or any parallel per-parameter buffer, e.g. optimizer velocity)
/// mirroring a [`ParamStore`] without the running statistics.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    None,
    Conv { weight: Tensor, bias: Tensor },
    Linear { weight: Tensor, bias: Tensor },
    BatchNorm { gamma: Tensor, beta: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Gradients {
        let layers = store
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::None => LayerGrads::None,
                LayerParams::Conv { weight, bias } => LayerGrads::Conv {
                    weight: Tensor::zeros(weight.shape()),
                    bias: Tensor::zeros(bias.shape()),
                },
                LayerParams::Linear { weight, bias } => LayerGrads::Linear {
                    weight: Tensor::zeros(weight.shape()),
                    bias: Tensor::zeros(bias.shape()),
                },
                LayerParams::BatchNorm { gamma, beta, .. } => LayerGrads::BatchNorm {
                    gamma: Tensor::zeros(gamma.shape()),
                    beta: Tensor::zeros(beta.shape()),
                },
            })
            .collect();
        Gradients { layers }
    }

    /// Mutable tensors in the same order as [`ParamStore::params`].
    pub fn params_mut(&mut self) -> Vec<ParamRefMut<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                LayerGrads::None => {}
                LayerGrads::Conv { weight, bias } | LayerGrads::Linear { weight, bias } => {
                    out.push(ParamRefMut { layer: i, name: "weight", decay: true, tensor: weight });
                    out.push(ParamRefMut { layer: i, name: "bias", decay: false, tensor: bias });
                }
                LayerGrads::BatchNorm { gamma, beta } => {
                    out.push(ParamRefMut { layer: i, name: "gamma", decay: false, tensor: gamma });
                    out.push(ParamRefMut { layer: i, name: "beta", decay: false, tensor: beta });
                }
            }
        }
        out
    }

    /// Borrowed tensors in the same order as [`ParamStore::params`].
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerGrads::None => {}
                LayerGrads::Conv { weight, bias } | LayerGrads::Linear { weight, bias } => {
                    out.push(ParamRef { layer: i, name: "weight", decay: true, tensor: weight });
                    out.push(ParamRef { layer: i, name: "bias", decay: false, tensor: bias });
                }
                LayerGrads::BatchNorm { gamma, beta } => {
                    out.push(ParamRef { layer: i, name: "gamma", decay: false, tensor: gamma });
                    out.push(ParamRef { layer: i, name: "beta", decay: false, tensor: beta });
                }
            }
        }
        out
    }
}

/// Which statistics batch normalization uses in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StatMode {
    /// Statistics of the current batch (training and gradient checks).
    Batch,
    /// Stored running statistics (evaluation).
    Running,
}

/// Per-layer auxiliary state recorded by the forward pass.
enum CacheAux {
    None,
    /// Patch matrix of the layer input.
    Conv { cols: Tensor },
    /// Per-channel batch statistics actually used by the layer.
    BatchNorm { mean: Vec<f64>, var: Vec<f64>, istd: Vec<f64>, m: usize },
    /// For each output element, the flat index of the winning input element.
    MaxPool { argmax: Vec<usize> },
}

/// Everything the backward pass and the activation metrics need from a
/// forward pass: the input batch, every layer's output, and per-layer
/// auxiliary state.
pub struct Cache {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
    aux: Vec<CacheAux>,
}

impl Cache {
    /// Batch statistics (mean, var, element count) recorded for a batchnorm
    /// layer, if the pass ran on batch statistics.
    pub fn bn_stats(&self, layer: usize) -> Option<(&[f64], &[f64], usize)> {
        match &self.aux[layer] {
            CacheAux::BatchNorm { mean, var, m, .. } => Some((mean, var, *m)),
            _ => None,
        }
    }
}

/// Visit every element of a `[N, C, ...]` tensor as (channel, flat index).
/// Channels are axis 1; this covers both `[N, C, H, W]` maps and `[N, D]`
/// flat activations (where each of the D features is a channel).
fn for_each_channel_elem(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = shape[0];
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * inner;
            for s in 0..inner {
                f(ci, base + s);
            }
        }
    }
}

/// Elements per channel for a `[N, C, ...]` shape.
fn per_channel_count(shape: &[usize]) -> usize {
    shape[0] * shape[2..].iter().product::<usize>()
}

fn conv_geometry(arch: &ArchSpec, plan: &ShapePlan, i: usize) -> (usize, usize, usize, usize) {
    match arch.layers[i].kind {
        LayerKind::Conv => {
            let (kh, kw) = arch.layers[i].kernel.expect("validated");
            (kh, kw, arch.layers[i].stride, arch.layers[i].padding)
        }
        LayerKind::ClassifierConv => match plan.inputs[i] {
            DataShape::Map(_, h, w) => (h, w, 1, 0),
            DataShape::Flat(_) => unreachable!("classifier input is a map"),
        },
        _ => unreachable!("conv geometry queried for non-conv layer"),
    }
}

fn forward_pass(arch: &ArchSpec, store: &ParamStore, x: &Tensor, mode: StatMode) -> Result<(Tensor, Cache)> {
    let plan = arch.shape_plan()?;
    let n = x.shape().first().copied().unwrap_or(0);
    let expect = [n, arch.input_shape[0], arch.input_shape[1], arch.input_shape[2]];
    if x.rank() != 4 || x.shape() != expect || n == 0 {
        return Err(Error::ShapeMismatch {
            op: "forward input",
            lhs: x.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    store.check_shapes(arch)?;

    let mut outputs: Vec<Tensor> = Vec::with_capacity(arch.layers.len());
    let mut aux: Vec<CacheAux> = Vec::with_capacity(arch.layers.len());
    let mut cur = x.clone();

    for (i, layer) in arch.layers.iter().enumerate() {
        let out = match layer.kind {
            LayerKind::Conv | LayerKind::ClassifierConv => {
                let LayerParams::Conv { weight, bias } = &store.layers[i] else {
                    unreachable!("checked by check_shapes");
                };
                let (kh, kw, stride, padding) = conv_geometry(arch, &plan, i);
                let (oh, ow) = (
                    crate::tensor::conv_out_extent(cur.shape()[2], kh, stride, padding).expect("validated"),
                    crate::tensor::conv_out_extent(cur.shape()[3], kw, stride, padding).expect("validated"),
                );
                let cols = im2col(&cur, kh, kw, stride, padding);
                let mut out = conv_apply_cols(weight, &cols, n, oh, ow)?;
                aux.push(CacheAux::Conv { cols });
                let od = out.data_mut();
                let bd = bias.data();
                for_each_channel_elem(&[n, bd.len(), oh, ow], |c, idx| od[idx] += bd[c]);
                if layer.kind == LayerKind::ClassifierConv {
                    // 1x1 spatial output; expose plain logits.
                    out.reshape(&[n, arch.num_classes])?
                } else {
                    out
                }
            }
            LayerKind::Linear => {
                let LayerParams::Linear { weight, bias } = &store.layers[i] else {
                    unreachable!("checked by check_shapes");
                };
                aux.push(CacheAux::None);
                let mut out = matmul(&cur, &transpose2(weight)?)?;
                let od = out.data_mut();
                let bd = bias.data();
                for_each_channel_elem(out_shape_2(n, bd.len()).as_slice(), |c, idx| od[idx] += bd[c]);
                out
            }
            LayerKind::BatchNorm => {
                let LayerParams::BatchNorm { gamma, beta, running_mean, running_var } = &store.layers[i] else {
                    unreachable!("checked by check_shapes");
                };
                let channels = gamma.len();
                let m = per_channel_count(cur.shape());
                let (mean, var) = match mode {
                    StatMode::Batch => {
                        let mut sum = vec![0.0; channels];
                        let mut sumsq = vec![0.0; channels];
                        let cd = cur.data();
                        for_each_channel_elem(cur.shape(), |c, idx| {
                            sum[c] += cd[idx];
                            sumsq[c] += cd[idx] * cd[idx];
                        });
                        let mean: Vec<f64> = sum.iter().map(|s| s / m as f64).collect();
                        let var: Vec<f64> = sumsq
                            .iter()
                            .zip(&mean)
                            .map(|(sq, mu)| (sq / m as f64 - mu * mu).max(0.0))
                            .collect();
                        (mean, var)
                    }
                    StatMode::Running => (running_mean.data().to_vec(), running_var.data().to_vec()),
                };
                let istd: Vec<f64> = var.iter().map(|v| 1.0 / (v + arch.bn_epsilon).sqrt()).collect();
                let mut out = cur.clone();
                let od = out.data_mut();
                let gd = gamma.data();
                let bd = beta.data();
                for_each_channel_elem(cur.shape(), |c, idx| {
                    od[idx] = gd[c] * (od[idx] - mean[c]) * istd[c] + bd[c];
                });
                aux.push(CacheAux::BatchNorm { mean, var, istd, m });
                out
            }
            LayerKind::Relu => {
                aux.push(CacheAux::None);
                cur.map(|v| if v > 0.0 { v } else { 0.0 })
            }
            LayerKind::MaxPool => {
                let (kh, kw) = layer.kernel.expect("validated");
                let stride = layer.stride;
                let (c, h, w) = (cur.shape()[1], cur.shape()[2], cur.shape()[3]);
                let oh = crate::tensor::conv_out_extent(h, kh, stride, 0).expect("validated");
                let ow = crate::tensor::conv_out_extent(w, kw, stride, 0).expect("validated");
                let mut out = Tensor::zeros(&[n, c, oh, ow]);
                let mut argmax = vec![0usize; out.len()];
                let cd = cur.data();
                let od = out.data_mut();
                for ni in 0..n {
                    for ci in 0..c {
                        let in_base = (ni * c + ci) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0usize;
                                for ky in 0..kh {
                                    let iy = oy * stride + ky;
                                    for kx in 0..kw {
                                        let ix = ox * stride + kx;
                                        let idx = in_base + iy * w + ix;
                                        // Strict comparison keeps the first
                                        // (lowest-index) element on ties.
                                        if cd[idx] > best {
                                            best = cd[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                                let oidx = ((ni * c + ci) * oh + oy) * ow + ox;
                                od[oidx] = best;
                                argmax[oidx] = best_idx;
                            }
                        }
                    }
                }
                aux.push(CacheAux::MaxPool { argmax });
                out
            }
            LayerKind::Flatten => {
                aux.push(CacheAux::None);
                cur.reshape(&[n, cur.len() / n])?
            }
        };
        outputs.push(out.clone());
        cur = out;
    }

    Ok((
        cur,
        Cache {
            input: x.clone(),
            outputs,
            aux,
        },
    ))
}

fn out_shape_2(n: usize, c: usize) -> [usize; 2] {
    [n, c]
}

/// Training-mode forward: batch statistics in batchnorm layers, and the
/// stored running statistics updated by an exponential moving average.
pub fn forward_train(arch: &ArchSpec, store: &mut ParamStore, x: &Tensor) -> Result<(Tensor, Cache)> {
    let (logits, cache) = forward_pass(arch, store, x, StatMode::Batch)?;
    for (i, layer) in store.layers.iter_mut().enumerate() {
        if let LayerParams::BatchNorm { running_mean, running_var, .. } = layer {
            let Some((mean, var, _)) = cache.bn_stats(i) else { continue };
            for (r, b) in running_mean.data_mut().iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in running_var.data_mut().iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
    Ok((logits, cache))
}

/// Forward with batch statistics but no side effects on the store. Gradients
/// produced by [`backward`] differentiate exactly this map, so finite
/// differences of its loss are the reference for gradient checks.
pub fn forward_batchstats(arch: &ArchSpec, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Cache)> {
    forward_pass(arch, store, x, StatMode::Batch)
}

/// Evaluation-mode forward: batchnorm uses stored running statistics.
pub fn forward_eval(arch: &ArchSpec, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    forward_pass(arch, store, x, StatMode::Running).map(|(logits, _)| logits)
}

/// Evaluation-mode forward that also returns the cache (for activation
/// statistics over a dataset).
pub fn forward_eval_cached(arch: &ArchSpec, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Cache)> {
    forward_pass(arch, store, x, StatMode::Running)
}

/// Mean cross-entropy of `logits: [N, K]` against integer labels, and its
/// gradient with respect to the logits. Uses the log-sum-exp form, so large
/// logits do not overflow.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut dlogits = Tensor::zeros(&[n, k]);
    let ld = logits.data();
    let dd = dlogits.data_mut();
    let mut loss = 0.0;
    for (ni, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let row = &ld[ni * k..(ni + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += lse - row[label];
        let drow = &mut dd[ni * k..(ni + 1) * k];
        for j in 0..k {
            let softmax = (row[j] - lse).exp();
            drow[j] = (softmax - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, dlogits))
}

/// Fraction of rows whose argmax logit equals the label. Ties resolve to the
/// lowest class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let ld = logits.data();
    let mut hits = 0usize;
    for (ni, &label) in labels.iter().enumerate() {
        let row = &ld[ni * k..(ni + 1) * k];
        let mut best = 0usize;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Backpropagate `dlogits` through the pass recorded in `cache`, returning
/// gradients for every learnable tensor.
pub fn backward(arch: &ArchSpec, store: &ParamStore, cache: &Cache, dlogits: &Tensor) -> Result<Gradients> {
    let plan = arch.shape_plan()?;
    let mut grads = Gradients::zeros_like(store);
    let mut dcur = dlogits.clone();
    let n = cache.input.shape()[0];

    for i in (0..arch.layers.len()).rev() {
        let input = if i == 0 { &cache.input } else { &cache.outputs[i - 1] };
        dcur = match arch.layers[i].kind {
            LayerKind::Conv | LayerKind::ClassifierConv => {
                let LayerParams::Conv { weight, .. } = &store.layers[i] else {
                    unreachable!("checked during forward");
                };
                let CacheAux::Conv { cols } = &cache.aux[i] else {
                    unreachable!("conv layers cache their patch matrix");
                };
                let (kh, kw, stride, padding) = conv_geometry(arch, &plan, i);
                let f = weight.shape()[0];
                let dy4 = if arch.layers[i].kind == LayerKind::ClassifierConv {
                    dcur.reshape(&[n, f, 1, 1])?
                } else {
                    dcur
                };
                let dy_fm = feature_major(&dy4)?; // [F, N*OH*OW]
                let dw_mat = matmul(&dy_fm, &transpose2(cols)?)?;
                let LayerGrads::Conv { weight: gw, bias: gb } = &mut grads.layers[i] else {
                    unreachable!("gradients mirror the store");
                };
                *gw = dw_mat.reshape(weight.shape())?;
                let dyd = dy4.data();
                let gbd = gb.data_mut();
                for_each_channel_elem(dy4.shape(), |c, idx| gbd[c] += dyd[idx]);
                if i == 0 {
                    break;
                }
                let wk = weight.reshape(&[f, weight.len() / f])?;
                let dcols = matmul(&transpose2(&wk)?, &dy_fm)?;
                let ishape = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
                col2im(&dcols, &ishape, kh, kw, stride, padding)
            }
            LayerKind::Linear => {
                let LayerParams::Linear { weight, .. } = &store.layers[i] else {
                    unreachable!("checked during forward");
                };
                let LayerGrads::Linear { weight: gw, bias: gb } = &mut grads.layers[i] else {
                    unreachable!("gradients mirror the store");
                };
                *gw = matmul(&transpose2(&dcur)?, input)?;
                let dyd = dcur.data();
                let gbd = gb.data_mut();
                for_each_channel_elem(dcur.shape(), |c, idx| gbd[c] += dyd[idx]);
                if i == 0 {
                    break;
                }
                matmul(&dcur, weight)?
            }
            LayerKind::BatchNorm => {
                let LayerParams::BatchNorm { gamma, .. } = &store.layers[i] else {
                    unreachable!("checked during forward");
                };
                let CacheAux::BatchNorm { mean, istd, m, .. } = &cache.aux[i] else {
                    unreachable!("batchnorm layers cache their statistics");
                };
                let channels = gamma.len();
                let xd = input.data();
                let dyd = dcur.data();
                // First pass: per-channel sums of dy and dy*xhat.
                let mut sum_dy = vec![0.0; channels];
                let mut sum_dy_xhat = vec![0.0; channels];
                for_each_channel_elem(input.shape(), |c, idx| {
                    let xhat = (xd[idx] - mean[c]) * istd[c];
                    sum_dy[c] += dyd[idx];
                    sum_dy_xhat[c] += dyd[idx] * xhat;
                });
                let LayerGrads::BatchNorm { gamma: gg, beta: gb } = &mut grads.layers[i] else {
                    unreachable!("gradients mirror the store");
                };
                gg.data_mut().copy_from_slice(&sum_dy_xhat);
                gb.data_mut().copy_from_slice(&sum_dy);
                if i == 0 {
                    break;
                }
                // dx = g*istd*(dy - mean(dy) - xhat*mean(dy*xhat)), means over
                // the batch slice of each channel.
                let gd = gamma.data();
                let mf = *m as f64;
                let mut dx = Tensor::zeros(input.shape());
                let dxd = dx.data_mut();
                for_each_channel_elem(input.shape(), |c, idx| {
                    let xhat = (xd[idx] - mean[c]) * istd[c];
                    dxd[idx] = gd[c]
                        * istd[c]
                        * (dyd[idx] - sum_dy[c] / mf - xhat * sum_dy_xhat[c] / mf);
                });
                dx
            }
            LayerKind::Relu => {
                if i == 0 {
                    break;
                }
                let out = &cache.outputs[i];
                let mut dx = dcur;
                let od = out.data();
                for (d, o) in dx.data_mut().iter_mut().zip(od) {
                    if *o <= 0.0 {
                        *d = 0.0;
                    }
                }
                dx
            }
            LayerKind::MaxPool => {
                if i == 0 {
                    break;
                }
                let CacheAux::MaxPool { argmax } = &cache.aux[i] else {
                    unreachable!("maxpool layers cache their argmax");
                };
                let mut dx = Tensor::zeros(input.shape());
                let dxd = dx.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    dxd[src] += dcur.data()[o];
                }
                dx
            }
            LayerKind::Flatten => {
                if i == 0 {
                    break;
                }
                dcur.reshape(input.shape())?
            }
        };
    }
    Ok(grads)
}

/// Replace every batchnorm layer's running statistics with the exact
/// per-channel mean and (biased) variance of its inputs over all `batches`,
/// computed in a single pass with batch statistics active upstream (the same
/// regime training uses). Call after structural surgery on the network.
pub fn recompute_bn_stats(
    arch: &ArchSpec,
    store: &mut ParamStore,
    batches: impl IntoIterator<Item = Tensor>,
) -> Result<()> {
    let bn_layers: Vec<usize> = arch
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind == LayerKind::BatchNorm)
        .map(|(i, _)| i)
        .collect();
    let mut sum: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
    let mut sumsq: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
    let mut count: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    let mut seen_any = false;
    for batch in batches {
        seen_any = true;
        let (_, cache) = forward_batchstats(arch, store, &batch)?;
        for &i in &bn_layers {
            let (mean, var, m) = cache.bn_stats(i).expect("batch-stat pass records stats");
            let channels = mean.len();
            let s = sum.entry(i).or_insert_with(|| vec![0.0; channels]);
            let sq = sumsq.entry(i).or_insert_with(|| vec![0.0; channels]);
            let cnt = count.entry(i).or_insert(0);
            // A batch contributes m*mean to the sum and m*(var + mean^2) to
            // the sum of squares, so unequal batch sizes weight correctly.
            for c in 0..channels {
                s[c] += mean[c] * m as f64;
                sq[c] += (var[c] + mean[c] * mean[c]) * m as f64;
            }
            *cnt += m;
        }
    }
    if !seen_any {
        return Err(Error::InvalidArg("recompute_bn_stats needs at least one batch".into()));
    }
    for &i in &bn_layers {
        let LayerParams::BatchNorm { running_mean, running_var, .. } = &mut store.layers[i] else {
            unreachable!("index list built from the architecture");
        };
        let m = count[&i] as f64;
        for c in 0..running_mean.len() {
            let mean = sum[&i][c] / m;
            running_mean.data_mut()[c] = mean;
            running_var.data_mut()[c] = (sumsq[&i][c] / m - mean * mean).max(0.0);
        }
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"WNCK";

/// Write architecture and parameters to one file.
pub fn save_checkpoint(path: &Path, arch: &ArchSpec, store: &ParamStore) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    let arch_json = serde_json::to_vec(arch)?;
    w.write_all(&(arch_json.len() as u64).to_le_bytes())?;
    w.write_all(&arch_json)?;
    store.save(&mut w)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ArchSpec, ParamStore)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Config(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)?;
    if u32::from_le_bytes(version) != 1 {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {}",
            u32::from_le_bytes(version)
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut arch_json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut arch_json)?;
    let arch: ArchSpec = serde_json::from_slice(&arch_json)?;
    let store = ParamStore::load(&mut r)?;
    store.check_shapes(&arch)?;
    Ok((arch, store))
}
