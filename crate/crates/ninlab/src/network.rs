//! Feed-forward networks with noise injection nodes (NINs).
//!
//! A NIN is an extra input node fed pure noise ε through trainable weights
//! `W_NI`. For a dense attachment the injection is a translation of the
//! layer's pre-activation, `z → z + ε·W_NI`; for a convolutional attachment
//! the layer's *input representation* is shifted pixel-wise, `x → x + ε·W_NI`
//! with `W_NI` shaped like one sample's representation. In eval mode the
//! noise is forced to ε = 0, which reproduces the vanilla network exactly.
//!
//! The module implements forward evaluation, batch-mean loss, exact
//! reverse-mode gradients for every parameter (including every `W_NI`),
//! per-sample local gradients at an injection point, and input gradients
//! (used by the adversarial attacks).

use serde::{Deserialize, Serialize};

use crate::noise::{sample_noise, NoiseDistribution};
use crate::rng::RngStream;
use crate::tensor::{gemm, gemm_a_bt, gemm_at_b, Tensor};
use crate::{Error, Result};

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Linear,
    Relu,
    Elu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
        }
    }

    /// Derivative at pre-activation `z`. ReLU uses the subgradient
    /// convention g(0) = 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
        }
    }
}

/// One layer of a [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense { d_in: usize, d_out: usize, activation: Activation },
    /// Valid (no padding), stride-1 convolution.
    Conv2d { in_ch: usize, out_ch: usize, kernel_h: usize, kernel_w: usize, activation: Activation },
    /// Non-overlapping max pooling with window = stride = (h, w).
    Maxpool { h: usize, w: usize },
    Batchnorm { channels: usize },
    Flatten,
    Dropout { p_drop: f64 },
}

impl LayerSpec {
    /// True for layers a NIN can attach to (every dense/conv input).
    pub fn injectable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

/// Loss attached to the network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// ½·mean over the batch of the squared residual norm.
    Mse,
    /// Softmax cross-entropy; labels are class indices or one-hot rows.
    CrossEntropy,
}

/// Where NINs attach and how their noise is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NinTopology {
    /// One NIN at the first injectable layer (in-NINR).
    InputOnly,
    /// One NIN per injectable layer (full-NINR), each with its own `W_NI`.
    Full,
}

/// Noise resampling policy across training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NinResample {
    /// Fresh ε per sample, per epoch (the default protocol).
    PerSamplePerEpoch,
    /// ε drawn once per sample before training and reused every epoch.
    OnceBeforeTraining,
}

/// Noise-injection configuration for a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NinConfig {
    pub topology: NinTopology,
    pub dist: NoiseDistribution,
    pub resample: NinResample,
    /// With `Full` topology: share one ε draw per sample across all layers
    /// instead of drawing independently per layer. Default false.
    #[serde(default)]
    pub shared_eps: bool,
}

/// A complete feed-forward architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Shape of one input sample: `[d]` for flat inputs, `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub loss: LossKind,
    pub nin: Option<NinConfig>,
}

impl NetworkSpec {
    /// Layer indices that carry a NIN under the configured topology.
    pub fn nin_sites(&self) -> Vec<usize> {
        let Some(nin) = &self.nin else { return Vec::new() };
        let injectable: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.injectable())
            .map(|(i, _)| i)
            .collect();
        match nin.topology {
            NinTopology::InputOnly => injectable.into_iter().take(1).collect(),
            NinTopology::Full => injectable,
        }
    }

    /// Shape of each layer's input, starting from `input_shape`.
    /// Fails when adjacent extents are inconsistent.
    pub fn layer_input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shapes.push(cur.clone());
            cur = match layer {
                LayerSpec::Dense { d_in, d_out, .. } => {
                    let flat: usize = cur.iter().product();
                    if cur.len() != 1 || flat != *d_in {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: dense expects flat input of width {d_in}, got {cur:?}"
                        )));
                    }
                    vec![*d_out]
                }
                LayerSpec::Conv2d { in_ch, out_ch, kernel_h, kernel_w, .. } => {
                    if cur.len() != 3 || cur[0] != *in_ch {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: conv2d expects [{in_ch}, h, w] input, got {cur:?}"
                        )));
                    }
                    if cur[1] < *kernel_h || cur[2] < *kernel_w {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: kernel {kernel_h}x{kernel_w} larger than input {cur:?}"
                        )));
                    }
                    vec![*out_ch, cur[1] - kernel_h + 1, cur[2] - kernel_w + 1]
                }
                LayerSpec::Maxpool { h, w } => {
                    if cur.len() != 3 {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: maxpool expects [c, h, w] input, got {cur:?}"
                        )));
                    }
                    vec![cur[0], cur[1] / h, cur[2] / w]
                }
                LayerSpec::Batchnorm { channels } => {
                    let c = cur[0];
                    if c != *channels {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: batchnorm over {channels} channels, input has {c}"
                        )));
                    }
                    cur
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::Dropout { p_drop } => {
                    if !(0.0..1.0).contains(p_drop) {
                        return Err(Error::Config(format!(
                            "layer {i}: p_drop must lie in [0,1), got {p_drop}"
                        )));
                    }
                    cur
                }
            };
        }
        Ok(shapes)
    }

    /// Shape of the network output for one sample.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let shapes = self.layer_input_shapes()?;
        // Recompute the final output by pushing one more step.
        let mut spec = self.clone();
        spec.layers.push(LayerSpec::Flatten);
        let all = spec.layer_input_shapes()?;
        let _ = shapes;
        Ok(all.last().expect("at least the input shape").clone())
    }
}

/// Parameters of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerParams {
    /// `w` is `[d_in, d_out]`, `b` is `[d_out]`.
    Dense { w: Tensor, b: Tensor },
    /// `w` is `[out_ch, in_ch, kh, kw]`, `b` is `[out_ch]`.
    Conv2d { w: Tensor, b: Tensor },
    /// Scale/shift plus running statistics (eval mode).
    Batchnorm { gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor },
    /// Maxpool / flatten / dropout carry no parameters.
    Stateless,
}

/// One NIN attachment: the layer it feeds and its trainable weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NinAttachment {
    pub layer: usize,
    /// Dense attachment: `[d_out]` (pre-activation shift). Conv attachment:
    /// the input representation shape `[c, h, w]` (pixel-wise shift).
    pub w_ni: Tensor,
}

/// All trainable state of a network. Gradients reuse the same structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub layers: Vec<LayerParams>,
    pub nins: Vec<NinAttachment>,
}

pub type Grads = Params;

impl Params {
    pub fn all_finite(&self) -> bool {
        let layer_ok = self.layers.iter().all(|l| match l {
            LayerParams::Dense { w, b } | LayerParams::Conv2d { w, b } => {
                w.all_finite() && b.all_finite()
            }
            LayerParams::Batchnorm { gamma, beta, running_mean, running_var } => {
                gamma.all_finite()
                    && beta.all_finite()
                    && running_mean.all_finite()
                    && running_var.all_finite()
            }
            LayerParams::Stateless => true,
        });
        layer_ok && self.nins.iter().all(|n| n.w_ni.all_finite())
    }

    /// Zero-filled gradients with the same shape family.
    pub fn zeros_like(&self) -> Params {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::Dense { w, b } => LayerParams::Dense {
                    w: Tensor::zeros(w.shape()),
                    b: Tensor::zeros(b.shape()),
                },
                LayerParams::Conv2d { w, b } => LayerParams::Conv2d {
                    w: Tensor::zeros(w.shape()),
                    b: Tensor::zeros(b.shape()),
                },
                LayerParams::Batchnorm { gamma, beta, running_mean, running_var } => {
                    LayerParams::Batchnorm {
                        gamma: Tensor::zeros(gamma.shape()),
                        beta: Tensor::zeros(beta.shape()),
                        running_mean: Tensor::zeros(running_mean.shape()),
                        running_var: Tensor::zeros(running_var.shape()),
                    }
                }
                LayerParams::Stateless => LayerParams::Stateless,
            })
            .collect();
        let nins = self
            .nins
            .iter()
            .map(|n| NinAttachment { layer: n.layer, w_ni: Tensor::zeros(n.w_ni.shape()) })
            .collect();
        Params { layers, nins }
    }

    /// Visit every parameter tensor with a stable name, mutably.
    pub fn for_each_named_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                LayerParams::Dense { w, b } | LayerParams::Conv2d { w, b } => {
                    f(&format!("layer{i}.w"), w);
                    f(&format!("layer{i}.b"), b);
                }
                LayerParams::Batchnorm { gamma, beta, .. } => {
                    f(&format!("layer{i}.gamma"), gamma);
                    f(&format!("layer{i}.beta"), beta);
                }
                LayerParams::Stateless => {}
            }
        }
        for (j, n) in self.nins.iter_mut().enumerate() {
            f(&format!("nin{j}.w_ni"), &mut n.w_ni);
        }
    }

    /// Visit every parameter tensor with a stable name.
    pub fn for_each_named(&self, mut f: impl FnMut(&str, &Tensor)) {
        let mut clone = self.clone();
        clone.for_each_named_mut(|name, t| f(name, t));
    }
}

/// Train vs eval semantics for forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum LayerAux {
    None,
    /// Dropout keep-mask already scaled by 1/(1-p).
    Dropout(Tensor),
    /// Batchnorm: (mean, var, xhat) used in the pass.
    Batchnorm { mean: Vec<f64>, var: Vec<f64>, xhat: Tensor },
    /// Maxpool: flat input index of each output element.
    MaxIdx(Vec<usize>),
}

struct LayerCache {
    /// Pre-activation (dense/conv only), with any NIN shift applied.
    z: Option<Tensor>,
    /// Layer output.
    out: Tensor,
    aux: LayerAux,
}

/// Everything the backward pass needs, recorded by a forward pass.
pub struct ForwardCache {
    mode: Mode,
    input: Tensor,
    /// Conv-attached NINs shift the layer input; the shifted input is needed
    /// for exact kernel gradients.
    shifted_inputs: Vec<Option<Tensor>>,
    layers: Vec<LayerCache>,
    /// Realized ε per attachment, one value per sample.
    pub eps: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input.shape()[0]
    }
}

fn batch_of(t: &Tensor) -> usize {
    t.shape()[0]
}

fn per_sample(t: &Tensor) -> usize {
    t.len() / t.shape()[0].max(1)
}

/// Pixel-wise conv-NIN shift: `x_rep + eps · w_ni`, shapes must agree.
pub fn cnin_apply(x_rep: &Tensor, w_ni: &Tensor, eps: f64) -> Result<Tensor> {
    if x_rep.shape() != w_ni.shape() {
        return Err(Error::ShapeMismatch(format!(
            "cnin_apply: representation {:?} vs w_ni {:?}",
            x_rep.shape(),
            w_ni.shape()
        )));
    }
    let mut out = x_rep.clone();
    out.axpy(eps, w_ni)?;
    Ok(out)
}

/// Forward pass. In train mode, noise is drawn from `rng` (one ε per sample
/// per attachment); in eval mode ε is forced to 0 and dropout is a no-op.
pub fn forward(
    spec: &NetworkSpec,
    params: &Params,
    batch: &Tensor,
    rng: &mut RngStream,
    mode: Mode,
) -> Result<(Tensor, ForwardCache)> {
    let n = batch_of(batch);
    let eps = match (&spec.nin, mode) {
        (Some(nin), Mode::Train) => {
            let sites = spec.nin_sites();
            if nin.shared_eps && sites.len() > 1 {
                let shared = sample_noise(&nin.dist, n, rng)?;
                vec![shared; sites.len()]
            } else {
                sites
                    .iter()
                    .map(|_| sample_noise(&nin.dist, n, rng))
                    .collect::<Result<Vec<_>>>()?
            }
        }
        _ => spec.nin_sites().iter().map(|_| vec![0.0; n]).collect(),
    };
    forward_with_noise(spec, params, batch, &eps, rng, mode)
}

/// Forward pass with explicit noise draws (one vector per attachment, one
/// value per sample). Used by the training loop and the diagnostics probes.
pub fn forward_with_noise(
    spec: &NetworkSpec,
    params: &Params,
    batch: &Tensor,
    eps: &[Vec<f64>],
    rng: &mut RngStream,
    mode: Mode,
) -> Result<(Tensor, ForwardCache)> {
    if params.layers.len() != spec.layers.len() {
        return Err(Error::ShapeMismatch("params do not match spec layer count".into()));
    }
    if !params.all_finite() {
        return Err(Error::Invalid("non-finite parameter detected (divergence)".into()));
    }
    let sites = spec.nin_sites();
    if eps.len() != sites.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} noise vectors supplied for {} attachments",
            eps.len(),
            sites.len()
        )));
    }
    let n = batch_of(batch);
    for (v, site) in eps.iter().zip(&sites) {
        if v.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "attachment at layer {site}: {} draws for batch of {n}",
                v.len()
            )));
        }
    }

    let mut cur = batch.clone();
    let mut caches: Vec<LayerCache> = Vec::with_capacity(spec.layers.len());
    let mut shifted_inputs: Vec<Option<Tensor>> = vec![None; sites.len()];

    for (i, layer) in spec.layers.iter().enumerate() {
        let attachment = sites.iter().position(|s| *s == i);
        let cache = match (layer, &params.layers[i]) {
            (LayerSpec::Dense { d_in, d_out, activation }, LayerParams::Dense { w, b }) => {
                if per_sample(&cur) != *d_in || cur.rank() != 2 {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i}: dense({d_in}) got input shape {:?}",
                        cur.shape()
                    )));
                }
                let mut z = vec![0.0; n * d_out];
                gemm(n, *d_in, *d_out, cur.data(), w.data(), &mut z);
                for r in 0..n {
                    for c in 0..*d_out {
                        z[r * d_out + c] += b.data()[c];
                    }
                }
                if let Some(a) = attachment {
                    let w_ni = &params.nins[a].w_ni;
                    if w_ni.len() != *d_out {
                        return Err(Error::ShapeMismatch(format!(
                            "attachment {a}: w_ni has {} entries, layer width {d_out}",
                            w_ni.len()
                        )));
                    }
                    for r in 0..n {
                        let e = eps[a][r];
                        for c in 0..*d_out {
                            z[r * d_out + c] += e * w_ni.data()[c];
                        }
                    }
                }
                let zt = Tensor::from_vec(&[n, *d_out], z)?;
                let out = {
                    let mut o = zt.clone();
                    for v in o.data_mut() {
                        *v = activation.apply(*v);
                    }
                    o
                };
                cur = out.clone();
                LayerCache { z: Some(zt), out, aux: LayerAux::None }
            }
            (
                LayerSpec::Conv2d { in_ch, out_ch, kernel_h, kernel_w, activation },
                LayerParams::Conv2d { w, b },
            ) => {
                if cur.rank() != 4 || cur.shape()[1] != *in_ch {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i}: conv2d({in_ch}→{out_ch}) got input shape {:?}",
                        cur.shape()
                    )));
                }
                let x = if let Some(a) = attachment {
                    let w_ni = &params.nins[a].w_ni;
                    let rep = per_sample(&cur);
                    if w_ni.len() != rep {
                        return Err(Error::ShapeMismatch(format!(
                            "attachment {a}: w_ni has {} entries, representation has {rep}",
                            w_ni.len()
                        )));
                    }
                    let mut shifted = cur.clone();
                    for r in 0..n {
                        let e = eps[a][r];
                        let row = &mut shifted.data_mut()[r * rep..(r + 1) * rep];
                        for (v, m) in row.iter_mut().zip(w_ni.data()) {
                            *v += e * m;
                        }
                    }
                    shifted_inputs[a] = Some(shifted.clone());
                    shifted
                } else {
                    cur.clone()
                };
                let (h_in, w_in) = (cur.shape()[2], cur.shape()[3]);
                let (h_out, w_out) = (h_in - kernel_h + 1, w_in - kernel_w + 1);
                let mut z = vec![0.0; n * out_ch * h_out * w_out];
                conv2d_forward(
                    x.data(), n, *in_ch, h_in, w_in, w.data(), b.data(), *out_ch, *kernel_h,
                    *kernel_w, &mut z,
                );
                let zt = Tensor::from_vec(&[n, *out_ch, h_out, w_out], z)?;
                let mut out = zt.clone();
                for v in out.data_mut() {
                    *v = activation.apply(*v);
                }
                cur = out.clone();
                LayerCache { z: Some(zt), out, aux: LayerAux::None }
            }
            (LayerSpec::Maxpool { h, w }, LayerParams::Stateless) => {
                let (c, h_in, w_in) = (cur.shape()[1], cur.shape()[2], cur.shape()[3]);
                let (h_out, w_out) = (h_in / h, w_in / w);
                let mut out = vec![0.0; n * c * h_out * w_out];
                let mut idx = vec![0usize; out.len()];
                for s in 0..n {
                    for ch in 0..c {
                        for oy in 0..h_out {
                            for ox in 0..w_out {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_i = 0;
                                for dy in 0..*h {
                                    for dx in 0..*w {
                                        let y = oy * h + dy;
                                        let x = ox * w + dx;
                                        let flat = ((s * c + ch) * h_in + y) * w_in + x;
                                        let v = cur.data()[flat];
                                        if v > best {
                                            best = v;
                                            best_i = flat;
                                        }
                                    }
                                }
                                let o = ((s * c + ch) * h_out + oy) * w_out + ox;
                                out[o] = best;
                                idx[o] = best_i;
                            }
                        }
                    }
                }
                let out = Tensor::from_vec(&[n, c, h_out, w_out], out)?;
                cur = out.clone();
                LayerCache { z: None, out, aux: LayerAux::MaxIdx(idx) }
            }
            (
                LayerSpec::Batchnorm { channels },
                LayerParams::Batchnorm { gamma, beta, running_mean, running_var },
            ) => {
                let (out, aux) = batchnorm_forward(
                    &cur, *channels, gamma, beta, running_mean, running_var, mode,
                )?;
                cur = out.clone();
                LayerCache { z: None, out, aux }
            }
            (LayerSpec::Flatten, LayerParams::Stateless) => {
                let flat = per_sample(&cur);
                let out = cur.reshape(&[n, flat])?;
                cur = out.clone();
                LayerCache { z: None, out, aux: LayerAux::None }
            }
            (LayerSpec::Dropout { p_drop }, LayerParams::Stateless) => {
                if mode == Mode::Eval || *p_drop == 0.0 {
                    let out = cur.clone();
                    LayerCache { z: None, out, aux: LayerAux::None }
                } else {
                    let keep = 1.0 - p_drop;
                    let mut mask = Tensor::zeros(cur.shape());
                    for m in mask.data_mut() {
                        *m = if rng.next_uniform() < keep { 1.0 / keep } else { 0.0 };
                    }
                    let mut out = cur.clone();
                    for (v, m) in out.data_mut().iter_mut().zip(mask.data()) {
                        *v *= m;
                    }
                    cur = out.clone();
                    LayerCache { z: None, out, aux: LayerAux::Dropout(mask) }
                }
            }
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: params do not match layer kind"
                )))
            }
        };
        caches.push(cache);
    }

    let outputs = cur;
    Ok((
        outputs,
        ForwardCache {
            mode,
            input: batch.clone(),
            shifted_inputs,
            layers: caches,
            eps: eps.to_vec(),
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    n: usize,
    in_ch: usize,
    h_in: usize,
    w_in: usize,
    kernels: &[f64],
    bias: &[f64],
    out_ch: usize,
    kh: usize,
    kw: usize,
    z: &mut [f64],
) {
    let (h_out, w_out) = (h_in - kh + 1, w_in - kw + 1);
    for s in 0..n {
        for oc in 0..out_ch {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = bias[oc];
                    for ic in 0..in_ch {
                        for dy in 0..kh {
                            let xrow = ((s * in_ch + ic) * h_in + oy + dy) * w_in + ox;
                            let krow = ((oc * in_ch + ic) * kh + dy) * kw;
                            for dx in 0..kw {
                                acc += kernels[krow + dx] * x[xrow + dx];
                            }
                        }
                    }
                    z[((s * out_ch + oc) * h_out + oy) * w_out + ox] = acc;
                }
            }
        }
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

fn batchnorm_forward(
    x: &Tensor,
    channels: usize,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: Mode,
) -> Result<(Tensor, LayerAux)> {
    let n = batch_of(x);
    let rep = per_sample(x);
    if rep % channels != 0 {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm: representation of {rep} not divisible into {channels} channels"
        )));
    }
    let spatial = rep / channels;
    let count = (n * spatial) as f64;

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for s in 0..n {
                for c in 0..channels {
                    let base = (s * channels + c) * spatial;
                    for k in 0..spatial {
                        mean[c] += x.data()[base + k];
                    }
                }
            }
            for m in &mut mean {
                *m /= count;
            }
            for s in 0..n {
                for c in 0..channels {
                    let base = (s * channels + c) * spatial;
                    for k in 0..spatial {
                        let d = x.data()[base + k] - mean[c];
                        var[c] += d * d;
                    }
                }
            }
            for v in &mut var {
                *v /= count;
            }
            (mean, var)
        }
        Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
    };

    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for s in 0..n {
        for c in 0..channels {
            let inv = 1.0 / (var[c] + BN_EPS).sqrt();
            let base = (s * channels + c) * spatial;
            for k in 0..spatial {
                let h = (x.data()[base + k] - mean[c]) * inv;
                xhat.data_mut()[base + k] = h;
                out.data_mut()[base + k] = gamma.data()[c] * h + beta.data()[c];
            }
        }
    }
    Ok((out, LayerAux::Batchnorm { mean, var, xhat }))
}

/// Update batchnorm running statistics from the batch statistics recorded in
/// `cache` (train-mode forward). Called by the training loop after each step.
pub fn update_batchnorm_running(spec: &NetworkSpec, params: &mut Params, cache: &ForwardCache) {
    for (i, layer) in spec.layers.iter().enumerate() {
        if let (LayerSpec::Batchnorm { .. }, LayerAux::Batchnorm { mean, var, .. }) =
            (layer, &cache.layers[i].aux)
        {
            if let LayerParams::Batchnorm { running_mean, running_var, .. } =
                &mut params.layers[i]
            {
                for (r, m) in running_mean.data_mut().iter_mut().zip(mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                }
                for (r, v) in running_var.data_mut().iter_mut().zip(var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
                }
            }
        }
    }
}

/// Batch-mean loss.
pub fn loss_eval(outputs: &Tensor, labels: &Tensor, kind: LossKind) -> Result<f64> {
    if !outputs.all_finite() {
        return Err(Error::Invalid("non-finite network output".into()));
    }
    let n = batch_of(outputs);
    match kind {
        LossKind::Mse => {
            if outputs.shape() != labels.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "mse: outputs {:?} vs labels {:?}",
                    outputs.shape(),
                    labels.shape()
                )));
            }
            let sum: f64 = outputs
                .data()
                .iter()
                .zip(labels.data())
                .map(|(o, y)| {
                    let r = o - y;
                    0.5 * r * r
                })
                .sum();
            Ok(sum / n as f64)
        }
        LossKind::CrossEntropy => {
            let k = per_sample(outputs);
            let mut total = 0.0;
            for s in 0..n {
                let row = outputs.row(s);
                let target = label_index(labels, s, k)?;
                total -= log_softmax_at(row, target);
            }
            Ok(total / n as f64)
        }
    }
}

/// Batch-mean classification accuracy (argmax over logits).
pub fn accuracy(outputs: &Tensor, labels: &Tensor) -> Result<f64> {
    let n = batch_of(outputs);
    let k = per_sample(outputs);
    let mut hits = 0usize;
    for s in 0..n {
        let row = outputs.row(s);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if pred == label_index(labels, s, k)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

fn label_index(labels: &Tensor, sample: usize, n_classes: usize) -> Result<usize> {
    match labels.rank() {
        1 => {
            let v = labels.data()[sample];
            let idx = v as usize;
            if v < 0.0 || idx >= n_classes {
                return Err(Error::Invalid(format!("label {v} outside [0, {n_classes})")));
            }
            Ok(idx)
        }
        2 => {
            let row = labels.row(sample);
            Ok(row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0))
        }
        r => Err(Error::ShapeMismatch(format!("labels must be rank 1 or 2, got rank {r}"))),
    }
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    row[target] - mx - lse
}

/// Gradient of the batch-mean loss w.r.t. the outputs. With
/// `per_sample = true` the 1/n batch averaging is skipped, giving the
/// gradient of each per-sample loss (used by local gradients and attacks).
fn loss_backward(
    outputs: &Tensor,
    labels: &Tensor,
    kind: LossKind,
    per_sample_scale: bool,
) -> Result<Tensor> {
    let n = batch_of(outputs);
    let scale = if per_sample_scale { 1.0 } else { 1.0 / n as f64 };
    match kind {
        LossKind::Mse => {
            if outputs.shape() != labels.shape() {
                return Err(Error::ShapeMismatch("mse backward: label shape".into()));
            }
            let mut d = outputs.clone();
            for (v, y) in d.data_mut().iter_mut().zip(labels.data()) {
                *v = (*v - y) * scale;
            }
            Ok(d)
        }
        LossKind::CrossEntropy => {
            let k = per_sample(outputs);
            let mut d = Tensor::zeros(outputs.shape());
            for s in 0..n {
                let row = outputs.row(s);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                let target = label_index(labels, s, k)?;
                let out = &mut d.data_mut()[s * k..(s + 1) * k];
                for (c, e) in exps.iter().enumerate() {
                    out[c] = (e / z - if c == target { 1.0 } else { 0.0 }) * scale;
                }
            }
            Ok(d)
        }
    }
}

/// Result of a backward pass: parameter gradients plus the gradient of the
/// loss w.r.t. the batch input (used by FGSM/PGD).
pub struct BackwardResult {
    pub grads: Grads,
    pub d_input: Tensor,
}

/// Exact reverse-mode gradients of the batch-mean loss for every parameter,
/// including `dL/dW_NI` for each attachment.
pub fn backward(
    spec: &NetworkSpec,
    params: &Params,
    cache: &ForwardCache,
    labels: &Tensor,
) -> Result<BackwardResult> {
    let outputs = &cache.layers.last().ok_or_else(|| Error::Invalid("empty network".into()))?.out;
    let delta = loss_backward(outputs, labels, spec.loss, false)?;
    let (grads, d_input, _) = backprop(spec, params, cache, delta, None)?;
    Ok(BackwardResult { grads, d_input })
}

/// Per-sample gradient of the per-sample loss w.r.t. the injected
/// pre-activation (dense) or injected representation (conv) at `attachment`,
/// evaluated with ε = 0. Returns a `[batch, d]` tensor.
pub fn local_gradient(
    spec: &NetworkSpec,
    params: &Params,
    batch: &Tensor,
    labels: &Tensor,
    attachment: usize,
) -> Result<Tensor> {
    let sites = spec.nin_sites();
    if attachment >= sites.len() {
        return Err(Error::Invalid(format!(
            "attachment {attachment} not present ({} attachments)",
            sites.len()
        )));
    }
    // ε = 0 forward in train-mode bookkeeping (dropout would perturb the
    // local gradient definition, so it is bypassed via eval-style masks).
    let eps: Vec<Vec<f64>> = sites.iter().map(|_| vec![0.0; batch_of(batch)]).collect();
    let mut scratch = RngStream::new(0);
    let spec_no_dropout = {
        let mut s = spec.clone();
        for l in &mut s.layers {
            if let LayerSpec::Dropout { p_drop } = l {
                *p_drop = 0.0;
            }
        }
        s
    };
    let (outputs, cache) =
        forward_with_noise(&spec_no_dropout, params, batch, &eps, &mut scratch, Mode::Train)?;
    let delta = loss_backward(&outputs, labels, spec.loss, true)?;
    let (_, _, captured) = backprop(&spec_no_dropout, params, &cache, delta, Some(attachment))?;
    captured.ok_or_else(|| Error::Invalid("attachment delta was not captured".into()))
}

/// Core reverse sweep. `capture` names an attachment whose incoming delta
/// (at the injection point) should be returned flattened to `[n, d]`.
fn backprop(
    spec: &NetworkSpec,
    params: &Params,
    cache: &ForwardCache,
    mut delta: Tensor,
    capture: Option<usize>,
) -> Result<(Grads, Tensor, Option<Tensor>)> {
    let mut grads = params.zeros_like();
    let sites = spec.nin_sites();
    let n = cache.batch_size();
    let mut captured: Option<Tensor> = None;

    for i in (0..spec.layers.len()).rev() {
        let attachment = sites.iter().position(|s| *s == i);
        let layer_in: &Tensor = if i == 0 {
            &cache.input
        } else {
            &cache.layers[i - 1].out
        };
        delta = match (&spec.layers[i], &params.layers[i]) {
            (LayerSpec::Dense { d_in, d_out, activation }, LayerParams::Dense { w, .. }) => {
                let z = cache.layers[i].z.as_ref().expect("dense cache has z");
                // Through the activation: dL/dz.
                let mut dz = delta;
                for (d, zv) in dz.data_mut().iter_mut().zip(z.data()) {
                    *d *= activation.derivative(*zv);
                }
                if let Some(a) = attachment {
                    if capture == Some(a) {
                        captured = Some(dz.clone());
                    }
                    // dL/dW_NI = Σ_samples ε_s · dL/dz_s
                    let g = &mut grads.nins[a].w_ni;
                    for s in 0..n {
                        let e = cache.eps[a][s];
                        if e != 0.0 {
                            let row = &dz.data()[s * d_out..(s + 1) * d_out];
                            for (gv, dv) in g.data_mut().iter_mut().zip(row) {
                                *gv += e * dv;
                            }
                        }
                    }
                }
                if let LayerParams::Dense { w: gw, b: gb } = &mut grads.layers[i] {
                    gemm_at_b(*d_in, n, *d_out, layer_in.data(), dz.data(), gw.data_mut());
                    for s in 0..n {
                        let row = &dz.data()[s * d_out..(s + 1) * d_out];
                        for (g, d) in gb.data_mut().iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
                let mut dx = vec![0.0; n * d_in];
                gemm_a_bt(n, *d_out, *d_in, dz.data(), w.data(), &mut dx);
                Tensor::from_vec(&[n, *d_in], dx)?
            }
            (
                LayerSpec::Conv2d { in_ch, out_ch, kernel_h, kernel_w, activation },
                LayerParams::Conv2d { w, .. },
            ) => {
                let z = cache.layers[i].z.as_ref().expect("conv cache has z");
                let mut dz = delta;
                for (d, zv) in dz.data_mut().iter_mut().zip(z.data()) {
                    *d *= activation.derivative(*zv);
                }
                let x_used: &Tensor = attachment
                    .and_then(|a| cache.shifted_inputs[a].as_ref())
                    .unwrap_or(layer_in);
                let (h_in, w_in) = (x_used.shape()[2], x_used.shape()[3]);
                let (h_out, w_out) = (h_in - kernel_h + 1, w_in - kernel_w + 1);
                if let LayerParams::Conv2d { w: gw, b: gb } = &mut grads.layers[i] {
                    conv2d_backward_params(
                        x_used.data(), dz.data(), n, *in_ch, h_in, w_in, *out_ch, *kernel_h,
                        *kernel_w, gw.data_mut(), gb.data_mut(),
                    );
                }
                let mut dx = vec![0.0; n * in_ch * h_in * w_in];
                conv2d_backward_input(
                    w.data(), dz.data(), n, *in_ch, h_in, w_in, *out_ch, *kernel_h, *kernel_w,
                    &mut dx,
                );
                let dx = Tensor::from_vec(&[n, *in_ch, h_in, w_in], dx)?;
                if let Some(a) = attachment {
                    let rep = per_sample(&dx);
                    if capture == Some(a) {
                        captured = Some(dx.reshape(&[n, rep])?);
                    }
                    let g = &mut grads.nins[a].w_ni;
                    for s in 0..n {
                        let e = cache.eps[a][s];
                        if e != 0.0 {
                            let row = &dx.data()[s * rep..(s + 1) * rep];
                            for (gv, dv) in g.data_mut().iter_mut().zip(row) {
                                *gv += e * dv;
                            }
                        }
                    }
                }
                // The pixel-wise shift is additive, so dL/dx passes through.
                _ = (h_out, w_out);
                dx
            }
            (LayerSpec::Maxpool { .. }, LayerParams::Stateless) => {
                let LayerAux::MaxIdx(idx) = &cache.layers[i].aux else {
                    return Err(Error::Invalid("maxpool cache missing indices".into()));
                };
                let mut dx = Tensor::zeros(layer_in.shape());
                for (o, flat) in idx.iter().enumerate() {
                    dx.data_mut()[*flat] += delta.data()[o];
                }
                dx
            }
            (LayerSpec::Batchnorm { channels }, LayerParams::Batchnorm { gamma, .. }) => {
                let LayerAux::Batchnorm { var, xhat, .. } = &cache.layers[i].aux else {
                    return Err(Error::Invalid("batchnorm cache missing stats".into()));
                };
                let rep = per_sample(layer_in);
                let spatial = rep / channels;
                let count = (n * spatial) as f64;
                if cache.mode == Mode::Eval {
                    // Eval-mode statistics are constants: the map is affine.
                    let mut dgamma = vec![0.0; *channels];
                    let mut dbeta = vec![0.0; *channels];
                    let mut dx = Tensor::zeros(layer_in.shape());
                    for s in 0..n {
                        for c in 0..*channels {
                            let inv = 1.0 / (var[c] + BN_EPS).sqrt();
                            let base = (s * channels + c) * spatial;
                            for k in 0..spatial {
                                let d = delta.data()[base + k];
                                let h = xhat.data()[base + k];
                                dbeta[c] += d;
                                dgamma[c] += d * h;
                                dx.data_mut()[base + k] = d * gamma.data()[c] * inv;
                            }
                        }
                    }
                    if let LayerParams::Batchnorm { gamma: gg, beta: gb, .. } =
                        &mut grads.layers[i]
                    {
                        gg.data_mut().copy_from_slice(&dgamma);
                        gb.data_mut().copy_from_slice(&dbeta);
                    }
                    delta = dx;
                    continue;
                }
                let mut dgamma = vec![0.0; *channels];
                let mut dbeta = vec![0.0; *channels];
                let mut sum_dxhat = vec![0.0; *channels];
                let mut sum_dxhat_xhat = vec![0.0; *channels];
                for s in 0..n {
                    for c in 0..*channels {
                        let base = (s * channels + c) * spatial;
                        for k in 0..spatial {
                            let d = delta.data()[base + k];
                            let h = xhat.data()[base + k];
                            dbeta[c] += d;
                            dgamma[c] += d * h;
                            let dh = d * gamma.data()[c];
                            sum_dxhat[c] += dh;
                            sum_dxhat_xhat[c] += dh * h;
                        }
                    }
                }
                let mut dx = Tensor::zeros(layer_in.shape());
                for s in 0..n {
                    for c in 0..*channels {
                        let inv = 1.0 / (var[c] + BN_EPS).sqrt();
                        let base = (s * channels + c) * spatial;
                        for k in 0..spatial {
                            let d = delta.data()[base + k] * gamma.data()[c];
                            let h = xhat.data()[base + k];
                            dx.data_mut()[base + k] = inv / count
                                * (count * d - sum_dxhat[c] - h * sum_dxhat_xhat[c]);
                        }
                    }
                }
                if let LayerParams::Batchnorm { gamma: gg, beta: gb, .. } = &mut grads.layers[i]
                {
                    gg.data_mut().copy_from_slice(&dgamma);
                    gb.data_mut().copy_from_slice(&dbeta);
                }
                dx
            }
            (LayerSpec::Flatten, LayerParams::Stateless) => delta.reshape(layer_in.shape())?,
            (LayerSpec::Dropout { .. }, LayerParams::Stateless) => {
                match &cache.layers[i].aux {
                    LayerAux::Dropout(mask) => {
                        let mut dx = delta;
                        for (d, m) in dx.data_mut().iter_mut().zip(mask.data()) {
                            *d *= m;
                        }
                        dx
                    }
                    _ => delta,
                }
            }
            _ => return Err(Error::Invalid(format!("layer {i}: cache/params mismatch"))),
        };
    }

    Ok((grads, delta, captured))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_params(
    x: &[f64],
    dz: &[f64],
    n: usize,
    in_ch: usize,
    h_in: usize,
    w_in: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let (h_out, w_out) = (h_in - kh + 1, w_in - kw + 1);
    for s in 0..n {
        for oc in 0..out_ch {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let d = dz[((s * out_ch + oc) * h_out + oy) * w_out + ox];
                    if d == 0.0 {
                        continue;
                    }
                    gb[oc] += d;
                    for ic in 0..in_ch {
                        for dy in 0..kh {
                            let xrow = ((s * in_ch + ic) * h_in + oy + dy) * w_in + ox;
                            let krow = ((oc * in_ch + ic) * kh + dy) * kw;
                            for dx in 0..kw {
                                gw[krow + dx] += d * x[xrow + dx];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    kernels: &[f64],
    dz: &[f64],
    n: usize,
    in_ch: usize,
    h_in: usize,
    w_in: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    dx: &mut [f64],
) {
    let (h_out, w_out) = (h_in - kh + 1, w_in - kw + 1);
    for s in 0..n {
        for oc in 0..out_ch {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let d = dz[((s * out_ch + oc) * h_out + oy) * w_out + ox];
                    if d == 0.0 {
                        continue;
                    }
                    for ic in 0..in_ch {
                        for dy in 0..kh {
                            let xrow = ((s * in_ch + ic) * h_in + oy + dy) * w_in + ox;
                            let krow = ((oc * in_ch + ic) * kh + dy) * kw;
                            for dxk in 0..kw {
                                dx[xrow + dxk] += d * kernels[krow + dxk];
                            }
                        }
                    }
                }
            }
        }
    }
}
