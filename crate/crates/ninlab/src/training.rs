//! Optimizers, baseline regularizers, initialization, and the epoch loop.
//!
//! [`train`] runs shuffled mini-batch updates and records one
//! [`TrainTraceRow`] per completed epoch (plus an epoch-0 baseline row taken
//! before any update). Two flavours of metrics are kept: *running* train
//! loss/accuracy aggregated over the actual training mini-batches (noise,
//! dropout and input corruption active — the loss the optimizer saw), and
//! *clean* metrics from eval-mode passes (ε = 0) over the train and test
//! sets. The phase classifier consumes both.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::network::{
    accuracy, backward, forward_with_noise, loss_eval, update_batchnorm_running, LayerParams,
    LayerSpec, Mode, NetworkSpec, NinResample, Params,
};
use crate::noise::sample_noise;
use crate::rng::RngStream;
use crate::robustness::corrupt_inputs;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Which optimizer drives the updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
    Adam,
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Learning rate η.
    pub eta: f64,
    /// RMSprop decay ρ.
    pub rho: f64,
    /// Adam moment decays.
    pub beta1: f64,
    pub beta2: f64,
    /// Numerical stabilizer added inside the adaptive denominators.
    pub eps_stab: f64,
}

impl OptimizerConfig {
    pub fn sgd(eta: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            eta,
            rho: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps_stab: 1e-7,
        }
    }

    pub fn rmsprop(eta: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Rmsprop, ..OptimizerConfig::sgd(eta) }
    }

    pub fn adam(eta: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, ..OptimizerConfig::sgd(eta) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        for (name, v) in [("rho", self.rho), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Baseline regularizers that can run alongside (or instead of) NINR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RegularizerConfig {
    /// L2 weight decay λ applied as an additive λ·W gradient term on weight
    /// matrices/kernels (not biases, not `W_NI`). 0 disables.
    pub l2_lambda: f64,
    /// Dropout rate. Dropout is realized as `LayerSpec::Dropout` layers in
    /// the network; this knob is consumed by preset construction, which
    /// inserts one dropout layer after each hidden activation. 0 disables.
    pub dropout_p: f64,
    /// Corrupted-data training: training inputs pass through the corruption
    /// map with this scale, fresh noise each epoch. 0 disables.
    pub cdt_sigma: f64,
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l2_lambda < 0.0 {
            return Err(Error::Config("l2_lambda must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must lie in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.cdt_sigma) {
            return Err(Error::Config("cdt_sigma must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Full training-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub reg: RegularizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once the clean train accuracy reaches this fraction.
    pub stop_train_acc: f64,
    pub seed: u64,
    /// Parameter tensors (by stable name, e.g. `layer0.w`, `nin0.w_ni`) held
    /// fixed during training.
    #[serde(default)]
    pub freeze_mask: Vec<String>,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerConfig, batch_size: usize, max_epochs: usize, seed: u64) -> Self {
        TrainConfig {
            optimizer,
            reg: RegularizerConfig::default(),
            batch_size,
            max_epochs,
            stop_train_acc: 1.0,
            seed,
            freeze_mask: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.reg.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0 < self.stop_train_acc && self.stop_train_acc <= 1.0) {
            return Err(Error::Config("stop_train_acc must lie in (0,1]".into()));
        }
        Ok(())
    }
}

/// One epoch's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTraceRow {
    /// 0 is the pre-training baseline; epoch e >= 1 is recorded after e epochs.
    pub epoch: usize,
    /// Running loss/accuracy over the training mini-batches as optimized
    /// (noise and corruption active). Equal to the clean values at epoch 0.
    pub train_loss: f64,
    pub train_acc: f64,
    /// Eval-mode (ε = 0) metrics on the training set.
    pub clean_train_loss: f64,
    pub clean_train_acc: f64,
    /// Eval-mode metrics on the test set.
    pub test_loss: f64,
    pub test_acc: f64,
    /// L2 norm of each `W_NI` attachment.
    pub wni_norms: Vec<f64>,
    /// L2 norm of each parameterized layer's weight tensor.
    pub weight_norms: Vec<f64>,
    pub wall_clock_s: f64,
}

/// Per-epoch records plus the divergence flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainTrace {
    pub rows: Vec<TrainTraceRow>,
    /// Set when a parameter went non-finite or the train loss exceeded the
    /// divergence threshold. Divergence is data, not an error.
    pub diverged: bool,
}

/// Train loss / parameter cap beyond which a run is declared divergent.
pub const DIVERGENCE_CAP: f64 = 1e12;

/// Draw initial parameters: `W ~ N(0, 1/fan_in)` entrywise, `b = 0`,
/// `W_NI ~ N(0, 1/(d_in + 1))` with `d_in` the attachment layer's input size
/// (the noise node counts as one extra input). Batchnorm starts at the
/// identity transform.
pub fn init_params(spec: &NetworkSpec, rng: &mut RngStream) -> Result<Params> {
    let shapes = spec.layer_input_shapes()?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        layers.push(match layer {
            LayerSpec::Dense { d_in, d_out, .. } => {
                let std = (1.0 / *d_in as f64).sqrt();
                let mut w = Tensor::zeros(&[*d_in, *d_out]);
                for v in w.data_mut() {
                    *v = std * rng.next_standard_normal();
                }
                LayerParams::Dense { w, b: Tensor::zeros(&[*d_out]) }
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel_h, kernel_w, .. } => {
                let fan_in = in_ch * kernel_h * kernel_w;
                let std = (1.0 / fan_in as f64).sqrt();
                let mut w = Tensor::zeros(&[*out_ch, *in_ch, *kernel_h, *kernel_w]);
                for v in w.data_mut() {
                    *v = std * rng.next_standard_normal();
                }
                LayerParams::Conv2d { w, b: Tensor::zeros(&[*out_ch]) }
            }
            LayerSpec::Batchnorm { channels } => LayerParams::Batchnorm {
                gamma: Tensor::from_vec(&[*channels], vec![1.0; *channels])?,
                beta: Tensor::zeros(&[*channels]),
                running_mean: Tensor::zeros(&[*channels]),
                running_var: Tensor::from_vec(&[*channels], vec![1.0; *channels])?,
            },
            LayerSpec::Maxpool { .. } | LayerSpec::Flatten | LayerSpec::Dropout { .. } => {
                LayerParams::Stateless
            }
        });
    }
    let mut nins = Vec::new();
    for site in spec.nin_sites() {
        let input_shape = &shapes[site];
        let (w_shape, d_ni): (Vec<usize>, usize) = match &spec.layers[site] {
            LayerSpec::Dense { d_in, d_out, .. } => (vec![*d_out], d_in + 1),
            LayerSpec::Conv2d { .. } => {
                let rep: usize = input_shape.iter().product();
                (input_shape.clone(), rep + 1)
            }
            _ => unreachable!("nin_sites only returns injectable layers"),
        };
        let std = (1.0 / d_ni as f64).sqrt();
        let mut w_ni = Tensor::zeros(&w_shape);
        for v in w_ni.data_mut() {
            *v = std * rng.next_standard_normal();
        }
        nins.push(crate::network::NinAttachment { layer: site, w_ni });
    }
    Ok(Params { layers, nins })
}

/// Per-tensor optimizer state (first/second moment accumulators).
#[derive(Debug, Clone, Default)]
pub struct OptState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

fn apply_update(
    params: &mut Params,
    grads: &Params,
    state: &mut OptState,
    cfg: &OptimizerConfig,
    kind: OptimizerKind,
    freeze: &[String],
) {
    // Gradients traverse in the same stable order as parameters, so a
    // positional pairing is exact.
    let mut gmap: Vec<(String, Tensor)> = Vec::new();
    grads.for_each_named(|name, t| gmap.push((name.to_string(), t.clone())));

    if state.m.is_empty() {
        state.m = gmap.iter().map(|(_, g)| Tensor::zeros(g.shape())).collect();
        state.v = gmap.iter().map(|(_, g)| Tensor::zeros(g.shape())).collect();
    }
    state.step += 1;
    let t = state.step as f64;

    let mut idx = 0usize;
    let (ms, vs) = (&mut state.m, &mut state.v);
    params.for_each_named_mut(|pname, p| {
        let (name, g) = &gmap[idx];
        debug_assert_eq!(pname, name);
        let i = idx;
        idx += 1;
        if freeze.iter().any(|f| f == name) {
            return;
        }
        match kind {
            OptimizerKind::Sgd => {
                for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= cfg.eta * gv;
                }
            }
            OptimizerKind::Rmsprop => {
                let v = &mut vs[i];
                for ((w, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *vv = cfg.rho * *vv + (1.0 - cfg.rho) * gv * gv;
                    *w -= cfg.eta * gv / (vv.sqrt() + cfg.eps_stab);
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - cfg.beta1.powf(t);
                let bc2 = 1.0 - cfg.beta2.powf(t);
                let (m, v) = (&mut ms[i], &mut vs[i]);
                for (((w, gv), mv), vv) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                    *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *w -= cfg.eta * mhat / (vhat.sqrt() + cfg.eps_stab);
                }
            }
        }
    });
}

/// One plain SGD step: `w ← w − η·g` on every unfrozen tensor.
pub fn sgd_step(params: &mut Params, grads: &Params, cfg: &OptimizerConfig, freeze: &[String]) {
    let mut state = OptState::default();
    apply_update(params, grads, &mut state, cfg, OptimizerKind::Sgd, freeze);
}

/// One RMSprop step with persistent accumulator state.
pub fn rmsprop_step(
    params: &mut Params,
    grads: &Params,
    state: &mut OptState,
    cfg: &OptimizerConfig,
    freeze: &[String],
) {
    apply_update(params, grads, state, cfg, OptimizerKind::Rmsprop, freeze);
}

/// One Adam step (bias-corrected) with persistent moment state.
pub fn adam_step(
    params: &mut Params,
    grads: &Params,
    state: &mut OptState,
    cfg: &OptimizerConfig,
    freeze: &[String],
) {
    apply_update(params, grads, state, cfg, OptimizerKind::Adam, freeze);
}

/// Corrupted-data training: pass a training batch through the corruption map.
pub fn cdt_corrupt_batch(batch: &Tensor, sigma_noise: f64, rng: &mut RngStream) -> Result<Tensor> {
    corrupt_inputs(batch, sigma_noise, rng)
}

fn add_l2(grads: &mut Params, params: &Params, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for (g, p) in grads.layers.iter_mut().zip(&params.layers) {
        if let (
            LayerParams::Dense { w: gw, .. } | LayerParams::Conv2d { w: gw, .. },
            LayerParams::Dense { w: pw, .. } | LayerParams::Conv2d { w: pw, .. },
        ) = (g, p)
        {
            let _ = gw.axpy(lambda, pw);
        }
    }
}

/// Eval-mode loss/accuracy on a dataset (ε = 0, running batchnorm stats).
pub fn evaluate(spec: &NetworkSpec, params: &Params, data: &Dataset) -> Result<(f64, f64)> {
    let mut scratch = RngStream::new(0);
    let (out, _) =
        crate::network::forward(spec, params, &data.images, &mut scratch, Mode::Eval)?;
    let loss = loss_eval(&out, &data.labels, spec.loss)?;
    let acc = match spec.loss {
        crate::network::LossKind::CrossEntropy => accuracy(&out, &data.labels)?,
        crate::network::LossKind::Mse => f64::NAN,
    };
    Ok((loss, acc))
}

fn gather_rows(images: &Tensor, labels: &Tensor, order: &[usize], lo: usize, hi: usize) -> (Tensor, Tensor) {
    let rep = images.len() / images.shape()[0];
    let m = hi - lo;
    let mut x = vec![0.0; m * rep];
    let mut shape = images.shape().to_vec();
    shape[0] = m;
    for (r, &src) in order[lo..hi].iter().enumerate() {
        x[r * rep..(r + 1) * rep].copy_from_slice(&images.data()[src * rep..(src + 1) * rep]);
    }
    let xb = Tensor::from_vec(&shape, x).expect("gather shape");
    let yb = if labels.rank() == 1 {
        Tensor::from_slice(&order[lo..hi].iter().map(|&s| labels.data()[s]).collect::<Vec<_>>())
    } else {
        let k = labels.len() / labels.shape()[0];
        let mut y = vec![0.0; m * k];
        for (r, &src) in order[lo..hi].iter().enumerate() {
            y[r * k..(r + 1) * k].copy_from_slice(&labels.data()[src * k..(src + 1) * k]);
        }
        Tensor::from_vec(&[m, k], y).expect("gather label shape")
    };
    (xb, yb)
}

/// Run the full training loop.
///
/// Determinism: parameters come from the `"init"` fork of the run stream;
/// epoch `e` derives `"shuffle/{e}"`, `"noise/{e}"`, `"cdt/{e}"` and
/// `"dropout/{e}"` forks, and the per-sample noise is indexed by shuffled
/// position, so a rerun with the same config and seed is bit-identical.
pub fn train(
    spec: &NetworkSpec,
    data_train: &Dataset,
    data_test: &Dataset,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<(Params, TrainTrace)> {
    cfg.validate()?;
    let mut params = init_params(spec, &mut rng.fork("init"))?;
    let trace = train_from(spec, &mut params, data_train, data_test, cfg, rng)?;
    Ok((params, trace))
}

/// As [`train`] but starting from caller-supplied parameters.
pub fn train_from(
    spec: &NetworkSpec,
    params: &mut Params,
    data_train: &Dataset,
    data_test: &Dataset,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let n = data_train.len();
    let sites = spec.nin_sites();
    let start = Instant::now();
    let mut trace = TrainTrace::default();
    let mut state = OptState::default();

    let record =
        |trace: &mut TrainTrace, epoch: usize, run_loss: f64, run_acc: f64, params: &Params, start: &Instant| -> Result<(f64, f64)> {
            let (ctl, cta) = evaluate(spec, params, data_train)?;
            let (tel, tea) = evaluate(spec, params, data_test)?;
            let (run_loss, run_acc) =
                if epoch == 0 { (ctl, cta) } else { (run_loss, run_acc) };
            trace.rows.push(TrainTraceRow {
                epoch,
                train_loss: run_loss,
                train_acc: run_acc,
                clean_train_loss: ctl,
                clean_train_acc: cta,
                test_loss: tel,
                test_acc: tea,
                wni_norms: params.nins.iter().map(|a| a.w_ni.l2_norm()).collect(),
                weight_norms: params
                    .layers
                    .iter()
                    .filter_map(|l| match l {
                        LayerParams::Dense { w, .. } | LayerParams::Conv2d { w, .. } => {
                            Some(w.l2_norm())
                        }
                        _ => None,
                    })
                    .collect(),
                wall_clock_s: start.elapsed().as_secs_f64(),
            });
            Ok((ctl, cta))
        };

    record(&mut trace, 0, 0.0, 0.0, params, &start)?;

    // Noise drawn once before training, when configured.
    let fixed_eps: Option<Vec<Vec<f64>>> = match &spec.nin {
        Some(nin) if nin.resample == NinResample::OnceBeforeTraining => {
            let noise_rng = rng.fork("noise/fixed");
            let mut all = Vec::new();
            for s in 0..sites.len() {
                let mut r = noise_rng.fork(&format!("site{s}"));
                all.push(sample_noise(&nin.dist, n, &mut r)?);
            }
            Some(all)
        }
        _ => None,
    };

    for epoch in 1..=cfg.max_epochs {
        let order = rng.fork(&format!("shuffle/{epoch}")).permutation(n);
        let epoch_eps: Option<Vec<Vec<f64>>> = match &spec.nin {
            Some(nin) => match &fixed_eps {
                Some(fixed) => Some(fixed.clone()),
                None => {
                    let mut noise_rng = rng.fork(&format!("noise/{epoch}"));
                    let mut all = Vec::new();
                    if nin.shared_eps && sites.len() > 1 {
                        let shared = sample_noise(&nin.dist, n, &mut noise_rng)?;
                        all = vec![shared; sites.len()];
                    } else {
                        for s in 0..sites.len() {
                            let mut r = noise_rng.fork(&format!("site{s}"));
                            all.push(sample_noise(&nin.dist, n, &mut r)?);
                        }
                    }
                    Some(all)
                }
            },
            None => None,
        };
        let mut cdt_rng = rng.fork(&format!("cdt/{epoch}"));
        let mut dropout_rng = rng.fork(&format!("dropout/{epoch}"));

        let mut run_loss_sum = 0.0;
        let mut run_hits = 0.0;
        let mut lo = 0;
        let mut epoch_diverged = false;
        while lo < n {
            let hi = (lo + cfg.batch_size).min(n);
            let (xb, yb) = gather_rows(&data_train.images, &data_train.labels, &order, lo, hi);
            let xb = if cfg.reg.cdt_sigma > 0.0 {
                cdt_corrupt_batch(&xb, cfg.reg.cdt_sigma, &mut cdt_rng)?
            } else {
                xb
            };
            let batch_eps: Vec<Vec<f64>> = match &epoch_eps {
                Some(all) => all.iter().map(|v| v[lo..hi].to_vec()).collect(),
                None => Vec::new(),
            };
            let (out, cache) =
                forward_with_noise(spec, params, &xb, &batch_eps, &mut dropout_rng, Mode::Train)?;
            let batch_loss = match loss_eval(&out, &yb, spec.loss) {
                Ok(l) => l,
                Err(_) => {
                    epoch_diverged = true;
                    break;
                }
            };
            run_loss_sum += batch_loss * (hi - lo) as f64;
            if spec.loss == crate::network::LossKind::CrossEntropy {
                run_hits += accuracy(&out, &yb)? * (hi - lo) as f64;
            }
            let mut bw = backward(spec, params, &cache, &yb)?;
            add_l2(&mut bw.grads, params, cfg.reg.l2_lambda);
            apply_update(
                params,
                &bw.grads,
                &mut state,
                &cfg.optimizer,
                cfg.optimizer.kind,
                &cfg.freeze_mask,
            );
            update_batchnorm_running(spec, params, &cache);
            lo = hi;
        }

        let run_loss = run_loss_sum / n as f64;
        let run_acc = run_hits / n as f64;

        if epoch_diverged || !params.all_finite() || !run_loss.is_finite() || run_loss > DIVERGENCE_CAP
        {
            trace.diverged = true;
            break;
        }
        let (_, clean_acc) = record(&mut trace, epoch, run_loss, run_acc, params, &start)?;
        if clean_acc >= cfg.stop_train_acc {
            break;
        }
    }

    Ok(trace)
}

/// Append a trace to a CSV writer (RFC 4180): one row per epoch, with
/// variable-width norm columns flattened into `wni_norm_i` / `w_norm_i`.
pub fn trace_csv_header(trace: &TrainTrace) -> Vec<String> {
    let mut h = vec![
        "epoch".to_string(),
        "train_loss".to_string(),
        "train_acc".to_string(),
        "clean_train_loss".to_string(),
        "clean_train_acc".to_string(),
        "test_loss".to_string(),
        "test_acc".to_string(),
    ];
    if let Some(first) = trace.rows.first() {
        for i in 0..first.wni_norms.len() {
            h.push(format!("wni_norm_{i}"));
        }
        for i in 0..first.weight_norms.len() {
            h.push(format!("w_norm_{i}"));
        }
    }
    h.push("diverged".to_string());
    h
}

/// Render one row to strings matching [`trace_csv_header`]. Floats use the
/// shortest representation that round-trips, so reruns are byte-identical.
pub fn trace_csv_row(trace: &TrainTrace, row: &TrainTraceRow) -> Vec<String> {
    let mut out = vec![
        row.epoch.to_string(),
        row.train_loss.to_string(),
        row.train_acc.to_string(),
        row.clean_train_loss.to_string(),
        row.clean_train_acc.to_string(),
        row.test_loss.to_string(),
        row.test_acc.to_string(),
    ];
    for v in &row.wni_norms {
        out.push(v.to_string());
    }
    for v in &row.weight_norms {
        out.push(v.to_string());
    }
    let last = trace.rows.last().map(|r| r.epoch) == Some(row.epoch);
    out.push(if trace.diverged && last { "1".into() } else { "0".into() });
    out
}
