//! Built-in experiment presets and the resolved [`ExperimentConfig`].
//!
//! A preset names a complete desk-scale experiment (architecture, data,
//! training hyper-parameters, evaluation protocol). Config-file keys
//! override preset fields, CLI flags override the file, and `--scale`
//! applies last: it multiplies hidden widths and the training-set size,
//! caps epochs at 50 unless `epochs` was set explicitly, and recomputes
//! σ_ε from its `d_ℓ/η` multiple so the training phase is preserved under
//! width changes.

use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::dataio::{standardize_apply, standardize_fit, synth_glyphs, Dataset, GlyphConfig,
    StandardizeScale, StandardizeScope};
use crate::lineartoy::LinearToyState;
use crate::network::{Activation, LayerSpec, LossKind, NetworkSpec, NinConfig, NinResample,
    NinTopology};
use crate::noise::{NoiseDistribution, NoiseKind};
use crate::rng::RngStream;
use crate::training::{OptimizerConfig, OptimizerKind, RegularizerConfig, TrainConfig};
use crate::{Error, Result};

/// Where the experiment's data comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSpec {
    /// Synthetic 28×28 10-class glyph images (MNIST-family drop-in).
    Glyphs28,
    /// Synthetic 20×20 10-class glyph images.
    Glyphs20,
    /// IDX files on disk (MNIST/FMNIST layout).
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
    },
}

/// Network family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Dense ReLU stack `input → hidden… → 10`, softmax cross-entropy.
    Fc { hidden: Vec<usize> },
    /// Small CNN: conv(3×3) → maxpool(2×2) → flatten → dense → 10.
    Cnn { channels: usize, dense: usize },
}

/// Noise-injection settings before materialization into [`NinConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NinSettings {
    pub topology: NinTopology,
    pub kind: NoiseKind,
    /// σ_ε² as a multiple of d_ℓ/η (the phase-ladder convention); `None` means
    /// `sigma_abs` is authoritative.
    pub sigma_mult: Option<f64>,
    /// Absolute σ_ε; used when `sigma_mult` is `None`.
    pub sigma_abs: Option<f64>,
    pub resample: NinResample,
    /// Double-gaussian mixture weight on the +σ_ε mode.
    pub mix_weight: f64,
    /// Double-gaussian per-mode std as a fraction of σ_ε.
    pub component_std_frac: f64,
}

impl NinSettings {
    pub fn mult(topology: NinTopology, sigma_mult: f64) -> Self {
        NinSettings {
            topology,
            kind: NoiseKind::Normal,
            sigma_mult: Some(sigma_mult),
            sigma_abs: None,
            resample: NinResample::PerSamplePerEpoch,
            mix_weight: 0.5,
            component_std_frac: 0.2,
        }
    }
}

/// Settings for the linear toy-model experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySettings {
    pub w0: f64,
    pub w1: f64,
    pub w_ni: f64,
    pub m: f64,
    pub sigma_x: f64,
    pub eta: f64,
    /// σ_ε for the recorded trajectory.
    pub sigma_eps: f64,
    pub steps: usize,
    /// Horizon for divergence probes and the boundary search.
    pub horizon: usize,
    /// (η, σ_ε²) grid for the phase sweep; empty grids skip the sweep.
    pub grid_etas: Vec<f64>,
    pub grid_sigma2: Vec<f64>,
}

impl Default for ToySettings {
    fn default() -> Self {
        let etas: Vec<f64> = (1..=20).map(|i| 0.01 * i as f64).collect();
        let sigma2: Vec<f64> = (1..=20).map(|i| 2.0 * i as f64).collect();
        ToySettings {
            w0: 0.8,
            w1: 1.2,
            w_ni: 1.0,
            m: 1.0,
            sigma_x: 1.0,
            eta: 0.05,
            sigma_eps: 2.0,
            steps: 500,
            horizon: 2000,
            grid_etas: etas,
            grid_sigma2: sigma2,
        }
    }
}

impl ToySettings {
    pub fn state(&self, sigma_eps: f64) -> LinearToyState {
        LinearToyState {
            w0: self.w0,
            w1: self.w1,
            w_ni: self.w_ni,
            m: self.m,
            sigma_x: self.sigma_x,
            sigma_eps,
            eta: self.eta,
            phi_mode: crate::lineartoy::PhiMode::Drop,
        }
    }
}

/// A fully resolved experiment: preset defaults + file overrides + flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: String,
    pub seeds: Vec<u64>,
    pub scale: f64,
    pub out_dir: String,
    pub threads: usize,

    pub data: DataSpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Carve a validation fraction out of the training set and report it as
    /// the evaluation split, leaving the test set untouched.
    pub val_split: Option<f64>,
    /// Also synthesize a shifted-rendering target-domain test set.
    pub domain_shift: bool,

    pub arch: Arch,
    pub nin: Option<NinSettings>,

    pub optimizer: OptimizerKind,
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// True once `epochs` was pinned by the user; exempts it from the
    /// `--scale` cap.
    pub epochs_explicit: bool,
    pub stop_train_acc: f64,
    pub l2_lambda: f64,
    pub dropout_p: f64,
    pub cdt_sigma: f64,

    pub corruption_sigmas: Vec<f64>,
    pub corruption_repeats: usize,
    pub attack_deltas: Vec<f64>,
    pub attack_k: usize,

    /// σ_ε² ladder (as d_in/η multiples) for the `phases` subcommand.
    pub ladder_mults: Vec<f64>,
    /// Pre-existing trace CSVs for the `phases` subcommand.
    pub traces: Vec<String>,

    pub toy: Option<ToySettings>,
}

impl ExperimentConfig {
    fn base(preset: &str) -> Self {
        ExperimentConfig {
            preset: preset.to_string(),
            seeds: vec![1],
            scale: 1.0,
            out_dir: "runs".to_string(),
            threads: 1,
            data: DataSpec::Glyphs20,
            n_train: 10_000,
            n_test: 2_000,
            val_split: None,
            domain_shift: false,
            arch: Arch::Fc { hidden: vec![256, 256] },
            nin: None,
            optimizer: OptimizerKind::Sgd,
            eta: 0.05,
            batch_size: 128,
            epochs: 30,
            epochs_explicit: false,
            stop_train_acc: 0.98,
            l2_lambda: 0.0,
            dropout_p: 0.0,
            cdt_sigma: 0.0,
            corruption_sigmas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            corruption_repeats: 10,
            attack_deltas: vec![0.0, 0.02, 0.05, 0.1],
            attack_k: 5,
            ladder_mults: Vec::new(),
            traces: Vec::new(),
            toy: None,
        }
    }

    /// A single-hidden-layer noise-ladder rung at a given σ_ε² multiple.
    fn ladder(preset: &str, sigma_mult: f64) -> Self {
        let mut c = Self::base(preset);
        c.data = DataSpec::Glyphs28;
        c.n_train = 1_500;
        c.n_test = 500;
        c.arch = Arch::Fc { hidden: vec![512] };
        c.eta = 0.01;
        c.batch_size = 250;
        c.epochs = 80;
        c.epochs_explicit = true;
        c.stop_train_acc = 1.0;
        if sigma_mult > 0.0 {
            c.nin = Some(NinSettings::mult(NinTopology::InputOnly, sigma_mult));
        }
        c
    }

    /// The desk-scale FC family for robustness and generalization runs.
    fn robust_fc(preset: &str) -> Self {
        Self::base(preset)
    }

    fn robust_fc_ninr(preset: &str) -> Self {
        let mut c = Self::robust_fc(preset);
        c.nin = Some(NinSettings::mult(NinTopology::InputOnly, 0.15));
        c
    }

    fn robust_cnn(preset: &str) -> Self {
        let mut c = Self::base(preset);
        c.arch = Arch::Cnn { channels: 8, dense: 64 };
        c.n_train = 4_000;
        c.n_test = 1_000;
        c.epochs = 20;
        c
    }
}

/// All built-in preset names, in display order.
pub fn preset_names() -> Vec<&'static str> {
    vec![
        "fc-fmnist-decoupled",
        "fc-fmnist-decay",
        "fc-fmnist-catapult",
        "fc-fmnist-divergent",
        "phase-ladder",
        "robust-fc-base",
        "robust-fc-ninr",
        "robust-fc-cdt",
        "robust-fc-dropout",
        "robust-fc-l2",
        "robust-cnn-base",
        "robust-cnn-ninr",
        "attack-sweep",
        "noise-uniform",
        "noise-double-gaussian",
        "opt-rmsprop",
        "opt-adam",
        "domain-shift-base",
        "domain-shift-ninr",
        "generalization-split",
        "linear-toy",
    ]
}

/// Look a preset up by name.
pub fn resolve_preset(name: &str) -> Result<ExperimentConfig> {
    let cfg = match name {
        // The σ_ε² phase ladder on the 1-hidden-layer FC.
        "fc-fmnist-decoupled" => ExperimentConfig::ladder(name, 0.0),
        "fc-fmnist-decay" => ExperimentConfig::ladder(name, 0.1),
        "fc-fmnist-catapult" => ExperimentConfig::ladder(name, 1.0),
        "fc-fmnist-divergent" => ExperimentConfig::ladder(name, 1.8),
        "phase-ladder" => {
            let mut c = ExperimentConfig::ladder(name, 0.0);
            c.ladder_mults = vec![0.0, 0.1, 1.0, 1.8];
            c
        }
        // Corruption-robustness family (FC).
        "robust-fc-base" => ExperimentConfig::robust_fc(name),
        "robust-fc-ninr" => ExperimentConfig::robust_fc_ninr(name),
        "robust-fc-cdt" => {
            let mut c = ExperimentConfig::robust_fc(name);
            c.cdt_sigma = 0.4;
            c
        }
        "robust-fc-dropout" => {
            let mut c = ExperimentConfig::robust_fc(name);
            c.dropout_p = 0.2;
            c
        }
        "robust-fc-l2" => {
            let mut c = ExperimentConfig::robust_fc(name);
            c.l2_lambda = 1e-4;
            c
        }
        // CNN pair with the pixel-wise conv NIN realization.
        "robust-cnn-base" => ExperimentConfig::robust_cnn(name),
        "robust-cnn-ninr" => {
            let mut c = ExperimentConfig::robust_cnn(name);
            c.nin = Some(NinSettings::mult(NinTopology::InputOnly, 0.05));
            c
        }
        // FGSM/PGD sweep on the decay-phase FC model.
        "attack-sweep" => {
            let mut c = ExperimentConfig::robust_fc_ninr(name);
            c.attack_deltas = vec![0.0, 0.01, 0.02, 0.05, 0.1, 0.2];
            c
        }
        // Alternative noise distributions.
        "noise-uniform" => {
            let mut c = ExperimentConfig::robust_fc_ninr(name);
            c.nin.as_mut().expect("ninr preset").kind = NoiseKind::Uniform;
            c
        }
        "noise-double-gaussian" => {
            let mut c = ExperimentConfig::robust_fc_ninr(name);
            c.nin.as_mut().expect("ninr preset").kind = NoiseKind::DoubleGaussian;
            c
        }
        // Adaptive optimizers (smaller η, standard practice).
        "opt-rmsprop" => {
            let mut c = ExperimentConfig::robust_fc_ninr(name);
            c.optimizer = OptimizerKind::Rmsprop;
            c.eta = 0.001;
            c
        }
        "opt-adam" => {
            let mut c = ExperimentConfig::robust_fc_ninr(name);
            c.optimizer = OptimizerKind::Adam;
            c.eta = 0.001;
            c
        }
        // Domain shift: evaluate on a shifted-rendering target domain.
        "domain-shift-base" => {
            let mut c = ExperimentConfig::robust_fc(name);
            c.domain_shift = true;
            c
        }
        "domain-shift-ninr" => {
            let mut c = ExperimentConfig::robust_fc_ninr(name);
            c.domain_shift = true;
            c
        }
        // Clean generalization with a 60/40 train/validation split.
        "generalization-split" => {
            let mut c = ExperimentConfig::robust_fc_ninr(name);
            c.val_split = Some(0.4);
            c
        }
        // Linear toy model: trajectory + phase sweep + boundary bisection.
        "linear-toy" => {
            let mut c = ExperimentConfig::base(name);
            c.toy = Some(ToySettings::default());
            c
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; available: {}",
                preset_names().join(", ")
            )))
        }
    };
    Ok(cfg)
}

/// Apply config-file overrides onto a resolved preset. Every documented key
/// is handled here; leftovers are reported by `kv.finish()`.
pub fn apply_overrides(cfg: &mut ExperimentConfig, kv: &mut KvConfig) -> Result<()> {
    if let Some(v) = kv.get_u64_list("seeds")? {
        cfg.seeds = v;
    }
    if let Some(v) = kv.get_f64("scale")? {
        cfg.scale = v;
    }
    if let Some(v) = kv.get_string("out") {
        cfg.out_dir = v;
    }
    if let Some(v) = kv.get_usize("threads")? {
        cfg.threads = v;
    }
    if let Some(v) = kv.get_string("data") {
        cfg.data = match v.as_str() {
            "glyphs28" => DataSpec::Glyphs28,
            "glyphs20" => DataSpec::Glyphs20,
            "idx" => DataSpec::Idx {
                train_images: kv
                    .get_string("train_images")
                    .ok_or_else(|| Error::Config("data = idx requires train_images".into()))?,
                train_labels: kv
                    .get_string("train_labels")
                    .ok_or_else(|| Error::Config("data = idx requires train_labels".into()))?,
                test_images: kv
                    .get_string("test_images")
                    .ok_or_else(|| Error::Config("data = idx requires test_images".into()))?,
                test_labels: kv
                    .get_string("test_labels")
                    .ok_or_else(|| Error::Config("data = idx requires test_labels".into()))?,
            },
            other => return Err(Error::Config(format!("unknown data source {other:?}"))),
        };
    }
    if let Some(v) = kv.get_usize("n_train")? {
        cfg.n_train = v;
    }
    if let Some(v) = kv.get_usize("n_test")? {
        cfg.n_test = v;
    }
    if let Some(v) = kv.get_f64("val_split")? {
        cfg.val_split = if v == 0.0 { None } else { Some(v) };
    }
    if let Some(v) = kv.get_bool("domain_shift")? {
        cfg.domain_shift = v;
    }
    if let Some(v) = kv.get_f64_list("hidden")? {
        cfg.arch = Arch::Fc { hidden: v.iter().map(|x| *x as usize).collect() };
    }
    if let Some(v) = kv.get_string("optimizer") {
        cfg.optimizer = match v.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "rmsprop" => OptimizerKind::Rmsprop,
            "adam" => OptimizerKind::Adam,
            other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        };
    }
    if let Some(v) = kv.get_f64("eta")? {
        cfg.eta = v;
    }
    if let Some(v) = kv.get_usize("batch_size")? {
        cfg.batch_size = v;
    }
    if let Some(v) = kv.get_usize("epochs")? {
        cfg.epochs = v;
        cfg.epochs_explicit = true;
    }
    if let Some(v) = kv.get_f64("stop_train_acc")? {
        cfg.stop_train_acc = v;
    }
    if let Some(v) = kv.get_f64("l2_lambda")? {
        cfg.l2_lambda = v;
    }
    if let Some(v) = kv.get_f64("dropout_p")? {
        cfg.dropout_p = v;
    }
    if let Some(v) = kv.get_f64("cdt_sigma")? {
        cfg.cdt_sigma = v;
    }
    // NIN knobs: setting any knob on a NIN-free config attaches a default
    // input-only normal NIN first.
    let nin_keys =
        ["nin_topology", "noise_kind", "sigma_eps", "sigma_mult", "mix_weight", "component_std",
            "resample"];
    let wants_nin = {
        let mut any = false;
        for k in nin_keys {
            if kv.get(k).is_some() {
                any = true;
            }
        }
        any
    };
    if wants_nin && cfg.nin.is_none() {
        cfg.nin = Some(NinSettings::mult(NinTopology::InputOnly, 0.15));
    }
    if let Some(nin) = cfg.nin.as_mut() {
        if let Some(v) = kv.get_string("nin_topology") {
            nin.topology = match v.as_str() {
                "input-only" => NinTopology::InputOnly,
                "full" => NinTopology::Full,
                other => return Err(Error::Config(format!("unknown nin_topology {other:?}"))),
            };
        }
        if let Some(v) = kv.get_string("noise_kind") {
            nin.kind = match v.as_str() {
                "normal" => NoiseKind::Normal,
                "uniform" => NoiseKind::Uniform,
                "double-gaussian" => NoiseKind::DoubleGaussian,
                other => return Err(Error::Config(format!("unknown noise_kind {other:?}"))),
            };
        }
        if let Some(v) = kv.get_f64("sigma_eps")? {
            nin.sigma_abs = Some(v);
            nin.sigma_mult = None;
        }
        if let Some(v) = kv.get_f64("sigma_mult")? {
            nin.sigma_mult = Some(v);
            nin.sigma_abs = None;
        }
        if let Some(v) = kv.get_f64("mix_weight")? {
            nin.mix_weight = v;
        }
        if let Some(v) = kv.get_f64("component_std")? {
            nin.component_std_frac = v;
        }
        if let Some(v) = kv.get_string("resample") {
            nin.resample = match v.as_str() {
                "per-sample-per-epoch" => NinResample::PerSamplePerEpoch,
                "once-before-training" => NinResample::OnceBeforeTraining,
                other => return Err(Error::Config(format!("unknown resample {other:?}"))),
            };
        }
    }
    if let Some(v) = kv.get_f64_list("corruption_sigmas")? {
        cfg.corruption_sigmas = v;
    }
    if let Some(v) = kv.get_usize("corruption_repeats")? {
        cfg.corruption_repeats = v;
    }
    if let Some(v) = kv.get_f64_list("attack_deltas")? {
        cfg.attack_deltas = v;
    }
    if let Some(v) = kv.get_usize("attack_k")? {
        cfg.attack_k = v;
    }
    if let Some(v) = kv.get_f64_list("ladder_mults")? {
        cfg.ladder_mults = v;
    }
    if let Some(v) = kv.get_string("traces") {
        cfg.traces = v.split(',').map(|s| s.trim().to_string()).collect();
    }
    // Toy knobs, analogous: any toy_* key materializes toy settings.
    let toy_keys = ["toy_w0", "toy_w1", "toy_wni", "toy_m", "toy_sigma_x", "toy_eta",
        "toy_sigma_eps", "toy_steps", "toy_horizon", "toy_grid_etas", "toy_grid_sigma2"];
    let wants_toy = {
        let mut any = false;
        for k in toy_keys {
            if kv.get(k).is_some() {
                any = true;
            }
        }
        any
    };
    if wants_toy && cfg.toy.is_none() {
        cfg.toy = Some(ToySettings::default());
    }
    if let Some(toy) = cfg.toy.as_mut() {
        if let Some(v) = kv.get_f64("toy_w0")? {
            toy.w0 = v;
        }
        if let Some(v) = kv.get_f64("toy_w1")? {
            toy.w1 = v;
        }
        if let Some(v) = kv.get_f64("toy_wni")? {
            toy.w_ni = v;
        }
        if let Some(v) = kv.get_f64("toy_m")? {
            toy.m = v;
        }
        if let Some(v) = kv.get_f64("toy_sigma_x")? {
            toy.sigma_x = v;
        }
        if let Some(v) = kv.get_f64("toy_eta")? {
            toy.eta = v;
        }
        if let Some(v) = kv.get_f64("toy_sigma_eps")? {
            toy.sigma_eps = v;
        }
        if let Some(v) = kv.get_usize("toy_steps")? {
            toy.steps = v;
        }
        if let Some(v) = kv.get_usize("toy_horizon")? {
            toy.horizon = v;
        }
        if let Some(v) = kv.get_f64_list("toy_grid_etas")? {
            toy.grid_etas = v;
        }
        if let Some(v) = kv.get_f64_list("toy_grid_sigma2")? {
            toy.grid_sigma2 = v;
        }
    }
    kv.finish()
}

/// Validate cross-field constraints after all overrides.
pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("seeds must be nonempty".into()));
    }
    if !(cfg.scale > 0.0 && cfg.scale <= 1.0) {
        return Err(Error::Config(format!("scale must lie in (0,1], got {}", cfg.scale)));
    }
    if cfg.threads == 0 {
        return Err(Error::Config("threads must be >= 1".into()));
    }
    if let Some(v) = cfg.val_split {
        if !(0.0..1.0).contains(&v) {
            return Err(Error::Config(format!("val_split must lie in [0,1), got {v}")));
        }
    }
    if let Some(nin) = &cfg.nin {
        if nin.sigma_mult.is_none() && nin.sigma_abs.is_none() {
            return Err(Error::Config("NIN requires sigma_mult or sigma_eps".into()));
        }
        if let Some(m) = nin.sigma_mult {
            if m <= 0.0 {
                return Err(Error::Config("sigma_mult must be > 0".into()));
            }
        }
        if let Some(a) = nin.sigma_abs {
            if a <= 0.0 {
                return Err(Error::Config("sigma_eps must be > 0".into()));
            }
        }
    }
    if let Some(toy) = &cfg.toy {
        toy.state(toy.sigma_eps.max(f64::MIN_POSITIVE)).validate()?;
    }
    // The remaining fields are checked by TrainConfig::validate at build
    // time; probe once here so `--preset x --config bad` exits early.
    if cfg.toy.is_none() {
        build_train_config(cfg, cfg.seeds[0])?.validate()?;
    }
    Ok(())
}

/// Apply the `--scale` desk-scale reduction in place.
pub fn apply_scale(cfg: &mut ExperimentConfig) {
    if cfg.scale >= 1.0 {
        return;
    }
    let s = cfg.scale;
    cfg.n_train = ((cfg.n_train as f64 * s).round() as usize).max(cfg.batch_size);
    match &mut cfg.arch {
        Arch::Fc { hidden } => {
            for hsize in hidden.iter_mut() {
                *hsize = ((*hsize as f64 * s).round() as usize).max(8);
            }
        }
        Arch::Cnn { channels, dense } => {
            *channels = ((*channels as f64 * s).round() as usize).max(2);
            *dense = ((*dense as f64 * s).round() as usize).max(8);
        }
    }
    if !cfg.epochs_explicit {
        cfg.epochs = cfg.epochs.min(50);
    }
    // σ_ε is recomputed from sigma_mult at network-build time, so the
    // width change above automatically rescales the noise.
}

fn input_shape(cfg: &ExperimentConfig) -> Vec<usize> {
    let (h, w) = match cfg.data {
        DataSpec::Glyphs28 => (28, 28),
        DataSpec::Glyphs20 => (20, 20),
        DataSpec::Idx { .. } => (28, 28),
    };
    match cfg.arch {
        Arch::Fc { .. } => vec![h * w],
        Arch::Cnn { .. } => vec![1, h, w],
    }
}

/// Materialize σ_ε. The injected layer's input dimension plus the noise
/// node itself gives d_ℓ (785 for a flat 28×28 input), and
/// σ_ε² = sigma_mult·d_ℓ/η.
fn resolve_sigma(cfg: &ExperimentConfig, nin: &NinSettings) -> f64 {
    if let Some(abs) = nin.sigma_abs {
        return abs;
    }
    let d_in: usize = input_shape(cfg).iter().product::<usize>() + 1;
    let mult = nin.sigma_mult.unwrap_or(0.0);
    (mult * d_in as f64 / cfg.eta).sqrt()
}

/// Build the network described by a resolved config.
pub fn build_network(cfg: &ExperimentConfig) -> Result<NetworkSpec> {
    let ishape = input_shape(cfg);
    let mut layers = Vec::new();
    match &cfg.arch {
        Arch::Fc { hidden } => {
            let mut d_prev: usize = ishape.iter().product();
            for hsize in hidden {
                layers.push(LayerSpec::Dense { d_in: d_prev, d_out: *hsize, activation: Activation::Relu });
                if cfg.dropout_p > 0.0 {
                    layers.push(LayerSpec::Dropout { p_drop: cfg.dropout_p });
                }
                d_prev = *hsize;
            }
            layers.push(LayerSpec::Dense { d_in: d_prev, d_out: 10, activation: Activation::Linear });
        }
        Arch::Cnn { channels, dense } => {
            let (h, w) = (ishape[1], ishape[2]);
            layers.push(LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: *channels,
                kernel_h: 3,
                kernel_w: 3,
                activation: Activation::Relu,
            });
            layers.push(LayerSpec::Maxpool { h: 2, w: 2 });
            layers.push(LayerSpec::Flatten);
            let flat = channels * ((h - 2) / 2) * ((w - 2) / 2);
            layers.push(LayerSpec::Dense { d_in: flat, d_out: *dense, activation: Activation::Relu });
            if cfg.dropout_p > 0.0 {
                layers.push(LayerSpec::Dropout { p_drop: cfg.dropout_p });
            }
            layers.push(LayerSpec::Dense { d_in: *dense, d_out: 10, activation: Activation::Linear });
        }
    }
    let nin = match &cfg.nin {
        None => None,
        Some(settings) => {
            let sigma = resolve_sigma(cfg, settings);
            let dist = match settings.kind {
                NoiseKind::Normal => NoiseDistribution::normal(sigma),
                NoiseKind::Uniform => NoiseDistribution::uniform(sigma),
                NoiseKind::DoubleGaussian => NoiseDistribution::double_gaussian(
                    sigma,
                    settings.mix_weight,
                    settings.component_std_frac * sigma,
                ),
            };
            Some(NinConfig {
                topology: settings.topology,
                dist,
                resample: settings.resample,
                shared_eps: false,
            })
        }
    };
    Ok(NetworkSpec { input_shape: ishape, layers, loss: LossKind::CrossEntropy, nin })
}

/// Build the per-seed training configuration.
pub fn build_train_config(cfg: &ExperimentConfig, seed: u64) -> Result<TrainConfig> {
    let optimizer = match cfg.optimizer {
        OptimizerKind::Sgd => OptimizerConfig::sgd(cfg.eta),
        OptimizerKind::Rmsprop => OptimizerConfig::rmsprop(cfg.eta),
        OptimizerKind::Adam => OptimizerConfig::adam(cfg.eta),
    };
    let mut tc = TrainConfig::new(optimizer, cfg.batch_size, cfg.epochs, seed);
    tc.reg = RegularizerConfig {
        l2_lambda: cfg.l2_lambda,
        dropout_p: cfg.dropout_p,
        cdt_sigma: cfg.cdt_sigma,
    };
    tc.stop_train_acc = cfg.stop_train_acc;
    tc.validate()?;
    Ok(tc)
}

/// Generated/loaded data for one experiment: train, eval split, untouched
/// test set, and the optional target domain.
pub struct ExperimentData {
    pub train: Dataset,
    pub eval: Dataset,
    pub test: Dataset,
    pub target: Option<Dataset>,
}

/// The shifted glyph rendering used as the desk-scale domain-shift target:
/// same class masks (same generator draws), different stroke rendering.
fn shifted_glyphs(base: &GlyphConfig) -> GlyphConfig {
    let mut cfg = base.clone();
    cfg.shift += 2;
    cfg.intensity_min = 0.2;
    cfg.intensity_range = 0.8;
    cfg.pixel_noise = 0.12;
    cfg
}

/// Materialize datasets. The generator seed is shared across training seeds
/// (data is part of the experiment, not of one run), standardization is fit
/// on TRAIN only (global mean/std) and applied to every split.
pub fn make_datasets(cfg: &ExperimentConfig, data_seed: u64) -> Result<ExperimentData> {
    let root = RngStream::new(data_seed);
    let (train_raw, test_raw, target_raw) = match &cfg.data {
        DataSpec::Glyphs28 | DataSpec::Glyphs20 => {
            let gcfg = match cfg.data {
                DataSpec::Glyphs28 => GlyphConfig::glyphs28(),
                _ => GlyphConfig::glyphs20(),
            };
            let (train, test) = synth_glyphs(&gcfg, cfg.n_train, cfg.n_test, &mut root.fork("data"))?;
            let target = if cfg.domain_shift {
                // Same fork label ⇒ identical class masks, shifted rendering.
                let (_, t) =
                    synth_glyphs(&shifted_glyphs(&gcfg), 0, cfg.n_test, &mut root.fork("data"))?;
                Some(t)
            } else {
                None
            };
            (train, test, target)
        }
        DataSpec::Idx { train_images, train_labels, test_images, test_labels } => {
            let load = |ip: &str, lp: &str, name: &str| -> Result<Dataset> {
                let images = crate::dataio::load_idx(&std::fs::read(ip)?)?;
                let labels = crate::dataio::load_idx(&std::fs::read(lp)?)?;
                Dataset::new(images, labels, name)
            };
            let train = load(train_images, train_labels, "train")?.take(cfg.n_train.max(1))?;
            let test = load(test_images, test_labels, "test")?.take(cfg.n_test.max(1))?;
            (train, test, None)
        }
    };

    // Flatten images for FC architectures.
    let reshape = |d: Dataset| -> Result<Dataset> {
        match cfg.arch {
            Arch::Fc { .. } => {
                let n = d.images.shape()[0];
                let flat: usize = d.images.shape()[1..].iter().product();
                let images = d.images.reshape(&[n, flat])?;
                Dataset::new(images, d.labels, &d.name)
            }
            Arch::Cnn { .. } => {
                let n = d.images.shape()[0];
                let (h, w) = (d.images.shape()[1], d.images.shape()[2]);
                let images = d.images.reshape(&[n, 1, h, w])?;
                Dataset::new(images, d.labels, &d.name)
            }
        }
    };
    let train_raw = reshape(train_raw)?;
    let test_raw = reshape(test_raw)?;
    let target_raw = target_raw.map(reshape).transpose()?;

    let stats = standardize_fit(&train_raw, StandardizeScope::Global, StandardizeScale::Std)?;
    let mut train = standardize_apply(&stats, &train_raw)?;
    let test = standardize_apply(&stats, &test_raw)?;
    let target = target_raw.map(|t| standardize_apply(&stats, &t)).transpose()?;

    // Optional train/validation split, carved off the standardized train set.
    let eval = if let Some(frac) = cfg.val_split {
        let n = train.len();
        let n_train_part = ((1.0 - frac) * n as f64).round() as usize;
        let d: usize = train.images.shape()[1..].iter().product();
        let lsh: usize = train.labels.shape()[1..].iter().product::<usize>().max(1);
        let split = |lo: usize, hi: usize, name: &str| -> Result<Dataset> {
            let images =
                Tensorish::slice_rows(&train.images, lo, hi, d, &train.images.shape()[1..])?;
            let labels =
                Tensorish::slice_rows(&train.labels, lo, hi, lsh, &train.labels.shape()[1..])?;
            Dataset::new(images, labels, name)
        };
        let val = split(n_train_part, n, "val")?;
        train = split(0, n_train_part, "train")?;
        val
    } else {
        test.clone()
    };

    Ok(ExperimentData { train, eval, test, target })
}

/// Row-range slicing helper for dataset splits.
struct Tensorish;

impl Tensorish {
    fn slice_rows(
        t: &crate::tensor::Tensor,
        lo: usize,
        hi: usize,
        row_len: usize,
        tail_shape: &[usize],
    ) -> Result<crate::tensor::Tensor> {
        let mut shape = vec![hi - lo];
        shape.extend_from_slice(tail_shape);
        let data = t.data()[lo * row_len..hi * row_len].to_vec();
        crate::tensor::Tensor::from_vec(&shape, data)
    }
}
