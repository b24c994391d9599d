//! Post-training evaluation: Gaussian input corruption, domain shift, and
//! sign-gradient adversarial attacks.
//!
//! Corruption follows the variance-preserving map
//! `x ← √(1−σ²)·x + σ·δ`, `δ ~ N(0, 1)`: for standardized (unit-variance)
//! inputs the per-pixel variance is unchanged for every σ ∈ [0, 1], so the
//! corruption level is the *fraction* of signal replaced by noise rather
//! than an additive blur.

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::network::{accuracy, backward, forward, Mode, NetworkSpec, Params};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A corruption evaluation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub sigma_noise: f64,
    pub repeats: usize,
    pub seed: u64,
}

/// Attack family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

/// A gradient-sign attack request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// FGSM step magnitude δ.
    pub delta: f64,
    /// PGD iterations (k = 1 reproduces FGSM exactly).
    pub k: usize,
    /// PGD per-iteration magnitude.
    pub step: f64,
    /// Optional clamp of the perturbed inputs to `[lo, hi]`.
    pub clip: Option<(f64, f64)>,
}

/// One evaluated point of a robustness curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    /// The σ or δ this point was evaluated at.
    pub level: f64,
    pub acc_mean: f64,
    /// Two standard deviations over the evaluation repeats.
    pub acc_2std: f64,
    pub n: usize,
}

/// A labeled set of robustness points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RobustnessReport {
    pub points: Vec<RobustnessPoint>,
}

/// Variance-preserving Gaussian corruption of a batch. σ = 0 returns the
/// input bit-identically; σ = 1 is pure noise.
pub fn corrupt_inputs(x: &Tensor, sigma_noise: f64, rng: &mut RngStream) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&sigma_noise) {
        return Err(Error::Config(format!(
            "sigma_noise must lie in [0,1], got {sigma_noise}"
        )));
    }
    if sigma_noise == 0.0 {
        return Ok(x.clone());
    }
    let keep = (1.0 - sigma_noise * sigma_noise).sqrt();
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = keep * *v + sigma_noise * rng.next_standard_normal();
    }
    Ok(out)
}

/// Accuracy under corruption for each σ in `sigmas`, averaged over
/// `repeats` fresh noise draws.
pub fn corruption_curve(
    spec: &NetworkSpec,
    params: &Params,
    testset: &Dataset,
    sigmas: &[f64],
    repeats: usize,
    rng: &RngStream,
) -> Result<RobustnessReport> {
    if testset.is_empty() {
        return Err(Error::Invalid("corruption_curve: empty test set".into()));
    }
    let mut report = RobustnessReport::default();
    for (si, sigma) in sigmas.iter().enumerate() {
        let mut accs = Vec::with_capacity(repeats);
        for rep in 0..repeats.max(1) {
            let mut noise = rng.fork(&format!("corrupt/{si}/{rep}"));
            let x = corrupt_inputs(&testset.images, *sigma, &mut noise)?;
            let mut scratch = RngStream::new(0);
            let (out, _) = forward(spec, params, &x, &mut scratch, Mode::Eval)?;
            accs.push(accuracy(&out, &testset.labels)?);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
        report.points.push(RobustnessPoint {
            level: *sigma,
            acc_mean: mean,
            acc_2std: 2.0 * var.sqrt(),
            n: testset.len(),
        });
    }
    Ok(report)
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn attack_step(
    spec: &NetworkSpec,
    params: &Params,
    x: &Tensor,
    y: &Tensor,
    delta: f64,
    clip: Option<(f64, f64)>,
) -> Result<Tensor> {
    // Attacks differentiate the deployed (eval-mode) network: ε = 0,
    // dropout off, batchnorm on its running statistics.
    let mut scratch = RngStream::new(0);
    let (_, cache) = forward(spec, params, x, &mut scratch, Mode::Eval)?;
    let bw = backward(spec, params, &cache, y)?;
    let mut out = x.clone();
    for (v, g) in out.data_mut().iter_mut().zip(bw.d_input.data()) {
        *v += delta * sign0(*g);
    }
    if let Some((lo, hi)) = clip {
        for v in out.data_mut() {
            *v = v.clamp(lo, hi);
        }
    }
    Ok(out)
}

/// Fast gradient sign method: `x + δ·sign(∇_x L)` with `sign(0) = 0`.
pub fn fgsm_attack(
    spec: &NetworkSpec,
    params: &Params,
    x: &Tensor,
    y: &Tensor,
    delta: f64,
    clip: Option<(f64, f64)>,
) -> Result<Tensor> {
    attack_step(spec, params, x, y, delta, clip)
}

/// Projected-free iterated FGSM: `k` compounding sign steps of magnitude
/// `step`, recomputing the gradient at each iterate. No ε-ball projection
/// is applied (pure compounding); `pgd(k=1, step=δ)` is bit-exactly FGSM.
pub fn pgd_attack(
    spec: &NetworkSpec,
    params: &Params,
    x: &Tensor,
    y: &Tensor,
    k: usize,
    step: f64,
    clip: Option<(f64, f64)>,
) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::Config("pgd requires k >= 1".into()));
    }
    let mut cur = x.clone();
    for _ in 0..k {
        cur = attack_step(spec, params, &cur, y, step, clip)?;
    }
    Ok(cur)
}

/// Accuracy under an attack for each δ in `deltas`.
pub fn attack_curve(
    spec: &NetworkSpec,
    params: &Params,
    testset: &Dataset,
    attack: &AttackSpec,
    deltas: &[f64],
) -> Result<RobustnessReport> {
    let mut report = RobustnessReport::default();
    for delta in deltas {
        let adv = match attack.kind {
            AttackKind::Fgsm => {
                fgsm_attack(spec, params, &testset.images, &testset.labels, *delta, attack.clip)?
            }
            AttackKind::Pgd => pgd_attack(
                spec,
                params,
                &testset.images,
                &testset.labels,
                attack.k,
                *delta,
                attack.clip,
            )?,
        };
        let mut scratch = RngStream::new(0);
        let (out, _) = forward(spec, params, &adv, &mut scratch, Mode::Eval)?;
        report.points.push(RobustnessPoint {
            level: *delta,
            acc_mean: accuracy(&out, &testset.labels)?,
            acc_2std: 0.0,
            n: testset.len(),
        });
    }
    Ok(report)
}

/// Plain eval-mode accuracy on a (pre-processed) target-domain test set.
pub fn domain_shift_eval(
    spec: &NetworkSpec,
    params: &Params,
    target: &Dataset,
) -> Result<RobustnessReport> {
    let mut scratch = RngStream::new(0);
    let (out, _) = forward(spec, params, &target.images, &mut scratch, Mode::Eval)?;
    let acc = accuracy(&out, &target.labels)?;
    Ok(RobustnessReport {
        points: vec![RobustnessPoint { level: 0.0, acc_mean: acc, acc_2std: 0.0, n: target.len() }],
    })
}
