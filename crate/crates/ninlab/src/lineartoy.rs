//! The exact univariate linear model used as the analytic oracle.
//!
//! A single linear hidden unit with no biases maps `x → w1·(w0·x + w_ni·ε)`
//! against targets `y = M·x` under the ½-MSE convention. Averaging over
//! `x ~ N(0, σx²)` and `ε` (zero mean, variance σ_ε²) gives the closed-form
//! batch loss
//!
//! ```text
//! L = ½ [ 2·w1·w_ni·(w1·w0 − M)·σx·σ_ε·Φ/√|B|  +  (w1·w0 − M)²·σx²  +  w1²·w_ni²·σ_ε² ]
//! ```
//!
//! with `Φ ~ N(0,1)` the batch-fluctuation variable. The cross term is the
//! emergent R1 (suppressed like 1/√|B|); the last term is R2. Gradient
//! descent on the infinite-batch loss, with `w0` held fixed, gives the
//! coupled discrete update map implemented by [`toy_step`]; for large
//! `η·σ_ε²` the map is stiff and diverges even though the continuous-time
//! flow does not.

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::{Error, Result};

/// Batch-fluctuation handling for the closed-form loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiMode {
    /// Infinite-batch limit: the Φ term is dropped.
    Drop,
    /// Finite batch of the given size: Φ resampled from N(0,1) per call.
    Sample { batch: usize },
}

/// The five scalars plus hyperparameters of the linear model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearToyState {
    pub w0: f64,
    pub w1: f64,
    pub w_ni: f64,
    /// Target slope: labels are `y = M·x`.
    pub m: f64,
    pub sigma_x: f64,
    pub sigma_eps: f64,
    pub eta: f64,
    pub phi_mode: PhiMode,
}

impl LinearToyState {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_x > 0.0) {
            return Err(Error::Config("sigma_x must be > 0".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config("eta must be > 0".into()));
        }
        if let PhiMode::Sample { batch } = self.phi_mode {
            if batch == 0 {
                return Err(Error::Config("phi batch must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Closed-form batch loss. In `Sample` mode a fresh Φ is drawn from `rng`.
pub fn toy_loss(s: &LinearToyState, rng: Option<&mut RngStream>) -> Result<f64> {
    s.validate()?;
    let resid = s.w1 * s.w0 - s.m;
    let base = resid * resid * s.sigma_x * s.sigma_x
        + s.w1 * s.w1 * s.w_ni * s.w_ni * s.sigma_eps * s.sigma_eps;
    let cross = match s.phi_mode {
        PhiMode::Drop => 0.0,
        PhiMode::Sample { batch } => {
            let rng = rng.ok_or_else(|| {
                Error::Config("toy_loss: sampling phi requires an rng".into())
            })?;
            let phi = rng.next_standard_normal();
            2.0 * s.w1 * s.w_ni * resid * s.sigma_x * s.sigma_eps * phi / (batch as f64).sqrt()
        }
    };
    Ok(0.5 * (cross + base))
}

/// The analytic R1 and R2 of the model. R1 is zero in infinite-batch mode;
/// in `Sample` mode a fresh Φ is drawn.
pub fn toy_r1_r2(s: &LinearToyState, rng: Option<&mut RngStream>) -> Result<(f64, f64)> {
    s.validate()?;
    let r2 = 0.5 * s.w1 * s.w1 * s.w_ni * s.w_ni * s.sigma_eps * s.sigma_eps;
    let r1 = match s.phi_mode {
        PhiMode::Drop => 0.0,
        PhiMode::Sample { batch } => {
            let rng = rng.ok_or_else(|| {
                Error::Config("toy_r1_r2: sampling phi requires an rng".into())
            })?;
            let phi = rng.next_standard_normal();
            s.w_ni * s.w1 * (s.w1 * s.w0 - s.m) * s.sigma_x * s.sigma_eps * phi
                / (batch as f64).sqrt()
        }
    };
    Ok((r1, r2))
}

/// One step of the coupled infinite-batch gradient-descent map (`w0` fixed):
///
/// ```text
/// w1   ← w1·(1 − η·σ_ε²·w_ni²) − η·(w1·w0 − M)·w0·σx²
/// w_ni ← w_ni·(1 − η·σ_ε²·w1²)
/// ```
///
/// both evaluated at the pre-step values. Divergence shows up as growing
/// values, which is correct behavior rather than an error.
pub fn toy_step(s: &LinearToyState) -> LinearToyState {
    let se2 = s.sigma_eps * s.sigma_eps;
    let resid = s.w1 * s.w0 - s.m;
    let w1 = s.w1 * (1.0 - s.eta * se2 * s.w_ni * s.w_ni)
        - s.eta * resid * s.w0 * s.sigma_x * s.sigma_x;
    let w_ni = s.w_ni * (1.0 - s.eta * se2 * s.w1 * s.w1);
    LinearToyState { w1, w_ni, ..*s }
}

/// Iterate [`toy_step`], recording `(w1, w_ni)` including the initial state.
pub fn toy_trajectory(s0: &LinearToyState, steps: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut s = *s0;
    out.push((s.w1, s.w_ni));
    for _ in 0..steps {
        s = toy_step(&s);
        out.push((s.w1, s.w_ni));
    }
    out
}

/// Weight magnitude beyond which a toy trajectory is declared divergent.
pub const TOY_DIVERGENCE_CAP: f64 = 1e12;

/// True when the map diverges within `horizon` steps at the given σ_ε².
pub fn toy_diverges(s0: &LinearToyState, sigma_eps_squared: f64, horizon: usize) -> bool {
    let mut s = LinearToyState { sigma_eps: sigma_eps_squared.max(0.0).sqrt(), ..*s0 };
    for _ in 0..horizon {
        s = toy_step(&s);
        if !s.w1.is_finite()
            || !s.w_ni.is_finite()
            || s.w1.abs() > TOY_DIVERGENCE_CAP
            || s.w_ni.abs() > TOY_DIVERGENCE_CAP
        {
            return true;
        }
    }
    false
}

/// Bisect σ_ε² for the convergence/divergence boundary of the map, starting
/// from a state that converges at σ_ε = 0. The bracket is grown by doubling
/// up to `cap`, then narrowed to ≤ 1% relative width.
pub fn toy_phase_boundary(s0: &LinearToyState, horizon: usize, cap: f64) -> Result<f64> {
    s0.validate()?;
    if toy_diverges(s0, 0.0, horizon) {
        return Err(Error::Config(
            "toy_phase_boundary: state must converge at sigma_eps = 0".into(),
        ));
    }
    let mut lo = 0.0;
    let mut hi = 1e-6_f64.max(0.1 / s0.eta.max(1e-300));
    while !toy_diverges(s0, hi, horizon) {
        lo = hi;
        hi *= 2.0;
        if hi > cap {
            return Err(Error::Invalid(format!(
                "no divergence found below sigma_eps_squared = {cap}"
            )));
        }
    }
    while (hi - lo) > 0.01 * hi {
        let mid = 0.5 * (lo + hi);
        if toy_diverges(s0, mid, horizon) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Run the full network SGD recursion (1-input / 1-hidden / 1-output linear
/// net, ½-MSE, `w0` frozen) side by side with [`toy_step`] and return the
/// largest relative deviation of `(w1, w_ni)` over `steps` updates.
///
/// At σ_ε = 0 the batch is the deterministic two-point set `{+σx, −σx}`
/// whose sample second moment is exactly σx², so the recursions agree to
/// floating-point error. At σ_ε > 0 each step draws a fresh Monte-Carlo
/// batch of `batch` samples, which approaches the infinite-batch map like
/// 1/√batch.
pub fn toy_vs_network_crosscheck(
    s0: &LinearToyState,
    steps: usize,
    batch: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    use crate::network::{backward, forward_with_noise, Activation, LayerSpec, LossKind, Mode,
        NetworkSpec, NinConfig, NinResample, NinTopology};
    use crate::noise::NoiseDistribution;
    use crate::tensor::Tensor;

    s0.validate()?;
    if batch == 0 {
        return Err(Error::Config("crosscheck batch must be >= 1".into()));
    }
    let spec = NetworkSpec {
        input_shape: vec![1],
        layers: vec![
            LayerSpec::Dense { d_in: 1, d_out: 1, activation: Activation::Linear },
            LayerSpec::Dense { d_in: 1, d_out: 1, activation: Activation::Linear },
        ],
        loss: LossKind::Mse,
        nin: Some(NinConfig {
            topology: NinTopology::InputOnly,
            dist: NoiseDistribution::normal(s0.sigma_eps.max(f64::MIN_POSITIVE)),
            resample: NinResample::PerSamplePerEpoch,
            shared_eps: false,
        }),
    };
    let mut params = crate::training::init_params(&spec, &mut RngStream::new(0))?;
    params.for_each_named_mut(|name, t| match name {
        "layer0.w" => t.data_mut()[0] = s0.w0,
        "layer1.w" => t.data_mut()[0] = s0.w1,
        "nin0.w_ni" => t.data_mut()[0] = s0.w_ni,
        _ => {}
    });

    let mut toy = *s0;
    let mut worst: f64 = 0.0;
    let mut scratch = RngStream::new(0);
    for _ in 0..steps {
        // Assemble this step's batch and noise draws.
        let (xs, eps): (Vec<f64>, Vec<f64>) = if s0.sigma_eps == 0.0 {
            (vec![s0.sigma_x, -s0.sigma_x], vec![0.0; 2])
        } else {
            let xs = (0..batch).map(|_| s0.sigma_x * rng.next_standard_normal()).collect();
            let eps = (0..batch).map(|_| s0.sigma_eps * rng.next_standard_normal()).collect();
            (xs, eps)
        };
        let n = xs.len();
        let ys: Vec<f64> = xs.iter().map(|x| s0.m * x).collect();
        let x_t = Tensor::from_vec(&[n, 1], xs)?;
        let y_t = Tensor::from_vec(&[n, 1], ys)?;

        // One full-batch SGD update with w0 frozen.
        let (_, cache) =
            forward_with_noise(&spec, &params, &x_t, &[eps], &mut scratch, Mode::Train)?;
        let bw = backward(&spec, &params, &cache, &y_t)?;
        let g_w1 = match &bw.grads.layers[1] {
            crate::network::LayerParams::Dense { w, .. } => w.data()[0],
            _ => unreachable!("layer 1 is dense"),
        };
        let g_wni = bw.grads.nins[0].w_ni.data()[0];
        params.for_each_named_mut(|name, t| match name {
            "layer1.w" => t.data_mut()[0] -= s0.eta * g_w1,
            "nin0.w_ni" => t.data_mut()[0] -= s0.eta * g_wni,
            _ => {}
        });

        toy = toy_step(&toy);
        let mut net_w1 = 0.0;
        let mut net_wni = 0.0;
        params.for_each_named(|name, t| match name {
            "layer1.w" => net_w1 = t.data()[0],
            "nin0.w_ni" => net_wni = t.data()[0],
            _ => {}
        });
        let dev = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
        worst = worst.max(dev(net_w1, toy.w1)).max(dev(net_wni, toy.w_ni));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> LinearToyState {
        LinearToyState {
            w0: 1.0,
            w1: 0.5,
            w_ni: 0.5,
            m: 1.0,
            sigma_x: 1.0,
            sigma_eps: 1.0,
            eta: 0.05,
            phi_mode: PhiMode::Drop,
        }
    }

    #[test]
    fn loss_at_global_optimum_is_zero() {
        let s = LinearToyState { w0: 2.0, w1: 0.5, w_ni: 0.0, ..base() };
        assert_eq!(toy_loss(&s, None).unwrap(), 0.0);
    }

    #[test]
    fn loss_hand_computed_infinite_batch() {
        let s = LinearToyState {
            w0: 0.0,
            w1: 1.0,
            w_ni: 1.0,
            m: 1.0,
            sigma_x: 1.0,
            sigma_eps: 2.0,
            ..base()
        };
        assert_eq!(toy_loss(&s, None).unwrap(), 2.5);
    }

    #[test]
    fn noise_free_loss_reduces_to_quadratic() {
        let s = LinearToyState { sigma_eps: 0.0, w0: 1.5, w1: 2.0, ..base() };
        let resid = s.w1 * s.w0 - s.m;
        assert_eq!(toy_loss(&s, None).unwrap(), 0.5 * resid * resid);
    }

    #[test]
    fn r2_hand_computed() {
        let s = LinearToyState { w1: 2.0, w_ni: 0.5, sigma_eps: 1.0, ..base() };
        let (r1, r2) = toy_r1_r2(&s, None).unwrap();
        assert_eq!(r1, 0.0);
        assert_eq!(r2, 0.5);
    }

    #[test]
    fn r1_r2_vanish_without_noise_weight() {
        let s = LinearToyState { w_ni: 0.0, phi_mode: PhiMode::Sample { batch: 100 }, ..base() };
        let mut rng = RngStream::new(0);
        let (r1, r2) = toy_r1_r2(&s, Some(&mut rng)).unwrap();
        assert_eq!((r1, r2), (0.0, 0.0));
    }

    #[test]
    fn step_hand_computed() {
        let s = LinearToyState {
            w0: 0.0,
            w1: 1.0,
            w_ni: 1.0,
            m: 1.0,
            sigma_x: 1.0,
            sigma_eps: 1.0,
            eta: 0.1,
            phi_mode: PhiMode::Drop,
        };
        let next = toy_step(&s);
        assert!((next.w1 - 0.9).abs() < 1e-15);
        assert!((next.w_ni - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_decouples_the_map() {
        let mut s = LinearToyState { sigma_eps: 0.0, ..base() };
        // Residual contracts by (1 − η·w0²·σx²) = 0.95 per step.
        for _ in 0..200 {
            let next = toy_step(&s);
            assert_eq!(next.w_ni, s.w_ni);
            s = next;
        }
        // Plain GD on the quadratic converges to the interpolating solution.
        assert!((s.w1 * s.w0 - s.m).abs() < 1e-2);
    }

    #[test]
    fn fixed_point_is_stationary() {
        let s = LinearToyState { w0: 2.0, w1: 0.5, w_ni: 0.0, ..base() };
        let next = toy_step(&s);
        assert_eq!((next.w1, next.w_ni), (s.w1, s.w_ni));
    }

    #[test]
    fn target_rescaling_invariance() {
        // Stepping (M, w1, w_ni, σ_ε) matches stepping the M = 1 state
        // (w1/M, w_ni/M, M·σ_ε) scaled back.
        let m = 3.0;
        let s = LinearToyState { m, w1: 0.7, w_ni: 0.4, sigma_eps: 0.9, ..base() };
        let scaled = LinearToyState {
            m: 1.0,
            w1: s.w1 / m,
            w_ni: s.w_ni / m,
            sigma_eps: m * s.sigma_eps,
            ..s
        };
        let a = toy_step(&s);
        let b = toy_step(&scaled);
        assert!((a.w1 - b.w1 * m).abs() < 1e-12);
        assert!((a.w_ni - b.w_ni * m).abs() < 1e-12);
    }

    #[test]
    fn decay_law_with_frozen_w1_is_exact() {
        let s0 = LinearToyState { w0: 0.0, m: 0.0, w1: 1.3, w_ni: 0.8, sigma_eps: 0.7, ..base() };
        let factor = 1.0 - s0.eta * s0.sigma_eps * s0.sigma_eps * s0.w1 * s0.w1;
        let mut s = s0;
        for _ in 0..200 {
            let mut next = toy_step(&s);
            next.w1 = s0.w1; // freeze
            let ratio = next.w_ni / s.w_ni;
            assert!((ratio - factor).abs() <= 1e-12, "ratio {ratio} vs {factor}");
            s = next;
        }
    }

    #[test]
    fn pure_noise_boundary_matches_stability_bound() {
        let s = LinearToyState {
            w0: 0.0,
            m: 0.0,
            w1: 0.8,
            w_ni: 0.8,
            sigma_eps: 0.0,
            eta: 0.01,
            ..base()
        };
        let found = toy_phase_boundary(&s, 5000, 1e9).unwrap();
        let want = 2.0 / (s.eta * 0.8 * 0.8);
        assert!((found - want).abs() < 0.1 * want, "found {found} want {want}");
    }

    #[test]
    fn doubling_eta_halves_the_boundary() {
        let mut s = LinearToyState {
            w0: 0.0,
            m: 0.0,
            w1: 0.6,
            w_ni: 0.6,
            sigma_eps: 0.0,
            eta: 0.02,
            ..base()
        };
        let b1 = toy_phase_boundary(&s, 5000, 1e9).unwrap();
        s.eta *= 2.0;
        let b2 = toy_phase_boundary(&s, 5000, 1e9).unwrap();
        assert!((b2 - 0.5 * b1).abs() < 0.1 * 0.5 * b1, "b1 {b1} b2 {b2}");
    }

    #[test]
    fn just_below_boundary_shows_catapult_signature() {
        // Slightly below the divergence boundary the loss spikes by at least
        // 2x its initial value before recovering to a lower minimum.
        let s0 = LinearToyState {
            w0: 0.5,
            w1: 1.2,
            w_ni: 0.6,
            m: 1.0,
            sigma_x: 1.0,
            sigma_eps: 0.0,
            eta: 0.05,
            phi_mode: PhiMode::Drop,
        };
        let boundary = toy_phase_boundary(&s0, 5000, 1e9).unwrap();
        let mut s = LinearToyState { sigma_eps: (0.9 * boundary).sqrt(), ..s0 };
        let init = toy_loss(&s, None).unwrap();
        let mut peak = init;
        for _ in 0..4000 {
            s = toy_step(&s);
            peak = peak.max(toy_loss(&s, None).unwrap());
        }
        let fin = toy_loss(&s, None).unwrap();
        assert!(peak >= 2.0 * init, "peak {peak} vs init {init}");
        assert!(fin < init, "final {fin} vs init {init}");
    }

    #[test]
    fn continuous_time_limit_does_not_diverge() {
        // Forward-Euler refinement: η → η/k with k·steps keeps total time
        // fixed. The discrete map diverges at large η·σ_ε²; the refined maps
        // do not — the continuous-time limit fails to see the catapult.
        let s = LinearToyState {
            w0: 0.0,
            m: 0.0,
            w1: 1.0,
            w_ni: 1.0,
            sigma_eps: 0.0,
            eta: 0.05,
            ..base()
        };
        let sig2 = 3.0 / s.eta; // well above the boundary 2/η
        assert!(toy_diverges(&s, sig2, 400));
        for k in [10usize, 100] {
            let refined = LinearToyState { eta: s.eta / k as f64, ..s };
            assert!(
                !toy_diverges(&refined, sig2, 400 * k),
                "refined map (k = {k}) must not diverge"
            );
        }
    }

    #[test]
    fn monotone_loss_below_half_boundary() {
        let s0 = LinearToyState {
            w0: 0.5,
            w1: 1.2,
            w_ni: 0.6,
            m: 1.0,
            sigma_x: 1.0,
            sigma_eps: 0.0,
            eta: 0.05,
            phi_mode: PhiMode::Drop,
        };
        let boundary = toy_phase_boundary(&s0, 5000, 1e9).unwrap();
        let mut s = LinearToyState { sigma_eps: (0.4 * boundary).sqrt(), ..s0 };
        let mut prev = toy_loss(&s, None).unwrap();
        for _ in 0..500 {
            s = toy_step(&s);
            let cur = toy_loss(&s, None).unwrap();
            assert!(cur <= prev + 1e-12, "loss rose from {prev} to {cur}");
            prev = cur;
        }
    }
}
