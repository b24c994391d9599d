//! The injected-noise distributions.
//!
//! Noise injection nodes are fed i.i.d. draws ε from one of three zero-scale
//! families: a centered normal with standard deviation σ_ε, a uniform on
//! [−σ_ε, +σ_ε], or a two-mode Gaussian mixture peaked at ±σ_ε.

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::{Error, Result};

/// Which family the noise is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Normal,
    Uniform,
    DoubleGaussian,
}

/// A fully specified injected-noise distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseDistribution {
    pub kind: NoiseKind,
    /// Scale σ_ε: std of the normal, half-width of the uniform, mode location
    /// of the double-gaussian.
    pub sigma_eps: f64,
    /// Double-gaussian only: weight of the +σ_ε component (0.5 = symmetric).
    pub mix_weight: f64,
    /// Double-gaussian only: std of each mode.
    pub component_std: f64,
}

impl NoiseDistribution {
    pub fn normal(sigma_eps: f64) -> Self {
        NoiseDistribution {
            kind: NoiseKind::Normal,
            sigma_eps,
            mix_weight: 0.5,
            component_std: 0.0,
        }
    }

    pub fn uniform(sigma_eps: f64) -> Self {
        NoiseDistribution {
            kind: NoiseKind::Uniform,
            sigma_eps,
            mix_weight: 0.5,
            component_std: 0.0,
        }
    }

    /// Mixture `mix_weight·N(+σ_ε, component_std²) + (1−mix_weight)·N(−σ_ε,
    /// component_std²)`. The conventional default width is σ_ε/5.
    pub fn double_gaussian(sigma_eps: f64, mix_weight: f64, component_std: f64) -> Self {
        NoiseDistribution { kind: NoiseKind::DoubleGaussian, sigma_eps, mix_weight, component_std }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_eps > 0.0) {
            return Err(Error::Config(format!(
                "noise scale sigma_eps must be > 0, got {}",
                self.sigma_eps
            )));
        }
        if self.kind == NoiseKind::DoubleGaussian {
            if !(0.0..=1.0).contains(&self.mix_weight) {
                return Err(Error::Config(format!(
                    "mix_weight must lie in [0,1], got {}",
                    self.mix_weight
                )));
            }
            if self.component_std < 0.0 {
                return Err(Error::Config(format!(
                    "component_std must be >= 0, got {}",
                    self.component_std
                )));
            }
        }
        Ok(())
    }

    /// Analytic mean of the distribution.
    pub fn mean(&self) -> f64 {
        match self.kind {
            NoiseKind::Normal | NoiseKind::Uniform => 0.0,
            NoiseKind::DoubleGaussian => (2.0 * self.mix_weight - 1.0) * self.sigma_eps,
        }
    }

    /// Analytic variance of the distribution.
    pub fn variance(&self) -> f64 {
        match self.kind {
            NoiseKind::Normal => self.sigma_eps * self.sigma_eps,
            NoiseKind::Uniform => self.sigma_eps * self.sigma_eps / 3.0,
            NoiseKind::DoubleGaussian => {
                let m = self.mean();
                self.component_std * self.component_std + self.sigma_eps * self.sigma_eps
                    - m * m
            }
        }
    }

    fn draw(&self, rng: &mut RngStream) -> f64 {
        match self.kind {
            NoiseKind::Normal => self.sigma_eps * rng.next_standard_normal(),
            NoiseKind::Uniform => self.sigma_eps * (2.0 * rng.next_uniform() - 1.0),
            NoiseKind::DoubleGaussian => {
                let center =
                    if rng.next_uniform() < self.mix_weight { self.sigma_eps } else { -self.sigma_eps };
                center + self.component_std * rng.next_standard_normal()
            }
        }
    }
}

/// `n` i.i.d. draws from `dist`, advancing `rng`.
pub fn sample_noise(dist: &NoiseDistribution, n: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    dist.validate()?;
    Ok((0..n).map(|_| dist.draw(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn degenerate_scale_is_numerically_zero() {
        let mut rng = RngStream::new(0);
        let dist = NoiseDistribution::normal(1e-300);
        for eps in sample_noise(&dist, 1000, &mut rng).unwrap() {
            assert!(eps.abs() < 1e-100);
        }
    }

    #[test]
    fn normal_moments_match() {
        let mut rng = RngStream::new(1);
        let dist = NoiseDistribution::normal(2.0);
        let draws = sample_noise(&dist, 1_000_000, &mut rng).unwrap();
        let (mean, var) = moments(&draws);
        assert!(mean.abs() < 0.008, "mean {mean}"); // 4 sigma_eps / sqrt(n)
        assert!((var - 4.0).abs() < 0.08, "var {var}");
    }

    #[test]
    fn uniform_moments_match() {
        let mut rng = RngStream::new(2);
        let dist = NoiseDistribution::uniform(3.0);
        let draws = sample_noise(&dist, 1_000_000, &mut rng).unwrap();
        let (mean, var) = moments(&draws);
        assert!(mean.abs() < 5.0 * 3.0 / (3f64.sqrt() * 1000.0));
        assert!((var - 3.0).abs() < 0.02 * 3.0, "uniform variance {var} vs 3");
        assert!(draws.iter().all(|x| x.abs() <= 3.0));
    }

    #[test]
    fn double_gaussian_point_mass_case() {
        let mut rng = RngStream::new(3);
        let dist = NoiseDistribution::double_gaussian(1.5, 1.0, 0.0);
        for eps in sample_noise(&dist, 1000, &mut rng).unwrap() {
            assert_eq!(eps, 1.5);
        }
    }

    #[test]
    fn double_gaussian_mean_matches_mixture_formula() {
        let mut rng = RngStream::new(4);
        let dist = NoiseDistribution::double_gaussian(2.0, 0.75, 0.4);
        let draws = sample_noise(&dist, 1_000_000, &mut rng).unwrap();
        let (mean, _) = moments(&draws);
        let want = dist.mean(); // (2*0.75 - 1) * 2 = 1.0
        let se = dist.variance().sqrt() / 1000.0;
        assert!((mean - want).abs() < 5.0 * se, "mean {mean} vs {want}");
    }

    #[test]
    fn invalid_scale_rejected() {
        let mut rng = RngStream::new(5);
        let dist = NoiseDistribution::normal(0.0);
        assert!(sample_noise(&dist, 1, &mut rng).is_err());
    }

    #[test]
    fn reproducible_across_streams() {
        let a = sample_noise(&NoiseDistribution::normal(1.0), 64, &mut RngStream::new(9)).unwrap();
        let b = sample_noise(&NoiseDistribution::normal(1.0), 64, &mut RngStream::new(9)).unwrap();
        let abits: Vec<u64> = a.iter().map(|x| x.to_bits()).collect();
        let bbits: Vec<u64> = b.iter().map(|x| x.to_bits()).collect();
        assert_eq!(abits, bbits);
    }
}
