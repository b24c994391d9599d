//! A self-contained feed-forward neural-network training laboratory built
//! around noise injection node regularization (NINR): extra input nodes fed
//! pure noise through trainable weights, whose training dynamics induce an
//! emergent regularizer on the rest of the network.
//!
//! The crate provides:
//!
//! * [`tensor`] / [`rng`] / [`noise`] — deterministic f64 tensor arithmetic,
//!   seeded and forkable random streams, and the injected-noise distributions.
//! * [`network`] — feed-forward specs (dense / conv2d / batchnorm / maxpool /
//!   dropout), forward evaluation with noise-injection nodes, and exact
//!   reverse-mode gradients for every parameter including the noise weights.
//! * [`training`] — SGD / RMSprop / Adam optimizers, baseline regularizers
//!   (L2, dropout, corrupted-data training), and the epoch loop that produces
//!   per-epoch [`training::TrainTrace`] records.
//! * [`diagnostics`] — numerical estimators for the emergent regularizers R1
//!   and R2, input-curvature measurement, the catapult noise-scale estimate,
//!   and the training-phase classifier.
//! * [`lineartoy`] — the exact univariate linear model (closed-form loss,
//!   R1/R2, coupled update map, divergence boundary) used as the analytic
//!   oracle for everything else.
//! * [`robustness`] — post-training evaluation under Gaussian input
//!   corruption, domain shift, and FGSM/PGD adversarial attacks.
//! * [`dataio`] — IDX and CIFAR-10 container parsing, standardization,
//!   target-domain reframing, and synthetic dataset generation.
//! * [`config`] / [`presets`] / [`manifest`] / [`runner`] — the experiment
//!   runner behind the `ninlab` command-line binary.

pub mod config;
pub mod dataio;
pub mod diagnostics;
pub mod lineartoy;
pub mod manifest;
pub mod network;
pub mod noise;
pub mod presets;
pub mod rng;
pub mod robustness;
pub mod runner;
pub mod tensor;
pub mod training;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
