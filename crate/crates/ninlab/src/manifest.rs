//! Run manifests and parameter checkpoints.
//!
//! Every CLI run writes a `manifest.json` next to its CSVs. The manifest
//! carries the fully resolved configuration snapshot, the code version, the
//! per-seed output paths, and wall-clock time — enough to re-run the
//! experiment byte-identically (`--config manifest.json` is accepted and
//! the embedded snapshot wins over the preset defaults).
//!
//! Checkpoints store every named parameter tensor (shape + row-major f64
//! values) as JSON, keyed by the stable names from
//! [`crate::network::Params::for_each_named`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::network::{NetworkSpec, Params};
use crate::presets::ExperimentConfig;
use crate::rng::RngStream;
use crate::training::init_params;
use crate::{Error, Result};

/// Files produced for one seed of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutputs {
    pub seed: u64,
    pub files: Vec<String>,
}

/// The reproducibility record for one CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Crate version that produced the run.
    pub code_version: String,
    /// Subcommand that produced the run.
    pub command: String,
    /// Fully resolved configuration (preset + file + flag overrides +
    /// scale), sufficient to re-run bit-identically.
    pub config: ExperimentConfig,
    pub outputs: Vec<SeedOutputs>,
    pub wall_clock_s: f64,
    /// Free-form numeric results worth pinning (e.g. located boundaries).
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: ExperimentConfig) -> Self {
        RunManifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            outputs: Vec::new(),
            wall_clock_s: 0.0,
            metrics: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, seed: u64, file: &str) {
        match self.outputs.iter_mut().find(|o| o.seed == seed) {
            Some(o) => o.files.push(file.to_string()),
            None => self.outputs.push(SeedOutputs { seed, files: vec![file.to_string()] }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One serialized tensor of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Serialize all parameters (layer weights, biases, batch-norm state, and
/// noise-injection weights) to JSON.
pub fn checkpoint_to_json(params: &Params) -> Result<String> {
    let mut map: BTreeMap<String, CheckpointTensor> = BTreeMap::new();
    params.for_each_named(|name, t| {
        map.insert(
            name.to_string(),
            CheckpointTensor { shape: t.shape().to_vec(), data: t.data().to_vec() },
        );
    });
    Ok(serde_json::to_string(&map)?)
}

/// Restore parameters for `spec` from checkpoint JSON. Names and shapes
/// must match the spec exactly.
pub fn checkpoint_from_json(spec: &NetworkSpec, json: &str) -> Result<Params> {
    let map: BTreeMap<String, CheckpointTensor> = serde_json::from_str(json)?;
    let mut params = init_params(spec, &mut RngStream::new(0))?;
    let mut missing = Vec::new();
    let mut shape_err = None;
    let mut seen = 0usize;
    params.for_each_named_mut(|name, t| {
        match map.get(name) {
            None => missing.push(name.to_string()),
            Some(ct) => {
                if ct.shape != t.shape() {
                    shape_err.get_or_insert_with(|| {
                        format!("{name}: checkpoint shape {:?} vs spec {:?}", ct.shape, t.shape())
                    });
                } else {
                    t.data_mut().copy_from_slice(&ct.data);
                    seen += 1;
                }
            }
        }
    });
    if let Some(msg) = shape_err {
        return Err(Error::Format(format!("checkpoint/spec mismatch: {msg}")));
    }
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint missing tensor(s): {}",
            missing.join(", ")
        )));
    }
    if seen != map.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, spec expects {seen}",
            map.len()
        )));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &Params, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(params)?)?;
    Ok(())
}

pub fn load_checkpoint(spec: &NetworkSpec, path: &Path) -> Result<Params> {
    let text = std::fs::read_to_string(path)?;
    checkpoint_from_json(spec, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, LayerSpec, LossKind, NetworkSpec, NinConfig, NinResample,
        NinTopology};
    use crate::noise::NoiseDistribution;
    use crate::presets::resolve_preset;

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: vec![4],
            layers: vec![
                LayerSpec::Dense { d_in: 4, d_out: 3, activation: Activation::Relu },
                LayerSpec::Dense { d_in: 3, d_out: 2, activation: Activation::Linear },
            ],
            loss: LossKind::Mse,
            nin: Some(NinConfig {
                topology: NinTopology::InputOnly,
                dist: NoiseDistribution::normal(1.0),
                resample: NinResample::PerSamplePerEpoch,
                shared_eps: false,
            }),
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let spec = small_spec();
        let params = init_params(&spec, &mut RngStream::new(42)).unwrap();
        let json = checkpoint_to_json(&params).unwrap();
        let restored = checkpoint_from_json(&spec, &json).unwrap();
        let mut equal = true;
        params.for_each_named(|name, t| {
            restored.for_each_named(|name2, t2| {
                if name == name2 && t != t2 {
                    equal = false;
                }
            });
        });
        assert!(equal);
    }

    #[test]
    fn checkpoint_spec_mismatch_is_detected() {
        let spec = small_spec();
        let params = init_params(&spec, &mut RngStream::new(42)).unwrap();
        let json = checkpoint_to_json(&params).unwrap();
        let mut other = small_spec();
        other.layers[0] = LayerSpec::Dense { d_in: 4, d_out: 5, activation: Activation::Relu };
        other.layers[1] = LayerSpec::Dense { d_in: 5, d_out: 2, activation: Activation::Linear };
        assert!(checkpoint_from_json(&other, &json).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("train", resolve_preset("robust-fc-base").unwrap());
        m.record(1, "trace_seed1.csv");
        m.record(1, "checkpoint_seed1.json");
        m.metrics.insert("final_test_acc".into(), 0.91);
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(m, back);
    }
}
