//! Experiment configuration (JSON) and its validation and hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tailspace_core::adapter::InitStrategy;
use tailspace_core::calibration::{CalibrationOptions, CalibrationSource, CovarianceMode, DEFAULT_SAMPLES};
use tailspace_core::model::{validate_specs, LinearSpec, ToyModel};
use tailspace_core::rng::derive_seed;
use tailspace_core::task::TaskSpec;
use tailspace_core::train::TrainConfig;

use crate::artifacts::read_text;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: Vec<LinearSpec>,
    /// Weights are drawn `N(0, gain² / d_in)`.
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default = "default_bias_std")]
    pub bias_std: f64,
}

fn one() -> f64 {
    1.0
}

fn default_bias_std() -> f64 {
    0.1
}

impl ModelConfig {
    /// The "pretrained" model for one grid seed.
    pub fn build(&self, seed: u64) -> Result<ToyModel> {
        Ok(ToyModel::random(self.layers.clone(), self.gain, self.bias_std, derive_seed(seed, "model"))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPolicy {
    #[default]
    EqualToRank,
    Fixed(f64),
}

impl AlphaPolicy {
    pub fn alpha(self, rank: usize) -> f64 {
        match self {
            AlphaPolicy::EqualToRank => rank as f64,
            AlphaPolicy::Fixed(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub n_samples: usize,
    pub source: CalibrationSource,
    pub mode: CovarianceMode,
    /// Samples per forward pass (one accumulator batch each).
    pub batch_size: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let opts = CalibrationOptions::default();
        Self { n_samples: DEFAULT_SAMPLES, source: CalibrationSource::Downstream, mode: opts.mode, batch_size: opts.batch_size }
    }
}

impl CalibrationConfig {
    pub fn options(&self) -> CalibrationOptions {
        CalibrationOptions { mode: self.mode, batch_size: self.batch_size }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub strategies: Vec<InitStrategy>,
    pub ranks: Vec<usize>,
    /// One grid cell per seed; each seed fixes the model, task, adapter
    /// initialization and shuffle order of its runs.
    pub seeds: Vec<u64>,
    /// Layers that receive adapters; empty means every layer.
    #[serde(default)]
    pub target_layers: Vec<String>,
    #[serde(default)]
    pub alpha: AlphaPolicy,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Run grid cells concurrently. Results do not depend on it.
    #[serde(default)]
    pub parallel: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Fields excluded from [`ExperimentConfig::hash`]: they change where or
/// how fast results are produced, never the results.
const UNHASHED_FIELDS: [&str; 2] = ["output_dir", "parallel"];

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?).map_err(|e| match e {
            LabError::Json(j) => LabError::format(path.display().to_string(), j.to_string()),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn targets(&self) -> Vec<String> {
        if self.target_layers.is_empty() {
            self.model.layers.iter().map(|s| s.name.clone()).collect()
        } else {
            self.target_layers.clone()
        }
    }

    /// Every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let specs = &self.model.layers;
        if specs.is_empty() {
            out.push("model has no layers".into());
        } else if let Err(e) = validate_specs(specs) {
            out.push(format!("model: {e}"));
        }
        for s in specs {
            if s.name.is_empty() || s.name.contains(|c: char| c == ',' || c == '/' || c == '\\' || c.is_whitespace()) {
                out.push(format!("layer name `{}` must be non-empty without commas, slashes or whitespace", s.name));
            }
        }
        if !(self.model.gain.is_finite() && self.model.gain > 0.0) {
            out.push("model gain must be positive".into());
        }
        if !(self.model.bias_std.is_finite() && self.model.bias_std >= 0.0) {
            out.push("model bias_std must be non-negative".into());
        }
        let d_in = specs.first().map_or(0, |s| s.d_in);
        let d_out = specs.last().map_or(0, |s| s.d_out);
        out.extend(self.task.violations(d_in, d_out));
        if self.strategies.is_empty() {
            out.push("strategies must not be empty".into());
        }
        if self.ranks.is_empty() {
            out.push("ranks must not be empty".into());
        }
        if self.seeds.is_empty() {
            out.push("seeds must not be empty".into());
        }
        for (what, dup) in [
            ("strategy", has_duplicates(&self.strategies.iter().map(|s| s.to_string()).collect::<Vec<_>>())),
            ("rank", has_duplicates(&self.ranks)),
            ("seed", has_duplicates(&self.seeds)),
            ("target layer", has_duplicates(&self.target_layers)),
        ] {
            if dup {
                out.push(format!("duplicate {what} entries"));
            }
        }
        let targets = self.targets();
        for t in &targets {
            match specs.iter().find(|s| &s.name == t) {
                None => out.push(format!("unknown target layer `{t}`")),
                Some(s) => {
                    let max = s.d_in.min(s.d_out);
                    for &r in &self.ranks {
                        if r == 0 || r > max {
                            out.push(format!("rank {r} out of range 1..={max} for layer `{t}`"));
                        }
                    }
                }
            }
        }
        if let AlphaPolicy::Fixed(a) = self.alpha {
            if !(a.is_finite() && a > 0.0) {
                out.push("fixed alpha must be positive".into());
            }
        }
        if self.calibration.n_samples == 0 {
            out.push("calibration n_samples must be at least 1".into());
        }
        if self.calibration.batch_size == 0 {
            out.push("calibration batch_size must be at least 1".into());
        }
        out.extend(self.train.violations().into_iter().map(|v| format!("train: {v}")));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(LabError::Validation(v))
        }
    }

    /// Hex SHA-256 of the canonical JSON form, without output location and
    /// scheduling fields.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            for f in UNHASHED_FIELDS {
                map.remove(f);
            }
        }
        // serde_json maps are sorted, so this rendering is canonical.
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items.iter().enumerate().any(|(i, x)| items[..i].contains(x))
}
