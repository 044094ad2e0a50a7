//! Spectral diagnostics of output activations: effective rank and the
//! main/tail energy split.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::calibration::{calibrate_model, CalibrationOptions, CalibrationSet};
use crate::error::{Error, Result};
use crate::linalg::{sym_eigh, EigenSystem};
use crate::model::ToyModel;

/// Normalized eigenvalues below this contribute nothing to the entropy.
pub const ENTROPY_FLOOR: f64 = 1e-15;

/// `exp(-Σ λ̃ ln λ̃)` with `λ̃ = λ / Σλ`. Negative roundoff is clamped to 0.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
pub fn effective_rank(eigenvalues: &[f64]) -> Result<f64> {
    let total: f64 = eigenvalues.iter().map(|l| l.max(0.0)).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidArgument("effective rank of an all-zero spectrum".into()));
    }
    let entropy: f64 = eigenvalues
        .iter()
        .map(|l| l.max(0.0) / total)
        .filter(|&p| p >= ENTROPY_FLOOR)
        .map(|p| -p * libm::log(p))
        .sum();
    Ok(libm::exp(entropy))
}

/// Sums of the leading `d - r` and trailing `r` eigenvalues.
pub fn energy_split(eigensystem: &EigenSystem, r: usize) -> Result<(f64, f64)> {
    let d = eigensystem.dim();
    if r == 0 || r >= d {
        return Err(Error::InvalidRank { rank: r, max: d.saturating_sub(1) });
    }
    let main = eigensystem.eigenvalues[..d - r].iter().sum();
    let tail = eigensystem.eigenvalues[d - r..].iter().sum();
    Ok((main, tail))
}

/// Splits `"<type>.<index>"`; names without a numeric suffix get index 0.
pub fn layer_type_and_index(name: &str) -> (String, usize) {
    match name.rsplit_once('.') {
        Some((kind, idx)) if !kind.is_empty() => match idx.parse() {
            Ok(i) => (kind.to_string(), i),
            Err(_) => (name.to_string(), 0),
        },
        _ => (name.to_string(), 0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRank {
    pub layer: String,
    pub kind: String,
    pub index: usize,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub effective_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EffectiveRankReport {
    pub layers: Vec<LayerRank>,
    /// Sum of per-layer effective ranks for each layer type.
    pub by_type: BTreeMap<String, f64>,
}

impl EffectiveRankReport {
    pub fn from_layers(layers: Vec<LayerRank>) -> Self {
        let mut by_type = BTreeMap::new();
        for l in &layers {
            *by_type.entry(l.kind.clone()).or_insert(0.0) += l.effective_rank;
        }
        Self { layers, by_type }
    }

    /// Sum over all layer types.
    pub fn total(&self) -> f64 {
        self.by_type.values().sum()
    }
}

/// Calibrates `model` on `data` and reports the effective rank of every
/// target layer's output-activation covariance.
pub fn spectral_report(
    model: &ToyModel,
    data: &CalibrationSet,
    targets: &[String],
    options: CalibrationOptions,
) -> Result<EffectiveRankReport> {
    let covs = calibrate_model(model, data, targets, options)?;
    let mut layers = Vec::with_capacity(targets.len());
    for name in targets {
        let es = sym_eigh(&covs[name])?;
        let (kind, index) = layer_type_and_index(name);
        let effective_rank = effective_rank(&es.eigenvalues)?;
        layers.push(LayerRank { layer: name.clone(), kind, index, eigenvalues: es.eigenvalues, effective_rank });
    }
    Ok(EffectiveRankReport::from_layers(layers))
}
