//! Output-activation covariance calibration.
//!
//! A frozen model is run over a small calibration set and, for each target
//! layer, the batch of layer outputs `Y` (columns are samples) is folded
//! into a [`CovarianceAccumulator`]:
//!
//! ```text
//! Y      <- Y / max|Y|          (skipped when max|Y| < 1e-30)
//! Σ YYᵀ  += Y·Yᵀ
//! Σ y    += Y·1
//! count  += 1                   (per batch, not per column)
//! ```
//!
//! `finalize` divides by the batch count (second-moment mode) or forms
//! `E[yyᵀ] - E[y]E[y]ᵀ` over all columns seen (mean-centered mode).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::ToyModel;

/// Batches whose largest absolute entry is below this are not rescaled.
pub const MIN_SCALE: f64 = 1e-30;

/// Default calibration set size.
pub const DEFAULT_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CovarianceMode {
    /// Uncentered `Σ YYᵀ / batches`.
    #[default]
    SecondMoment,
    /// `E[yyᵀ] - E[y]E[y]ᵀ` over all accumulated columns.
    MeanCentered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CalibrationSource {
    /// Drawn from the task's own training distribution.
    #[default]
    Downstream,
    /// Drawn from a distribution unrelated to the task.
    General,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    /// `d_in × N`, one sample per column.
    pub samples: Matrix,
    pub source: CalibrationSource,
}

impl CalibrationSet {
    pub fn new(samples: Matrix, source: CalibrationSource) -> Self {
        Self { samples, source }
    }

    pub fn len(&self) -> usize {
        self.samples.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.rows()
    }

    /// Every sample multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self { samples: self.samples.scale(c), source: self.source }
    }
}

/// Streaming covariance state for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceAccumulator {
    dim: usize,
    sum_outer: Matrix,
    sum_vec: Vec<f64>,
    /// Number of accumulated batches.
    sample_count: usize,
    /// Number of accumulated columns, used by mean-centered mode.
    column_count: usize,
    /// Batches accepted without rescaling because they were (numerically) zero.
    zero_batches: usize,
    mode: CovarianceMode,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize, mode: CovarianceMode) -> Self {
        Self {
            dim,
            sum_outer: Matrix::zeros(dim, dim),
            sum_vec: alloc::vec![0.0; dim],
            sample_count: 0,
            column_count: 0,
            zero_batches: 0,
            mode,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    pub fn sum_outer(&self) -> &Matrix {
        &self.sum_outer
    }

    pub fn sum_vec(&self) -> &[f64] {
        &self.sum_vec
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn column_count(&self) -> usize {
        self.column_count
    }

    pub fn zero_batches(&self) -> usize {
        self.zero_batches
    }

    /// Folds one batch of layer outputs (`dim × batch`) into the state.
    pub fn accumulate(&mut self, y_batch: &Matrix) -> Result<()> {
        if y_batch.rows() != self.dim {
            return Err(Error::DimensionMismatch {
                op: "accumulate",
                left: (self.dim, self.dim),
                right: y_batch.shape(),
            });
        }
        let peak = y_batch.max_abs();
        let scaled;
        let y = if peak < MIN_SCALE {
            self.zero_batches += 1;
            y_batch
        } else {
            scaled = y_batch.scale(1.0 / peak);
            &scaled
        };
        self.sum_outer.add_scaled_in_place(1.0, &y.outer_gram())?;
        for (acc, s) in self.sum_vec.iter_mut().zip(y.row_sums()) {
            *acc += s;
        }
        self.sample_count += 1;
        self.column_count += y.cols();
        Ok(())
    }

    /// Adds another shard's state. Both must share dimension and mode.
    pub fn merge(&mut self, other: &CovarianceAccumulator) -> Result<()> {
        if other.dim != self.dim || other.mode != self.mode {
            return Err(Error::InvalidArgument("cannot merge accumulators of different dim or mode".into()));
        }
        self.sum_outer.add_scaled_in_place(1.0, &other.sum_outer)?;
        for (a, b) in self.sum_vec.iter_mut().zip(&other.sum_vec) {
            *a += b;
        }
        self.sample_count += other.sample_count;
        self.column_count += other.column_count;
        self.zero_batches += other.zero_batches;
        Ok(())
    }

    /// The finished covariance, exactly symmetric with non-negative diagonal.
    pub fn finalize(&self) -> Result<Matrix> {
        if self.sample_count == 0 {
            return Err(Error::EmptyCalibration);
        }
        let d = self.dim;
        let mut cov = match self.mode {
            CovarianceMode::SecondMoment => self.sum_outer.scale(1.0 / self.sample_count as f64),
            CovarianceMode::MeanCentered => {
                let n = self.column_count as f64;
                let mean: Vec<f64> = self.sum_vec.iter().map(|s| s / n).collect();
                Matrix::from_fn(d, d, |i, j| self.sum_outer.get(i, j) / n - mean[i] * mean[j])?
            }
        };
        for i in 0..d {
            for j in 0..i {
                cov[(i, j)] = cov[(j, i)];
            }
            if cov[(i, i)] < 0.0 {
                cov[(i, i)] = 0.0;
            }
        }
        Ok(cov)
    }
}

/// Calibration knobs shared by init-time calibration and spectral reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CalibrationOptions {
    pub mode: CovarianceMode,
    /// Samples per forward pass; each pass is one accumulator batch.
    pub batch_size: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { mode: CovarianceMode::SecondMoment, batch_size: 1 }
    }
}

/// Runs `model` over `data` and returns one accumulator per target layer,
/// fed with that layer's output `W·x + b` (before its activation).
pub fn calibrate_accumulators(
    model: &ToyModel,
    data: &CalibrationSet,
    targets: &[String],
    options: CalibrationOptions,
) -> Result<BTreeMap<String, CovarianceAccumulator>> {
    if data.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no target layers to calibrate".into()));
    }
    if options.batch_size == 0 {
        return Err(Error::InvalidArgument("calibration batch size must be positive".into()));
    }
    let mut slots = Vec::with_capacity(targets.len());
    for name in targets {
        let idx = model.layer_index(name)?;
        let dim = model.layers()[idx].spec.d_out;
        slots.push((name.clone(), idx, CovarianceAccumulator::new(dim, options.mode)));
    }
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + options.batch_size).min(n);
        let cols: Vec<usize> = (start..end).collect();
        let batch = data.samples.select_columns(&cols)?;
        let cache = model.forward(&batch)?;
        for (_, idx, acc) in &mut slots {
            acc.accumulate(cache.layer_output(*idx))?;
        }
        start = end;
    }
    Ok(slots.into_iter().map(|(name, _, acc)| (name, acc)).collect())
}

/// One finalized output-activation covariance per target layer.
pub fn calibrate_model(
    model: &ToyModel,
    data: &CalibrationSet,
    targets: &[String],
    options: CalibrationOptions,
) -> Result<BTreeMap<String, Matrix>> {
    calibrate_accumulators(model, data, targets, options)?
        .into_iter()
        .map(|(name, acc)| acc.finalize().map(|c| (name, c)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LinearSpec};
    use crate::rng::{gaussian_matrix, seeded};
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn orthonormal_columns_add_identity() {
        let mut acc = CovarianceAccumulator::new(2, CovarianceMode::SecondMoment);
        acc.accumulate(&Matrix::identity(2)).unwrap();
        assert_eq!(acc.sum_outer(), &Matrix::identity(2));
        assert_eq!(acc.sample_count(), 1);
        assert_eq!(acc.finalize().unwrap(), Matrix::identity(2));
    }

    #[test]
    fn batch_is_scaled_by_its_peak() {
        let mut acc = CovarianceAccumulator::new(2, CovarianceMode::SecondMoment);
        acc.accumulate(&Matrix::column(&[2.0, 0.0]).unwrap()).unwrap();
        assert_eq!(acc.sum_outer(), &Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap());
        assert_eq!(acc.sum_vec(), [1.0, 0.0]);
    }

    #[test]
    fn repeated_batch_doubles() {
        let y = gaussian_matrix(&mut seeded(1), 3, 4, 1.0);
        let mut acc = CovarianceAccumulator::new(3, CovarianceMode::SecondMoment);
        acc.accumulate(&y).unwrap();
        let once = acc.sum_outer().clone();
        acc.accumulate(&y).unwrap();
        assert_eq!(acc.sum_outer(), &once.scale(2.0));
        assert_eq!(acc.sample_count(), 2);
    }

    #[test]
    fn zero_batch_is_counted_without_scaling() {
        let mut acc = CovarianceAccumulator::new(2, CovarianceMode::SecondMoment);
        acc.accumulate(&Matrix::zeros(2, 3)).unwrap();
        assert_eq!(acc.zero_batches(), 1);
        assert_eq!(acc.sample_count(), 1);
        assert_eq!(acc.finalize().unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn constant_columns_have_zero_centered_covariance() {
        let mut acc = CovarianceAccumulator::new(3, CovarianceMode::MeanCentered);
        let c = Matrix::column(&[0.3, -1.2, 2.0]).unwrap();
        for _ in 0..5 {
            acc.accumulate(&c).unwrap();
        }
        assert!(acc.finalize().unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn centered_mode_matches_two_pass_covariance() {
        // One column per batch keeps every column on the same scale after
        // peak normalization, so the oracle can normalize columns up front.
        let y = gaussian_matrix(&mut seeded(4), 4, 50, 1.5);
        let mut acc = CovarianceAccumulator::new(4, CovarianceMode::MeanCentered);
        let mut cols = vec![];
        for j in 0..50 {
            let col = Matrix::column(&y.col(j)).unwrap();
            acc.accumulate(&col).unwrap();
            let peak = col.max_abs();
            cols.push(y.col(j).into_iter().map(|v| v / peak).collect::<Vec<_>>());
        }
        let n = cols.len() as f64;
        let mean: Vec<f64> = (0..4).map(|i| cols.iter().map(|c| c[i]).sum::<f64>() / n).collect();
        let oracle = Matrix::from_fn(4, 4, |i, j| {
            cols.iter().map(|c| (c[i] - mean[i]) * (c[j] - mean[j])).sum::<f64>() / n
        })
        .unwrap();
        assert!(acc.finalize().unwrap().max_abs_diff(&oracle) < 1e-10);
    }

    #[test]
    fn merging_shards_matches_sequential() {
        let y = gaussian_matrix(&mut seeded(5), 3, 12, 1.0);
        let mut seq = CovarianceAccumulator::new(3, CovarianceMode::MeanCentered);
        let mut left = seq.clone();
        let mut right = seq.clone();
        for j in 0..12 {
            let b = Matrix::column(&y.col(j)).unwrap();
            seq.accumulate(&b).unwrap();
            if j < 5 { left.accumulate(&b).unwrap() } else { right.accumulate(&b).unwrap() }
        }
        left.merge(&right).unwrap();
        assert!(left.finalize().unwrap().max_abs_diff(&seq.finalize().unwrap()) < 1e-10);
        assert_eq!(left.sample_count(), 12);
    }

    #[test]
    fn accumulation_order_does_not_matter() {
        let mut rng = seeded(6);
        let a = gaussian_matrix(&mut rng, 3, 2, 1.0);
        let b = gaussian_matrix(&mut rng, 3, 2, 1.0);
        let mut ab = CovarianceAccumulator::new(3, CovarianceMode::SecondMoment);
        ab.accumulate(&a).unwrap();
        ab.accumulate(&b).unwrap();
        let mut ba = CovarianceAccumulator::new(3, CovarianceMode::SecondMoment);
        ba.accumulate(&b).unwrap();
        ba.accumulate(&a).unwrap();
        assert!(ab.finalize().unwrap().max_abs_diff(&ba.finalize().unwrap()) < 1e-15);
    }

    #[test]
    fn errors() {
        let mut acc = CovarianceAccumulator::new(2, CovarianceMode::SecondMoment);
        assert_eq!(acc.finalize(), Err(Error::EmptyCalibration));
        assert!(acc.accumulate(&Matrix::zeros(3, 1)).is_err());
    }

    fn single_layer(weight: Matrix) -> ToyModel {
        let d = weight.rows();
        let n = weight.cols();
        ToyModel::from_params(vec![LinearSpec::new("proj.0", n, d, false, Activation::Relu)], vec![(weight, None)]).unwrap()
    }

    #[test]
    fn model_calibration_captures_pre_activation_outputs() {
        let w = Matrix::identity(3);
        let model = single_layer(w);
        let x = Matrix::from_rows(&[[1.0, 0.0, 0.0, -2.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]).unwrap();
        let data = CalibrationSet::new(x.clone(), CalibrationSource::Downstream);
        let covs = calibrate_model(&model, &data, &["proj.0".to_string()], CalibrationOptions::default()).unwrap();
        // Per-sample peak scaling: e1, e2, e3 and -e1 each contribute a unit outer product.
        let expected = Matrix::diag(&[2.0, 1.0, 1.0]).unwrap().scale(0.25);
        assert!(covs["proj.0"].max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn model_calibration_keys_and_determinism() {
        let specs = vec![
            LinearSpec::new("up.0", 4, 6, true, Activation::Gelu),
            LinearSpec::new("down.0", 6, 3, true, Activation::Identity),
        ];
        let model = ToyModel::random(specs, 1.0, 0.1, 2).unwrap();
        let data = CalibrationSet::new(gaussian_matrix(&mut seeded(3), 4, 16, 1.0), CalibrationSource::Downstream);
        let targets = vec!["up.0".to_string(), "down.0".to_string()];
        let opts = CalibrationOptions { mode: CovarianceMode::SecondMoment, batch_size: 4 };
        let a = calibrate_model(&model, &data, &targets, opts).unwrap();
        let b = calibrate_model(&model, &data, &targets, opts).unwrap();
        assert_eq!(a.keys().cloned().collect::<Vec<_>>(), ["down.0", "up.0"]);
        assert_eq!(a, b);
        assert!(calibrate_model(&model, &data, &["nope".to_string()], opts).is_err());
    }
}
