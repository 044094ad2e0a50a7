//! Seeded synthetic tasks.
//!
//! * Teacher-student regression: the teacher is a copy of the "pretrained"
//!   student whose layers are shifted by a rank-`teacher_rank` update; the
//!   targets are the teacher's outputs (plus optional noise), so closing the
//!   gap needs a low-rank change of the student. The output side of the
//!   shift either lies in the directions each student layer transmits most
//!   weakly ([`GapPlacement::Underused`]) or is uniformly random.
//! * Gaussian-cluster classification: `K` isotropic clusters with random
//!   centers, labels are the cluster index.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::calibration::{CalibrationSet, CalibrationSource};
use crate::error::{Error, Result};
use crate::linalg::{matmul_nt, thin_svd, Matrix, SvdSelection};
use crate::model::{LayerParams, Targets, ToyModel};
use crate::rng::{derive_seed, gaussian_matrix, random_orthonormal, seeded};
use crate::train::Dataset;

/// Where the output side of the teacher shift lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum GapPlacement {
    /// Span of the layer weight's smallest left singular vectors.
    #[default]
    Underused,
    /// Uniformly random orthonormal directions.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum TaskSpec {
    TeacherStudent {
        n_train: usize,
        teacher_rank: usize,
        /// Frobenius norm of each layer's teacher shift relative to the
        /// layer weight.
        shift: f64,
        #[cfg_attr(feature = "serde", serde(default))]
        noise_std: f64,
        #[cfg_attr(feature = "serde", serde(default))]
        gap: GapPlacement,
    },
    GaussianClasses {
        n_train: usize,
        classes: usize,
        /// Standard deviation of the cluster centers (clusters have unit
        /// variance).
        separation: f64,
    },
}

impl TaskSpec {
    pub fn n_train(&self) -> usize {
        match self {
            TaskSpec::TeacherStudent { n_train, .. } | TaskSpec::GaussianClasses { n_train, .. } => *n_train,
        }
    }

    pub fn violations(&self, d_in: usize, d_out: usize) -> Vec<alloc::string::String> {
        let mut out = Vec::new();
        if self.n_train() == 0 {
            out.push("task n_train must be at least 1".into());
        }
        match self {
            TaskSpec::TeacherStudent { teacher_rank, shift, noise_std, .. } => {
                if *teacher_rank == 0 {
                    out.push("teacher_rank must be at least 1".into());
                }
                if !(shift.is_finite() && *shift >= 0.0) || !(noise_std.is_finite() && *noise_std >= 0.0) {
                    out.push("teacher shift and noise must be finite and non-negative".into());
                }
            }
            TaskSpec::GaussianClasses { classes, separation, .. } => {
                if *classes < 2 || *classes > d_out {
                    out.push(format!("classes must lie in 2..={d_out} (model outputs)"));
                }
                if !(separation.is_finite() && *separation > 0.0) {
                    out.push("separation must be positive".into());
                }
            }
        }
        let _ = d_in;
        out
    }
}

/// A generated task: training data plus the means to draw calibration sets.
#[derive(Debug, Clone)]
pub struct Task {
    pub train: Dataset,
    /// Present for teacher-student tasks.
    pub teacher: Option<ToyModel>,
    seed: u64,
}

impl Task {
    /// Draws `n` calibration inputs. Downstream samples are a seeded random
    /// subset of the training inputs (with replacement only when `n`
    /// exceeds the training set); general samples are isotropic Gaussians
    /// unrelated to the task.
    pub fn calibration_set(&self, n: usize, source: CalibrationSource) -> Result<CalibrationSet> {
        if n == 0 {
            return Err(Error::EmptyCalibration);
        }
        let d = self.train.inputs.rows();
        let samples = match source {
            CalibrationSource::Downstream => {
                let mut rng = seeded(derive_seed(self.seed, "calibration/downstream"));
                let total = self.train.len();
                let idx: Vec<usize> = if n <= total {
                    rand::seq::index::sample(&mut rng, total, n).into_vec()
                } else {
                    (0..n).map(|_| rng.gen_range(0..total)).collect()
                };
                self.train.inputs.select_columns(&idx)?
            }
            CalibrationSource::General => {
                let mut rng = seeded(derive_seed(self.seed, "calibration/general"));
                gaussian_matrix(&mut rng, d, n, 1.0)
            }
        };
        Ok(CalibrationSet::new(samples, source))
    }
}

/// Builds the task for `student` (the pretrained model adapters will be
/// attached to).
pub fn generate(spec: &TaskSpec, student: &ToyModel, seed: u64) -> Result<Task> {
    let errs = spec.violations(student.d_in(), student.d_out());
    if let Some(e) = errs.into_iter().next() {
        return Err(Error::InvalidArgument(e));
    }
    match spec {
        TaskSpec::TeacherStudent { n_train, teacher_rank, shift, noise_std, gap } => {
            let teacher = make_teacher(student, *teacher_rank, *shift, *gap, derive_seed(seed, "teacher"))?;
            let mut rng = seeded(derive_seed(seed, "inputs"));
            let inputs = gaussian_matrix(&mut rng, student.d_in(), *n_train, 1.0);
            let mut targets = teacher.predict(&inputs)?;
            if *noise_std > 0.0 {
                let mut nrng = seeded(derive_seed(seed, "noise"));
                let noise = gaussian_matrix(&mut nrng, targets.rows(), targets.cols(), *noise_std);
                targets.add_scaled_in_place(1.0, &noise)?;
            }
            Ok(Task { train: Dataset::new(inputs, Targets::Regression(targets))?, teacher: Some(teacher), seed })
        }
        TaskSpec::GaussianClasses { n_train, classes, separation } => {
            let d = student.d_in();
            let mut rng = seeded(derive_seed(seed, "clusters"));
            let centers = gaussian_matrix(&mut rng, d, *classes, *separation);
            let labels: Vec<usize> = (0..*n_train).map(|_| rng.gen_range(0..*classes)).collect();
            let noise = gaussian_matrix(&mut rng, d, *n_train, 1.0);
            let inputs = Matrix::from_fn(d, *n_train, |i, j| centers.get(i, labels[j]) + noise.get(i, j))?;
            Ok(Task { train: Dataset::new(inputs, Targets::Classes(labels))?, teacher: None, seed })
        }
    }
}

/// Copy of `student` with every layer weight `W` shifted by `c·U·Vᵀ`, where
/// `V` is a random orthonormal `d_in × rank` basis, `U` is chosen by `gap`,
/// and `c` makes the shift's Frobenius norm `shift · ‖W‖_F`.
fn make_teacher(student: &ToyModel, rank: usize, shift: f64, gap: GapPlacement, seed: u64) -> Result<ToyModel> {
    let mut rng = seeded(seed);
    let mut layers = student.layers().to_vec();
    for layer in &mut layers {
        let LayerParams::Pristine { weight, .. } = &mut layer.params else {
            return Err(Error::LayerState("teacher must be built from a pristine student".into()));
        };
        let (m, n) = weight.shape();
        let r = rank.min(m).min(n);
        let random_u = random_orthonormal(&mut rng, m, r);
        let v = random_orthonormal(&mut rng, n, r);
        let u = match gap {
            GapPlacement::Random => random_u,
            GapPlacement::Underused => thin_svd(weight, r, SvdSelection::Bottom)?.u,
        };
        let delta = matmul_nt(&u, &v)?;
        let scale = shift * weight.frobenius_norm() / delta.frobenius_norm();
        weight.add_scaled_in_place(scale, &delta)?;
    }
    ToyModel::from_layers(layers)
}
