//! AdamW with a linear-warmup cosine schedule, and the training loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{loss, GradientSet, Targets, TensorId, ToyModel};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// Shuffle seed.
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 128,
            epochs: 1,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, not just the first.
    /// Negated comparisons so NaN fields are reported too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn violations(&self) -> Vec<alloc::string::String> {
        let mut out = Vec::new();
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            out.push(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            out.push(format!("warmup_ratio must lie in [0, 1), got {}", self.warmup_ratio));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            out.push("epochs must be at least 1".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            out.push(format!("weight_decay must be finite and non-negative, got {}", self.weight_decay));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            out.push("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            out.push("adam_eps must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            None => Ok(()),
            Some(v) => Err(Error::InvalidArgument(v)),
        }
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        libm::ceil(self.warmup_ratio * total_steps as f64) as usize
    }
}

/// Learning rate at `step` (0-based) of `total_steps`.
///
/// Linear warmup from 0 over `⌈warmup_ratio·total⌉` steps, then
/// `lr·(1 + cos(π·progress))/2` down to 0 at `total_steps`. If warmup covers
/// the whole run the peak rate is held after warmup.
pub fn lr_at(config: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let lr = config.learning_rate;
    let total = total_steps.max(1);
    let step = step.min(total);
    let warmup = config.warmup_steps(total);
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    let decay = total - warmup;
    if decay == 0 {
        return lr;
    }
    let progress = (step - warmup) as f64 / decay as f64;
    lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One decoupled-weight-decay Adam update on a flat tensor. `t` is the
/// 1-based step used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(param: &mut [f64], grad: &[f64], moments: &mut Moments, t: u64, lr: f64, config: &TrainConfig) {
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    let decay = 1.0 - lr * config.weight_decay;
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut moments.m).zip(&mut moments.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p *= decay;
        *p -= lr * m_hat / (libm::sqrt(v_hat) + config.adam_eps);
    }
}

/// AdamW state over a model's trainable tensors, zero-initialized when the
/// optimizer is created.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    config: TrainConfig,
    step: u64,
    state: BTreeMap<TensorId, Moments>,
}

impl AdamW {
    pub fn for_model(model: &ToyModel, config: &TrainConfig) -> Result<Self> {
        let mut state = BTreeMap::new();
        for id in model.trainable_ids() {
            let n = model.param(&id)?.len();
            state.insert(id, Moments { m: alloc::vec![0.0; n], v: alloc::vec![0.0; n] });
        }
        Ok(Self { config: config.clone(), step: 0, state })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: &TensorId) -> Option<&Moments> {
        self.state.get(id)
    }

    /// Applies one update with learning rate `lr`. Any non-finite gradient
    /// aborts before a single parameter is touched.
    pub fn step(&mut self, model: &mut ToyModel, grads: &GradientSet, lr: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite { context: format!("gradient of {id}") });
            }
            let Some(moments) = self.state.get(id) else {
                return Err(Error::LayerState(format!("optimizer has no state for {id}")));
            };
            if moments.m.len() != g.len() {
                return Err(Error::DimensionMismatch { op: "adamw_step", left: (moments.m.len(), 1), right: g.shape() });
            }
        }
        self.step += 1;
        for (id, g) in grads.iter() {
            let moments = self.state.get_mut(id).expect("checked above");
            let param = model.param_mut(id)?;
            adamw_update(param, g.as_slice(), moments, self.step, lr, &self.config);
        }
        Ok(())
    }
}

/// Training inputs (`d_in × N`) with matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        if inputs.cols() != targets.len() {
            return Err(Error::DimensionMismatch { op: "dataset", left: inputs.shape(), right: (targets.len(), 1) });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Matrix, Targets)> {
        Ok((self.inputs.select_columns(idx)?, self.targets.select(idx)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricLog {
    pub records: Vec<StepRecord>,
    /// Loss over the whole training set after the last step.
    pub final_loss: f64,
    pub steps: usize,
}

impl MetricLog {
    pub fn final_grad_norm(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.grad_norm)
    }
}

pub fn total_steps(config: &TrainConfig, n_samples: usize) -> usize {
    config.epochs * n_samples.div_ceil(config.batch_size)
}

/// Trains `model` in place. Batches follow a per-epoch seeded Fisher-Yates
/// shuffle; the last short batch of an epoch is kept.
pub fn run_training(model: &mut ToyModel, data: &Dataset, config: &TrainConfig) -> Result<MetricLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if data.inputs.rows() != model.d_in() {
        return Err(Error::DimensionMismatch { op: "run_training", left: (model.d_in(), 0), right: data.inputs.shape() });
    }
    let total = total_steps(config, data.len());
    let mut optimizer = AdamW::for_model(model, config)?;
    let mut rng = seeded(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let lr = lr_at(config, step - 1, total);
            let (x, t) = data.batch(chunk)?;
            let (l, grads) = model.loss_and_gradients(&x, &t)?;
            if !l.is_finite() {
                return Err(Error::NonFinite { context: format!("loss at step {step}") });
            }
            let grad_norm = grads.global_norm();
            optimizer.step(model, &grads, lr)?;
            records.push(StepRecord { step, lr, loss: l, grad_norm });
        }
    }
    let final_loss = loss(&model.predict(&data.inputs)?, &data.targets)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite { context: format!("final loss after step {step}") });
    }
    Ok(MetricLog { records, final_loss, steps: step })
}
