//! Toy feed-forward network with named linear layers that accept adapter
//! injection, plus exact analytic gradients.
//!
//! Batches are matrices whose columns are samples. Each layer computes
//! `act(W·x + b)`; an injected layer replaces `W·x + b` with the adapted
//! forward of [`AdaptedLayer`].
//!
//! The trainable set depends on the model state: with no adapter injected
//! every weight and bias trains (full fine-tuning); once any adapter is
//! injected only adapter factors train and everything else is frozen.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::adapter::{add_bias, AdaptedLayer};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::rng::{gaussian_matrix, seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Identity,
    Relu,
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_K * x * x * x))),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = libm::tanh(GELU_C * (x + GELU_K * x * x * x));
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LinearSpec {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_true"))]
    pub has_bias: bool,
    pub activation: Activation,
}

#[cfg(feature = "serde")]
fn default_true() -> bool {
    true
}

impl LinearSpec {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize, has_bias: bool, activation: Activation) -> Self {
        Self { name: name.into(), d_in, d_out, has_bias, activation }
    }
}

/// Checks that the specs form a valid chain with unique, non-empty names.
pub fn validate_specs(specs: &[LinearSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("model needs at least one layer".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.name.is_empty() || s.d_in == 0 || s.d_out == 0 {
            return Err(Error::InvalidArgument(format!("layer {i} has an empty name or zero dimension")));
        }
        if specs[..i].iter().any(|p| p.name == s.name) {
            return Err(Error::InvalidArgument(format!("duplicate layer name `{}`", s.name)));
        }
        if i > 0 && specs[i - 1].d_out != s.d_in {
            return Err(Error::InvalidArgument(format!(
                "layer `{}` expects {} inputs but `{}` produces {}",
                s.name,
                s.d_in,
                specs[i - 1].name,
                specs[i - 1].d_out
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Pristine { weight: Matrix, bias: Option<Vec<f64>> },
    Adapted(AdaptedLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LinearSpec,
    pub params: LayerParams,
}

impl Layer {
    pub fn is_adapted(&self) -> bool {
        matches!(self.params, LayerParams::Adapted(_))
    }

    /// The weight the layer currently applies (merged if adapted).
    pub fn effective_weight(&self) -> Matrix {
        match &self.params {
            LayerParams::Pristine { weight, .. } => weight.clone(),
            LayerParams::Adapted(a) => a.merge(),
        }
    }

    pub fn bias(&self) -> Option<&[f64]> {
        match &self.params {
            LayerParams::Pristine { bias, .. } => bias.as_deref(),
            LayerParams::Adapted(a) => a.bias.as_deref(),
        }
    }

    /// `W·x + b` (pre-activation), plus `A·x` for adapted layers.
    fn linear(&self, x: &Matrix) -> Result<(Matrix, Option<Matrix>)> {
        match &self.params {
            LayerParams::Pristine { weight, bias } => {
                let mut out = matmul(weight, x)?;
                if let Some(b) = bias {
                    add_bias(&mut out, b);
                }
                Ok((out, None))
            }
            LayerParams::Adapted(a) => a.forward_with_hidden(x).map(|(o, h)| (o, Some(h))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TensorKind {
    Weight,
    Bias,
    AdapterA,
    AdapterB,
}

/// Identifies one trainable tensor: `layer/kind`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId {
    pub layer: String,
    pub kind: TensorKind,
}

impl TensorId {
    pub fn new(layer: &str, kind: TensorKind) -> Self {
        Self { layer: layer.to_string(), kind }
    }
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            TensorKind::Weight => "weight",
            TensorKind::Bias => "bias",
            TensorKind::AdapterA => "lora_a",
            TensorKind::AdapterB => "lora_b",
        };
        write!(f, "{}/{}", self.layer, kind)
    }
}

/// Gradients keyed by tensor; biases are stored as `d_out × 1` columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    pub grads: BTreeMap<TensorId, Matrix>,
}

impl GradientSet {
    pub fn get(&self, id: &TensorId) -> Option<&Matrix> {
        self.grads.get(id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TensorId, &Matrix)> {
        self.grads.iter()
    }

    /// `√(Σ ‖g‖_F²)` over every tensor.
    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.grads.values().map(Matrix::frobenius_sq).sum())
    }
}

/// Training targets for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Regression targets, one column per sample (mean squared error).
    Regression(Matrix),
    /// Class index per sample (softmax cross-entropy over output rows).
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(m) => m.cols(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Targets for the listed samples, in order.
    pub fn select(&self, idx: &[usize]) -> Result<Targets> {
        Ok(match self {
            Targets::Regression(m) => Targets::Regression(m.select_columns(idx)?),
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
        })
    }
}

/// Intermediates saved by [`ToyModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
    /// `A·x` for adapted layers.
    hidden: Vec<Option<Matrix>>,
    pub output: Matrix,
}

impl ForwardCache {
    /// Pre-activation output (`W·x + b`) of layer `i`.
    pub fn layer_output(&self, i: usize) -> &Matrix {
        &self.pre[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    layers: Vec<Layer>,
    /// Bumped on every parameter mutation; caches from older generations
    /// are rejected.
    generation: u64,
}

impl ToyModel {
    /// Builds a model from explicit parameters.
    pub fn from_params(specs: Vec<LinearSpec>, params: Vec<(Matrix, Option<Vec<f64>>)>) -> Result<Self> {
        validate_specs(&specs)?;
        if specs.len() != params.len() {
            return Err(Error::InvalidArgument("one parameter set per layer expected".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (spec, (weight, bias)) in specs.into_iter().zip(params) {
            if weight.shape() != (spec.d_out, spec.d_in) {
                return Err(Error::DimensionMismatch { op: "layer weight", left: (spec.d_out, spec.d_in), right: weight.shape() });
            }
            match &bias {
                Some(b) if b.len() != spec.d_out || !spec.has_bias => {
                    return Err(Error::InvalidArgument(format!("bias of `{}` does not match its spec", spec.name)))
                }
                None if spec.has_bias => {
                    return Err(Error::InvalidArgument(format!("layer `{}` expects a bias", spec.name)))
                }
                _ => {}
            }
            if bias.as_ref().is_some_and(|b| b.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite { context: format!("bias of `{}`", spec.name) });
            }
            layers.push(Layer { spec, params: LayerParams::Pristine { weight, bias } });
        }
        Ok(Self { layers, generation: 0 })
    }

    /// Random model: weights `N(0, gain²/d_in)`, biases `N(0, bias_std²)`.
    pub fn random(specs: Vec<LinearSpec>, gain: f64, bias_std: f64, seed: u64) -> Result<Self> {
        validate_specs(&specs)?;
        let mut rng: Rng = seeded(seed);
        let params = specs
            .iter()
            .map(|s| {
                let w = gaussian_matrix(&mut rng, s.d_out, s.d_in, gain / libm::sqrt(s.d_in as f64));
                let b = s.has_bias.then(|| gaussian_matrix(&mut rng, s.d_out, 1, bias_std).into_vec());
                (w, b)
            })
            .collect();
        Self::from_params(specs, params)
    }

    /// Rebuilds a model from layers, e.g. when loading a checkpoint.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<LinearSpec> = layers.iter().map(|l| l.spec.clone()).collect();
        validate_specs(&specs)?;
        for l in &layers {
            let w = l.effective_weight();
            if w.shape() != (l.spec.d_out, l.spec.d_in) {
                return Err(Error::DimensionMismatch { op: "layer weight", left: (l.spec.d_out, l.spec.d_in), right: w.shape() });
            }
        }
        Ok(Self { layers, generation: 0 })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LinearSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.spec.name.clone()).collect()
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].spec.d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.d_out
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.spec.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn layer(&self, name: &str) -> Result<&Layer> {
        Ok(&self.layers[self.layer_index(name)?])
    }

    pub fn adapted(&self, name: &str) -> Result<&AdaptedLayer> {
        match &self.layer(name)?.params {
            LayerParams::Adapted(a) => Ok(a),
            LayerParams::Pristine { .. } => Err(Error::LayerState(format!("layer `{name}` has no adapter"))),
        }
    }

    pub fn has_adapters(&self) -> bool {
        self.layers.iter().any(Layer::is_adapted)
    }

    /// Replaces a pristine layer with an adapted one built from its weight.
    /// The layer's bias moves into the adapted layer unchanged.
    pub fn inject_with(
        &mut self,
        name: &str,
        init: impl FnOnce(&Matrix) -> Result<AdaptedLayer>,
    ) -> Result<()> {
        let idx = self.layer_index(name)?;
        let layer = &mut self.layers[idx];
        let (weight, bias) = match &layer.params {
            LayerParams::Pristine { weight, bias } => (weight, bias),
            LayerParams::Adapted(_) => {
                return Err(Error::LayerState(format!("layer `{name}` already carries an adapter")))
            }
        };
        let adapted = init(weight)?.with_bias(bias.clone());
        if adapted.w_frozen.shape() != weight.shape() || adapted.w_original != *weight {
            return Err(Error::LayerState(format!("adapter for `{name}` was built from a different weight")));
        }
        layer.params = LayerParams::Adapted(adapted);
        self.generation += 1;
        Ok(())
    }

    /// Tensors that receive gradients in the current mode, in layer order.
    pub fn trainable_ids(&self) -> Vec<TensorId> {
        let adapters = self.has_adapters();
        let mut ids = Vec::new();
        for l in &self.layers {
            let name = &l.spec.name;
            match (&l.params, adapters) {
                (LayerParams::Adapted(_), _) => {
                    ids.push(TensorId::new(name, TensorKind::AdapterA));
                    ids.push(TensorId::new(name, TensorKind::AdapterB));
                }
                (LayerParams::Pristine { bias, .. }, false) => {
                    ids.push(TensorId::new(name, TensorKind::Weight));
                    if bias.is_some() {
                        ids.push(TensorId::new(name, TensorKind::Bias));
                    }
                }
                (LayerParams::Pristine { .. }, true) => {}
            }
        }
        ids
    }

    /// Total number of trainable scalars.
    pub fn trainable_parameter_count(&self) -> usize {
        self.trainable_ids().iter().map(|id| self.param(id).map_or(0, <[f64]>::len)).sum()
    }

    /// Read access to any parameter tensor as a flat slice.
    pub fn param(&self, id: &TensorId) -> Result<&[f64]> {
        let layer = self.layer(&id.layer)?;
        let missing = || Error::LayerState(format!("no tensor {id}"));
        match (&layer.params, id.kind) {
            (LayerParams::Pristine { weight, .. }, TensorKind::Weight) => Ok(weight.as_slice()),
            (LayerParams::Pristine { bias, .. }, TensorKind::Bias) => bias.as_deref().ok_or_else(missing),
            (LayerParams::Adapted(a), TensorKind::AdapterA) => Ok(a.adapter.a.as_slice()),
            (LayerParams::Adapted(a), TensorKind::AdapterB) => Ok(a.adapter.b.as_slice()),
            (LayerParams::Adapted(a), TensorKind::Weight) => Ok(a.w_frozen.as_slice()),
            (LayerParams::Adapted(a), TensorKind::Bias) => a.bias.as_deref().ok_or_else(missing),
            _ => Err(missing()),
        }
    }

    /// Mutable access to a trainable tensor. Frozen tensors are refused.
    pub fn param_mut(&mut self, id: &TensorId) -> Result<&mut [f64]> {
        let adapters = self.has_adapters();
        let idx = self.layer_index(&id.layer)?;
        self.generation += 1;
        let missing = || Error::LayerState(format!("tensor {id} is not trainable"));
        match (&mut self.layers[idx].params, id.kind) {
            (LayerParams::Pristine { weight, .. }, TensorKind::Weight) if !adapters => Ok(weight.as_mut_slice()),
            (LayerParams::Pristine { bias: Some(b), .. }, TensorKind::Bias) if !adapters => Ok(b.as_mut_slice()),
            (LayerParams::Adapted(a), TensorKind::AdapterA) => Ok(a.adapter.a.as_mut_slice()),
            (LayerParams::Adapted(a), TensorKind::AdapterB) => Ok(a.adapter.b.as_mut_slice()),
            _ => Err(missing()),
        }
    }

    /// Runs the network, keeping what [`ToyModel::backward`] needs.
    pub fn forward(&self, inputs: &Matrix) -> Result<ForwardCache> {
        if inputs.rows() != self.d_in() {
            return Err(Error::DimensionMismatch { op: "forward", left: (self.d_in(), 0), right: inputs.shape() });
        }
        let n = self.layers.len();
        let mut cache_inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut hidden = Vec::with_capacity(n);
        let mut x = inputs.clone();
        for layer in &self.layers {
            let (z, h) = layer.linear(&x)?;
            let act = layer.spec.activation;
            let next = if act == Activation::Identity { z.clone() } else { z.map(|v| act.apply(v)) };
            cache_inputs.push(core::mem::replace(&mut x, next));
            pre.push(z);
            hidden.push(h);
        }
        Ok(ForwardCache { generation: self.generation, inputs: cache_inputs, pre, hidden, output: x })
    }

    /// Network output only.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        self.forward(inputs).map(|c| c.output)
    }

    /// Gradients of the loss with respect to every trainable tensor.
    pub fn backward(&self, cache: &ForwardCache, targets: &Targets) -> Result<GradientSet> {
        if cache.generation != self.generation || cache.pre.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        let (_, mut upstream) = loss_and_grad(&cache.output, targets)?;
        let adapters = self.has_adapters();
        let mut grads = BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.spec.activation;
            let dz = if act == Activation::Identity {
                upstream
            } else {
                upstream.hadamard(&cache.pre[i].map(|v| act.derivative(v)))?
            };
            let x = &cache.inputs[i];
            let name = &layer.spec.name;
            let need_input_grad = i > 0;
            upstream = match &layer.params {
                LayerParams::Pristine { weight, bias } => {
                    if !adapters {
                        grads.insert(TensorId::new(name, TensorKind::Weight), matmul_nt(&dz, x)?);
                        if bias.is_some() {
                            grads.insert(TensorId::new(name, TensorKind::Bias), Matrix::column(&dz.row_sums())?);
                        }
                    }
                    if need_input_grad {
                        matmul_tn(weight, &dz)?
                    } else {
                        dz
                    }
                }
                LayerParams::Adapted(a) => {
                    let s = a.scaling();
                    let h = cache.hidden[i].as_ref().ok_or(Error::StaleCache)?;
                    let bt_dz = matmul_tn(&a.adapter.b, &dz)?;
                    grads.insert(TensorId::new(name, TensorKind::AdapterA), matmul_nt(&bt_dz, x)?.scale(s));
                    grads.insert(TensorId::new(name, TensorKind::AdapterB), matmul_nt(&dz, h)?.scale(s));
                    if need_input_grad {
                        let mut dx = matmul_tn(&a.w_frozen, &dz)?;
                        dx.add_scaled_in_place(s, &matmul_tn(&a.adapter.a, &bt_dz)?)?;
                        dx
                    } else {
                        dz
                    }
                }
            };
        }
        Ok(GradientSet { grads })
    }

    /// Forward + loss + backward on one batch.
    pub fn loss_and_gradients(&self, inputs: &Matrix, targets: &Targets) -> Result<(f64, GradientSet)> {
        let cache = self.forward(inputs)?;
        let l = loss(&cache.output, targets)?;
        Ok((l, self.backward(&cache, targets)?))
    }
}

/// Mean squared error over all entries, or mean softmax cross-entropy.
pub fn loss(outputs: &Matrix, targets: &Targets) -> Result<f64> {
    loss_and_grad(outputs, targets).map(|(l, _)| l)
}

/// Loss and its gradient with respect to `outputs`.
pub fn loss_and_grad(outputs: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
    if !outputs.is_finite() {
        return Err(Error::NonFinite { context: "model outputs".into() });
    }
    let (d, n) = outputs.shape();
    match targets {
        Targets::Regression(t) => {
            if t.shape() != outputs.shape() {
                return Err(Error::DimensionMismatch { op: "mse", left: outputs.shape(), right: t.shape() });
            }
            let diff = outputs.sub(t)?;
            let count = (d * n) as f64;
            Ok((diff.frobenius_sq() / count, diff.scale(2.0 / count)))
        }
        Targets::Classes(labels) => {
            if labels.len() != n {
                return Err(Error::DimensionMismatch { op: "cross_entropy", left: outputs.shape(), right: (labels.len(), 1) });
            }
            if let Some(&bad) = labels.iter().find(|&&c| c >= d) {
                return Err(Error::InvalidArgument(format!("class index {bad} with only {d} outputs")));
            }
            let mut grad = Matrix::zeros(d, n);
            let mut total = 0.0;
            for (j, &label) in labels.iter().enumerate() {
                let col = outputs.col(j);
                let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = col.iter().map(|v| libm::exp(v - max)).sum();
                let lse = max + libm::log(sum);
                total += lse - col[label];
                for (i, v) in col.iter().enumerate() {
                    let p = libm::exp(v - lse);
                    grad[(i, j)] = (p - if i == label { 1.0 } else { 0.0 }) / n as f64;
                }
            }
            Ok((total / n as f64, grad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init_astra, init_pissa, init_vanilla};
    use crate::rng::{gaussian_matrix, seeded};

    fn three_layer(seed: u64) -> ToyModel {
        ToyModel::random(
            alloc::vec![
                LinearSpec::new("up.0", 5, 7, true, Activation::Gelu),
                LinearSpec::new("mid.0", 7, 6, true, Activation::Relu),
                LinearSpec::new("down.0", 6, 4, false, Activation::Identity),
            ],
            1.0,
            0.1,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn identity_network_passes_input_through() {
        let specs = alloc::vec![
            LinearSpec::new("a", 3, 3, false, Activation::Identity),
            LinearSpec::new("b", 3, 3, false, Activation::Identity),
        ];
        let model = ToyModel::from_params(specs, alloc::vec![(Matrix::identity(3), None), (Matrix::identity(3), None)]).unwrap();
        let x = gaussian_matrix(&mut seeded(1), 3, 4, 1.0);
        assert_eq!(model.predict(&x).unwrap(), x);
    }

    #[test]
    fn relu_layer() {
        let model = ToyModel::from_params(
            alloc::vec![LinearSpec::new("a", 2, 2, false, Activation::Relu)],
            alloc::vec![(Matrix::identity(2), None)],
        )
        .unwrap();
        let y = model.predict(&Matrix::column(&[-1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(y, Matrix::column(&[0.0, 2.0]).unwrap());
    }

    #[test]
    fn spec_chain_is_validated() {
        let bad = alloc::vec![
            LinearSpec::new("a", 3, 4, false, Activation::Identity),
            LinearSpec::new("b", 5, 2, false, Activation::Identity),
        ];
        assert!(ToyModel::random(bad, 1.0, 0.0, 0).is_err());
        let dup = alloc::vec![
            LinearSpec::new("a", 3, 3, false, Activation::Identity),
            LinearSpec::new("a", 3, 3, false, Activation::Identity),
        ];
        assert!(ToyModel::random(dup, 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn injection_preserves_outputs() {
        let base = three_layer(3);
        let x = gaussian_matrix(&mut seeded(4), 5, 6, 1.0);
        let before = base.predict(&x).unwrap();
        let mut m = base.clone();
        m.inject_with("up.0", |w| init_pissa(w, 2, 2.0)).unwrap();
        let cov = gaussian_matrix(&mut seeded(5), 9, 6, 1.0).gram();
        m.inject_with("mid.0", |w| init_astra(w, &cov, 3, 3.0)).unwrap();
        assert!(m.predict(&x).unwrap().max_abs_diff(&before) < 1e-9);
        assert!(m.inject_with("up.0", |w| init_vanilla(w, 1, 1.0, 0)).is_err());
        assert!(m.inject_with("nope", |w| init_vanilla(w, 1, 1.0, 0)).is_err());
    }

    #[test]
    fn trainable_set_switches_with_adapters() {
        let mut m = three_layer(1);
        assert_eq!(m.trainable_ids().len(), 5);
        m.inject_with("mid.0", |w| init_vanilla(w, 2, 2.0, 1)).unwrap();
        let ids = m.trainable_ids();
        assert_eq!(ids, [TensorId::new("mid.0", TensorKind::AdapterA), TensorId::new("mid.0", TensorKind::AdapterB)]);
        assert_eq!(m.trainable_parameter_count(), (7 + 6) * 2);
        assert!(m.param_mut(&TensorId::new("up.0", TensorKind::Weight)).is_err());
    }

    #[test]
    fn mse_and_cross_entropy_closed_forms() {
        let o = gaussian_matrix(&mut seeded(2), 3, 4, 1.0);
        assert_eq!(loss(&o, &Targets::Regression(o.clone())).unwrap(), 0.0);
        let c = 5;
        let uniform = Matrix::zeros(c, 3);
        let l = loss(&uniform, &Targets::Classes(alloc::vec![0, 4, 2])).unwrap();
        assert!((l - libm::log(c as f64)).abs() < 1e-15);
    }

    #[test]
    fn losses_match_direct_formulas() {
        let mut rng = seeded(7);
        let o = gaussian_matrix(&mut rng, 4, 6, 2.0);
        let t = gaussian_matrix(&mut rng, 4, 6, 1.0);
        let mut mse = 0.0;
        for i in 0..4 {
            for j in 0..6 {
                mse += (o.get(i, j) - t.get(i, j)).powi(2);
            }
        }
        mse /= 24.0;
        assert!((loss(&o, &Targets::Regression(t)).unwrap() - mse).abs() < 1e-12);

        let labels = alloc::vec![0, 1, 2, 3, 0, 1];
        let mut ce = 0.0;
        for (j, &y) in labels.iter().enumerate() {
            let z: f64 = (0..4).map(|i| libm::exp(o.get(i, j))).sum();
            ce += -libm::log(libm::exp(o.get(y, j)) / z);
        }
        ce /= 6.0;
        assert!((loss(&o, &Targets::Classes(labels)).unwrap() - ce).abs() < 1e-12);
    }

    #[test]
    fn loss_shape_errors() {
        let o = Matrix::zeros(3, 2);
        assert!(loss(&o, &Targets::Regression(Matrix::zeros(2, 2))).is_err());
        assert!(loss(&o, &Targets::Classes(alloc::vec![0])).is_err());
        assert!(loss(&o, &Targets::Classes(alloc::vec![0, 3])).is_err());
    }

    #[test]
    fn zero_loss_point_has_zero_gradients() {
        let m = three_layer(8);
        let x = gaussian_matrix(&mut seeded(9), 5, 3, 1.0);
        let t = Targets::Regression(m.predict(&x).unwrap());
        let (l, g) = m.loss_and_gradients(&x, &t).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|(_, m)| m.max_abs() == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = three_layer(10);
        let x = gaussian_matrix(&mut seeded(11), 5, 2, 1.0);
        let cache = m.forward(&x).unwrap();
        m.param_mut(&TensorId::new("up.0", TensorKind::Weight)).unwrap()[0] += 1.0;
        let t = Targets::Regression(Matrix::zeros(4, 2));
        assert_eq!(m.backward(&cache, &t), Err(Error::StaleCache));
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(x)).abs() < 1e-8);
        }
    }
}
