//! Dense-network numeric kernel.
//!
//! A model is a stack of dense feature layers (the extractor) followed by a
//! linear classifier head. The head has `natural_classes + virtual_classes`
//! outputs: virtual class `j` maps to output index `natural_classes + j`, so
//! classification over natural and virtual inputs never competes for the
//! same logits. Test accuracy is argmax over the first `natural_classes`
//! logits only.
//!
//! Everything here is pure: forward, backward, losses, and the optimizer
//! step are plain functions of their inputs.

mod loss;

pub use loss::{cross_entropy, supcon_loss};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed in terms of the post-activation value.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Architecture of the dense network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    /// Input dim, hidden dims..., feature dim. At least two entries.
    pub layer_widths: Vec<usize>,
    pub natural_classes: usize,
    pub virtual_classes: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        natural_classes: usize,
        virtual_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidInput(
                "layer_widths needs at least input and feature dims".into(),
            ));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidInput("layer widths must be positive".into()));
        }
        if natural_classes == 0 {
            return Err(Error::InvalidInput(
                "natural_classes must be positive".into(),
            ));
        }
        Ok(Self {
            layer_widths,
            natural_classes,
            virtual_classes,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Number of dense feature layers (excludes the classifier head).
    pub fn feature_layer_count(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn head_width(&self) -> usize {
        self.natural_classes + self.virtual_classes
    }

    /// Width of the post-activation features at `trace` layer index
    /// (0 = input, `feature_layer_count()` = deepest features).
    pub fn layer_width(&self, layer: usize) -> Option<usize> {
        self.layer_widths.get(layer).copied()
    }

    /// Deepest pre-classifier layer; the default calibration site.
    pub fn default_calibration_layer(&self) -> usize {
        self.feature_layer_count()
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for i in 0..self.feature_layer_count() {
            n += self.layer_widths[i] * self.layer_widths[i + 1] + self.layer_widths[i + 1];
        }
        n + self.feature_dim() * self.head_width() + self.head_width()
    }
}

/// Flat parameter store: one weight matrix (`in x out`) and one bias vector
/// per dense layer, the classifier head last.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl ModelParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..spec.feature_layer_count() {
            weights.push(Array2::zeros((spec.layer_widths[i], spec.layer_widths[i + 1])));
            biases.push(Array1::zeros(spec.layer_widths[i + 1]));
        }
        weights.push(Array2::zeros((spec.feature_dim(), spec.head_width())));
        biases.push(Array1::zeros(spec.head_width()));
        Self { weights, biases }
    }

    /// Seeded init: He-style scaling for relu, Xavier-style for tanh; the
    /// head always uses Xavier. Biases start at zero.
    pub fn init<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut params = Self::zeros(spec);
        let n_layers = params.weights.len();
        for (idx, w) in params.weights.iter_mut().enumerate() {
            let fan_in = w.nrows() as f64;
            let fan_out = w.ncols() as f64;
            let std = if idx + 1 == n_layers {
                (2.0 / (fan_in + fan_out)).sqrt()
            } else {
                match spec.activation {
                    Activation::Relu => (2.0 / fan_in).sqrt(),
                    Activation::Tanh => (2.0 / (fan_in + fan_out)).sqrt(),
                }
            };
            for v in w.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = std * z;
            }
        }
        params
    }

    pub fn conforms_to(&self, spec: &MlpSpec) -> bool {
        let expect = Self::zeros(spec);
        self.weights.len() == expect.weights.len()
            && self
                .weights
                .iter()
                .zip(&expect.weights)
                .all(|(a, b)| a.dim() == b.dim())
            && self
                .biases
                .iter()
                .zip(&expect.biases)
                .all(|(a, b)| a.dim() == b.dim())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn unflatten(spec: &MlpSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.param_count() {
            return Err(Error::ShapeMismatch {
                site: "unflatten".into(),
                expected: format!("{} parameters", spec.param_count()),
                actual: format!("{}", flat.len()),
            });
        }
        let mut params = Self::zeros(spec);
        let mut off = 0;
        for (w, b) in params.weights.iter_mut().zip(params.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = flat[off];
                off += 1;
            }
            for v in b.iter_mut() {
                *v = flat[off];
                off += 1;
            }
        }
        Ok(params)
    }

    /// Euclidean distance between flattened parameter vectors.
    pub fn l2_distance(&self, other: &Self) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.weights.iter().zip(&other.weights) {
            acc += a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        for (a, b) in self.biases.iter().zip(&other.biases) {
            acc += a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * factor);
        }
    }

    /// `self += factor * other`, used by the aggregation rules.
    pub fn add_scaled(&mut self, factor: f64, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.zip_mut_with(b, |x, &y| *x += factor * y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.zip_mut_with(b, |x, &y| *x += factor * y);
        }
    }

    /// `self += factor * grad`, tensor by tensor.
    pub fn add_gradient_scaled(&mut self, factor: f64, grad: &Gradient) {
        for (a, b) in self.weights.iter_mut().zip(&grad.weights) {
            a.zip_mut_with(b, |x, &y| *x += factor * y);
        }
        for (a, b) in self.biases.iter_mut().zip(&grad.biases) {
            a.zip_mut_with(b, |x, &y| *x += factor * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Same layout as [`ModelParams`]; additive.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradient {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let p = ModelParams::zeros(spec);
        Self {
            weights: p.weights,
            biases: p.biases,
        }
    }

    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.dim())).collect(),
        }
    }

    pub fn zeros_matching(other: &Gradient) -> Self {
        Self {
            weights: other.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: other.biases.iter().map(|b| Array1::zeros(b.dim())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn add_scaled(&mut self, factor: f64, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.zip_mut_with(b, |x, &y| *x += factor * y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.zip_mut_with(b, |x, &y| *x += factor * y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * factor);
        }
    }

    /// Difference of parameter stores, `(a - b) * factor`.
    pub fn from_param_diff(a: &ModelParams, b: &ModelParams, factor: f64) -> Self {
        let mut g = Gradient::zeros_like(a);
        for ((gw, aw), bw) in g.weights.iter_mut().zip(&a.weights).zip(&b.weights) {
            ndarray::Zip::from(gw).and(aw).and(bw).for_each(|g, &x, &y| *g = factor * (x - y));
        }
        for ((gb, ab), bb) in g.biases.iter_mut().zip(&a.biases).zip(&b.biases) {
            ndarray::Zip::from(gb).and(ab).and(bb).for_each(|g, &x, &y| *g = factor * (x - y));
        }
        g
    }

    /// Index of the first non-finite entry in flat order, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        let mut idx = 0;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter() {
                if !v.is_finite() {
                    return Some(idx);
                }
                idx += 1;
            }
            for v in b.iter() {
                if !v.is_finite() {
                    return Some(idx);
                }
                idx += 1;
            }
        }
        None
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let a = self.flatten();
        let b = other.flatten();
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-layer post-activation features plus the final logits.
///
/// `layers[0]` is the input batch; `layers[i]` for `i >= 1` is the output of
/// feature layer `i`. All row counts equal the batch size.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.logits.nrows()
    }

    pub fn features(&self, layer: usize) -> &Array2<f64> {
        &self.layers[layer]
    }
}

fn check_params(spec: &MlpSpec, params: &ModelParams) -> Result<()> {
    let n_layers = spec.feature_layer_count() + 1;
    if params.weights.len() != n_layers || params.biases.len() != n_layers {
        return Err(Error::ShapeMismatch {
            site: "params".into(),
            expected: format!("{n_layers} layers"),
            actual: format!("{} weights / {} biases", params.weights.len(), params.biases.len()),
        });
    }
    for i in 0..spec.feature_layer_count() {
        let want = (spec.layer_widths[i], spec.layer_widths[i + 1]);
        if params.weights[i].dim() != want || params.biases[i].len() != want.1 {
            return Err(Error::ShapeMismatch {
                site: format!("feature layer {i}"),
                expected: format!("{want:?}"),
                actual: format!("{:?}", params.weights[i].dim()),
            });
        }
    }
    let head = (spec.feature_dim(), spec.head_width());
    let last = params.weights.len() - 1;
    if params.weights[last].dim() != head || params.biases[last].len() != head.1 {
        return Err(Error::ShapeMismatch {
            site: "classifier head".into(),
            expected: format!("{head:?}"),
            actual: format!("{:?}", params.weights[last].dim()),
        });
    }
    Ok(())
}

/// Forward pass capturing every post-activation feature matrix.
pub fn forward(spec: &MlpSpec, params: &ModelParams, batch: ArrayView2<f64>) -> Result<ForwardTrace> {
    check_params(spec, params)?;
    if batch.ncols() != spec.input_dim() {
        return Err(Error::ShapeMismatch {
            site: "input batch".into(),
            expected: format!("{} columns", spec.input_dim()),
            actual: format!("{} columns", batch.ncols()),
        });
    }
    let mut layers = Vec::with_capacity(spec.feature_layer_count() + 1);
    layers.push(batch.to_owned());
    for i in 0..spec.feature_layer_count() {
        let mut z = layers[i].dot(&params.weights[i]);
        z += &params.biases[i];
        z.mapv_inplace(|v| spec.activation.apply(v));
        layers.push(z);
    }
    let last = params.weights.len() - 1;
    let mut logits = layers[spec.feature_layer_count()].dot(&params.weights[last]);
    logits += &params.biases[last];
    Ok(ForwardTrace { layers, logits })
}

/// Exact reverse-mode accumulation through the trace.
///
/// `logits_grad` is the loss gradient at the logits. `feature_grad`, when
/// present, is an extra loss gradient injected at the post-activation
/// features of the given trace layer; its chain-rule contribution reaches
/// that layer and everything upstream of it only.
pub fn backward(
    spec: &MlpSpec,
    params: &ModelParams,
    trace: &ForwardTrace,
    logits_grad: ArrayView2<f64>,
    feature_grad: Option<(usize, ArrayView2<f64>)>,
) -> Result<Gradient> {
    check_params(spec, params)?;
    let n = trace.batch_size();
    if logits_grad.dim() != (n, spec.head_width()) {
        return Err(Error::ShapeMismatch {
            site: "logits gradient".into(),
            expected: format!("({n}, {})", spec.head_width()),
            actual: format!("{:?}", logits_grad.dim()),
        });
    }
    if let Some((layer, fg)) = feature_grad {
        if layer == 0 || layer > spec.feature_layer_count() {
            return Err(Error::InvalidInput(format!(
                "feature gradient layer {layer} out of range 1..={}",
                spec.feature_layer_count()
            )));
        }
        if fg.dim() != trace.layers[layer].dim() {
            return Err(Error::ShapeMismatch {
                site: format!("feature gradient at layer {layer}"),
                expected: format!("{:?}", trace.layers[layer].dim()),
                actual: format!("{:?}", fg.dim()),
            });
        }
    }

    let mut grad = Gradient::zeros(spec);
    let last = params.weights.len() - 1;
    let deep = spec.feature_layer_count();

    grad.weights[last] = trace.layers[deep].t().dot(&logits_grad);
    grad.biases[last] = logits_grad.sum_axis(Axis(0));
    let mut upstream = logits_grad.dot(&params.weights[last].t());

    for layer in (1..=deep).rev() {
        if let Some((fg_layer, fg)) = feature_grad {
            if fg_layer == layer {
                upstream += &fg;
            }
        }
        // Activation derivative from the stored post-activation values.
        let mut dz = upstream;
        dz.zip_mut_with(&trace.layers[layer], |g, &y| {
            *g *= spec.activation.derivative_from_output(y)
        });
        grad.weights[layer - 1] = trace.layers[layer - 1].t().dot(&dz);
        grad.biases[layer - 1] = dz.sum_axis(Axis(0));
        upstream = dz.dot(&params.weights[layer - 1].t());
    }
    Ok(grad)
}

/// Central-difference gradient oracle; test-support only.
pub fn finite_diff_grad<F>(spec: &MlpSpec, params: &ModelParams, loss: F, eps: f64) -> Result<Gradient>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidInput("eps must be positive".into()));
    }
    let mut flat = params.flatten();
    let mut out = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + eps;
        let up = loss(&ModelParams::unflatten(spec, &flat)?)?;
        flat[i] = orig - eps;
        let down = loss(&ModelParams::unflatten(spec, &flat)?)?;
        flat[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                what: "finite-difference loss".into(),
                index: i,
            });
        }
        out[i] = (up - down) / (2.0 * eps);
    }
    let p = ModelParams::unflatten(spec, &out)?;
    Ok(Gradient {
        weights: p.weights,
        biases: p.biases,
    })
}

/// Momentum buffers for [`sgd_momentum_step`]; one slot per tensor.
pub type MomentumState = Gradient;

/// One heavy-ball SGD step with decoupled-from-nothing weight decay:
/// `buf <- momentum*buf + (grad + wd*params)`, `params <- params - lr*buf`.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grad: &Gradient,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut MomentumState,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidInput("lr must be positive".into()));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidInput("momentum must be in [0,1)".into()));
    }
    if weight_decay < 0.0 {
        return Err(Error::InvalidInput("weight_decay must be >= 0".into()));
    }
    if let Some(index) = grad.first_non_finite() {
        return Err(Error::NonFinite {
            what: "gradient".into(),
            index,
        });
    }
    for i in 0..params.weights.len() {
        ndarray::Zip::from(&mut state.weights[i])
            .and(&grad.weights[i])
            .and(&params.weights[i])
            .for_each(|b, &g, &p| *b = momentum * *b + (g + weight_decay * p));
        ndarray::Zip::from(&mut params.weights[i])
            .and(&state.weights[i])
            .for_each(|p, &b| *p -= lr * b);
        ndarray::Zip::from(&mut state.biases[i])
            .and(&grad.biases[i])
            .and(&params.biases[i])
            .for_each(|b, &g, &p| *b = momentum * *b + (g + weight_decay * p));
        ndarray::Zip::from(&mut params.biases[i])
            .and(&state.biases[i])
            .for_each(|p, &b| *p -= lr * b);
    }
    Ok(())
}
