//! Training regimes on a small ReLU multilayer perceptron.
//!
//! The network is `x -> ReLU(W1 x + b1) -> ... -> phi -> z = W phi + b`: the
//! last hidden activation is the deep feature `phi` and the final linear
//! layer maps it to logits without a nonlinearity.
//!
//! * `SoftMax`: `K` outputs, one-hot targets, unit weights, knowns only.
//! * `Garbage`: `K + 1` outputs, negatives labelled `K + 1`, class weights
//!   `N / (C N_c)`.
//! * `Eos`: `K` outputs, one-hot targets for knowns and `1/K` targets for
//!   negatives, unit weights.
//!
//! Optimization is mini-batch Adam for a fixed number of epochs; the model
//! after the last epoch is returned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_unchecked, Mat, SeededRng};
use crate::sample::{Category, LabeledSample};

/// Lower clamp on probabilities inside the logarithm of the loss.
pub const LOG_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    SoftMax,
    Garbage,
    Eos,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::SoftMax, Regime::Garbage, Regime::Eos];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::SoftMax => "softmax",
            Regime::Garbage => "garbage",
            Regime::Eos => "eos",
        }
    }

    /// Output count for `known_classes` known classes.
    pub fn outputs(self, known_classes: usize) -> usize {
        match self {
            Regime::Garbage => known_classes + 1,
            _ => known_classes,
        }
    }

    pub fn uses_negatives(self) -> bool {
        !matches!(self, Regime::SoftMax)
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" | "s" => Ok(Regime::SoftMax),
            "garbage" | "g" => Ok(Regime::Garbage),
            "eos" | "e" => Ok(Regime::Eos),
            _ => Err(Error::InvalidParameter(format!("unknown regime '{s}'"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            hidden: vec![64, 64],
        }
    }
}

/// Dense layer computing `W a + b`, `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Mat,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            weights: Mat::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    /// Gaussian weights with standard deviation `gain / sqrt(fan_in)`, zero bias.
    pub fn gaussian(inputs: usize, outputs: usize, gain: f64, rng: &mut SeededRng) -> Self {
        let std = gain / (inputs as f64).sqrt();
        let mut layer = Layer::zeros(inputs, outputs);
        for w in layer.weights.as_mut_slice() {
            *w = std * rng.normal();
        }
        layer
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    /// Applies the layer to every row of `input`.
    pub fn apply(&self, input: &Mat) -> Mat {
        let mut out = Mat::zeros(input.rows(), self.outputs());
        for (n, a) in input.iter_rows().enumerate() {
            let row = out.row_mut(n);
            for (o, r) in row.iter_mut().enumerate() {
                let w = self.weights.row(o);
                *r = self.bias[o] + w.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        out
    }

    fn param_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }
}

/// MLP backbone: ReLU hidden layers followed by the linear logit layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneModel {
    pub hidden: Vec<Layer>,
    pub head: Layer,
}

/// Activations kept from a forward pass: `acts[0]` is the input and
/// `acts.last()` the deep feature.
pub struct ForwardCache {
    pub acts: Vec<Mat>,
    pub logits: Mat,
}

impl ForwardCache {
    pub fn features(&self) -> &Mat {
        self.acts.last().expect("input is always cached")
    }
}

impl BackboneModel {
    /// Fan-in scaled Gaussian initialization: gain `sqrt 2` for ReLU layers,
    /// gain `1` for the logit layer; biases start at zero.
    pub fn init(input_dim: usize, hidden: &[usize], outputs: usize, rng: &mut SeededRng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(Layer::gaussian(prev, h, std::f64::consts::SQRT_2, rng));
            prev = h;
        }
        BackboneModel {
            hidden: layers,
            head: Layer::gaussian(prev, outputs, 1.0, rng),
        }
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], outputs: usize) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(Layer::zeros(prev, h));
            prev = h;
        }
        BackboneModel {
            hidden: layers,
            head: Layer::zeros(prev, outputs),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map(Layer::inputs)
            .unwrap_or_else(|| self.head.inputs())
    }

    /// Embedding dimension `D`.
    pub fn feature_dim(&self) -> usize {
        self.head.inputs()
    }

    /// Output count `C`.
    pub fn outputs(&self) -> usize {
        self.head.outputs()
    }

    pub fn param_count(&self) -> usize {
        self.hidden.iter().map(Layer::param_count).sum::<usize>() + self.head.param_count()
    }

    pub fn forward(&self, inputs: &Mat) -> Result<ForwardCache> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: inputs.cols(),
            });
        }
        let mut acts = Vec::with_capacity(self.hidden.len() + 1);
        acts.push(inputs.clone());
        for layer in &self.hidden {
            let mut a = layer.apply(acts.last().unwrap());
            for v in a.as_mut_slice() {
                *v = v.max(0.0);
            }
            acts.push(a);
        }
        let logits = self.head.apply(acts.last().unwrap());
        Ok(ForwardCache { acts, logits })
    }

    /// Deep features and logits for every row of `inputs`.
    pub fn extract(&self, inputs: &Mat) -> Result<(Mat, Mat)> {
        let mut cache = self.forward(inputs)?;
        let features = cache.acts.pop().unwrap();
        Ok((features, cache.logits))
    }

    /// Backpropagates a gradient arriving at the deep features through the
    /// hidden layers, accumulating into `grads.hidden`.
    pub fn backward_features(&self, cache: &ForwardCache, dphi: Mat, grads: &mut Gradients) {
        let mut delta = dphi;
        for l in (0..self.hidden.len()).rev() {
            let out = &cache.acts[l + 1];
            for (d, &a) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            let input = &cache.acts[l];
            accumulate_layer_grad(&mut grads.hidden[l], &delta, input);
            if l > 0 {
                delta = propagate(&self.hidden[l], &delta);
            }
        }
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|l| {
                l.weights
                    .as_mut_slice()
                    .iter_mut()
                    .chain(l.bias.iter_mut())
            })
    }
}

/// `delta W` for a layer whose output gradient is `delta` (rows = samples).
pub(crate) fn propagate(layer: &Layer, delta: &Mat) -> Mat {
    let mut out = Mat::zeros(delta.rows(), layer.inputs());
    for n in 0..delta.rows() {
        let d = delta.row(n);
        let o = out.row_mut(n);
        for (j, &dj) in d.iter().enumerate() {
            if dj == 0.0 {
                continue;
            }
            for (oi, &w) in o.iter_mut().zip(layer.weights.row(j)) {
                *oi += dj * w;
            }
        }
    }
    out
}

pub(crate) fn accumulate_layer_grad(grad: &mut Layer, delta: &Mat, input: &Mat) {
    for n in 0..delta.rows() {
        let d = delta.row(n);
        let a = input.row(n);
        for (j, &dj) in d.iter().enumerate() {
            if dj == 0.0 {
                continue;
            }
            grad.bias[j] += dj;
            for (g, &x) in grad.weights.row_mut(j).iter_mut().zip(a) {
                *g += dj * x;
            }
        }
    }
}

/// Parameter gradients shaped like a [`BackboneModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Vec<Layer>,
    pub head: Layer,
}

impl Gradients {
    pub fn zeros_like(model: &BackboneModel) -> Self {
        Gradients {
            hidden: model
                .hidden
                .iter()
                .map(|l| Layer::zeros(l.inputs(), l.outputs()))
                .collect(),
            head: Layer::zeros(model.head.inputs(), model.head.outputs()),
        }
    }

    /// Flat view in the same order as the model parameters.
    pub fn flatten(&self) -> Vec<f64> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }
}

/// One-hot target of 1-based label `label` over `count` classes.
pub fn one_hot_targets(label: usize, count: usize) -> Result<Vec<f64>> {
    if label == 0 || label > count {
        return Err(Error::LabelOutOfRange { label, count });
    }
    let mut t = vec![0.0; count];
    t[label - 1] = 1.0;
    Ok(t)
}

/// Uniform `1/C` target used for negatives under the entropic loss.
pub fn eos_targets(count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::InvalidParameter("class count must be positive".into()));
    }
    Ok(vec![1.0 / count as f64; count])
}

/// Balancing weights `w_c = N / (C N_c)`.
pub fn garbage_class_weights(counts: &[usize], total: usize) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::Empty("class counts"));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass { class: c + 1 });
    }
    let sum: usize = counts.iter().sum();
    if sum != total {
        return Err(Error::InvalidParameter(format!(
            "class counts sum to {sum}, expected {total}"
        )));
    }
    let c = counts.len() as f64;
    Ok(counts
        .iter()
        .map(|&n| total as f64 / (c * n as f64))
        .collect())
}

fn check_loss_shapes(probs: &Mat, targets: &Mat, weights: &[f64]) -> Result<()> {
    if probs.rows() != targets.rows() {
        return Err(Error::DimensionMismatch {
            expected: probs.rows(),
            got: targets.rows(),
        });
    }
    if probs.cols() != targets.cols() {
        return Err(Error::DimensionMismatch {
            expected: probs.cols(),
            got: targets.cols(),
        });
    }
    if weights.len() != probs.cols() {
        return Err(Error::DimensionMismatch {
            expected: probs.cols(),
            got: weights.len(),
        });
    }
    if probs.rows() == 0 {
        return Err(Error::Empty("batch"));
    }
    Ok(())
}

/// `-(1/N) sum_n sum_c w_c t_nc ln max(y_nc, LOG_EPSILON)`.
pub fn weighted_cce_loss(probs: &Mat, targets: &Mat, weights: &[f64]) -> Result<f64> {
    check_loss_shapes(probs, targets, weights)?;
    let mut total = 0.0;
    for (y, t) in probs.iter_rows().zip(targets.iter_rows()) {
        for c in 0..y.len() {
            if t[c] != 0.0 {
                total -= weights[c] * t[c] * y[c].max(LOG_EPSILON).ln();
            }
        }
    }
    Ok(total / probs.rows() as f64)
}

/// Loss of softmax(`logits`) plus its gradient with respect to the logits.
///
/// Per sample, `dL/dz_j = y_j sum_c a_c - a_j` with `a_c = w_c t_c / N`;
/// terms whose probability sits under the log clamp are constant and drop out.
pub fn cce_logit_gradient(logits: &Mat, targets: &Mat, weights: &[f64]) -> Result<(f64, Mat)> {
    let probs = softmax_rows(logits);
    check_loss_shapes(&probs, targets, weights)?;
    let n = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let y = probs.row(i);
        let t = targets.row(i);
        let g = grad.row_mut(i);
        let mut a_sum = 0.0;
        for c in 0..y.len() {
            if t[c] == 0.0 {
                continue;
            }
            loss -= weights[c] * t[c] * y[c].max(LOG_EPSILON).ln();
            if y[c] >= LOG_EPSILON {
                let a = weights[c] * t[c] / n;
                a_sum += a;
                g[c] -= a;
            }
        }
        for (gj, &yj) in g.iter_mut().zip(y) {
            *gj += yj * a_sum;
        }
    }
    Ok((loss / n, grad))
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = Mat::zeros(logits.rows(), logits.cols());
    for (i, z) in logits.iter_rows().enumerate() {
        out.row_mut(i).copy_from_slice(&softmax_unchecked(z));
    }
    out
}

/// Loss and exact parameter gradients for one batch.
pub fn loss_gradient(
    model: &BackboneModel,
    inputs: &Mat,
    targets: &Mat,
    weights: &[f64],
) -> Result<(f64, Gradients)> {
    if inputs.rows() == 0 {
        return Err(Error::Empty("batch"));
    }
    if targets.cols() != model.outputs() {
        return Err(Error::DimensionMismatch {
            expected: model.outputs(),
            got: targets.cols(),
        });
    }
    let cache = model.forward(inputs)?;
    let (loss, dz) = cce_logit_gradient(&cache.logits, targets, weights)?;
    let mut grads = Gradients::zeros_like(model);
    accumulate_layer_grad(&mut grads.head, &dz, cache.features());
    let dphi = propagate(&model.head, &dz);
    model.backward_features(&cache, dphi, &mut grads);
    Ok((loss, grads))
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn update<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.enumerate() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Applies one Adam step to a backbone.
pub fn adam_step(model: &mut BackboneModel, adam: &mut Adam, grads: &Gradients) {
    let flat = grads.flatten();
    adam.update(model.params_mut(), &flat);
}

/// Training set after regime-specific filtering, with targets and weights.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub inputs: Mat,
    pub targets: Mat,
    pub weights: Vec<f64>,
    /// Original labels, kept for inspection.
    pub labels: Vec<usize>,
}

/// Builds the target matrix and class weights of a regime.
///
/// Unknown-category samples are never accepted. Negatives are dropped for
/// `SoftMax` and required for `Garbage` and `Eos`.
pub fn prepare(regime: Regime, samples: &[LabeledSample], known_classes: usize) -> Result<PreparedData> {
    let k = known_classes;
    if k == 0 {
        return Err(Error::InvalidParameter("need at least one known class".into()));
    }
    let dim = samples
        .first()
        .map(|s| s.x.len())
        .ok_or(Error::Empty("training data"))?;
    let outputs = regime.outputs(k);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut labels = Vec::new();
    let mut counts = vec![0usize; outputs];
    let mut negatives = 0usize;
    for s in samples {
        if s.x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.x.len(),
            });
        }
        let target = match s.category {
            Category::Unknown => {
                return Err(Error::InvalidParameter(
                    "unknown-category samples cannot be used for training".into(),
                ))
            }
            Category::Known => {
                if s.label == 0 || s.label > k {
                    return Err(Error::LabelOutOfRange {
                        label: s.label,
                        count: k,
                    });
                }
                counts[s.label - 1] += 1;
                one_hot_targets(s.label, outputs)?
            }
            Category::Negative => match regime {
                Regime::SoftMax => continue,
                Regime::Garbage => {
                    negatives += 1;
                    counts[k] += 1;
                    one_hot_targets(k + 1, outputs)?
                }
                Regime::Eos => {
                    negatives += 1;
                    eos_targets(outputs)?
                }
            },
        };
        rows.push(s.x.clone());
        targets.push(target);
        labels.push(s.label);
    }
    if let Some(c) = counts[..k].iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass { class: c + 1 });
    }
    if regime.uses_negatives() && negatives == 0 {
        return Err(Error::InsufficientSamples(format!(
            "{regime} training requires negative samples"
        )));
    }
    let weights = match regime {
        Regime::Garbage => garbage_class_weights(&counts, rows.len())?,
        _ => vec![1.0; outputs],
    };
    Ok(PreparedData {
        inputs: Mat::from_rows(&rows)?,
        targets: Mat::from_rows(&targets)?,
        weights,
        labels,
    })
}

/// Trains a backbone under `regime`. Deterministic in `seed`.
pub fn train(
    regime: Regime,
    samples: &[LabeledSample],
    known_classes: usize,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<BackboneModel> {
    let data = prepare(regime, samples, known_classes)?;
    train_prepared(&data, regime.outputs(known_classes), opt, seed)
}

pub fn train_prepared(
    data: &PreparedData,
    outputs: usize,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<BackboneModel> {
    if opt.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut model = BackboneModel::init(data.inputs.cols(), &opt.hidden, outputs, &mut rng);
    let mut adam = Adam::new(model.param_count(), opt.learning_rate);
    let mut order: Vec<usize> = (0..data.inputs.rows()).collect();
    for _ in 0..opt.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(opt.batch_size) {
            let x = data.inputs.select_rows(batch);
            let t = data.targets.select_rows(batch);
            let (_, grads) = loss_gradient(&model, &x, &t, &data.weights)?;
            adam_step(&mut model, &mut adam, &grads);
        }
    }
    Ok(model)
}

/// Deep features and logits of the given samples.
pub fn extract(model: &BackboneModel, samples: &[LabeledSample]) -> Result<(Mat, Mat)> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.x.as_slice()).collect();
    let inputs = Mat::from_rows(&rows)?;
    if samples.is_empty() {
        return Ok((
            Mat::zeros(0, model.feature_dim()),
            Mat::zeros(0, model.outputs()),
        ));
    }
    model.extract(&inputs)
}
