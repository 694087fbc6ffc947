//! One-hidden-layer ReLU network with a softmax output, trained by plain
//! mini-batch SGD on the mean cross-entropy.
//!
//! Parameters are treated as values: every operation returns a new
//! [`ModelParams`] and leaves its inputs untouched.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSet;
use crate::error::{contract, Result};
use crate::seed;

/// All classifier weights. The output layer is addressed per class through
/// [`ModelParams::output_row`]: row `l` of the output weights with the output
/// bias `l` appended.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    hidden_weights: Array2<f64>,
    hidden_bias: Array1<f64>,
    output_weights: Array2<f64>,
    output_bias: Array1<f64>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub hidden_activations: Array1<f64>,
    pub logits: Array1<f64>,
    pub probabilities: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub rng_seed: u64,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, batch_size: usize, local_epochs: usize, rng_seed: u64) -> Result<Self> {
        let cfg = Self {
            learning_rate,
            batch_size,
            local_epochs,
            rng_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(contract(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(contract("batch_size must be >= 1"));
        }
        if self.local_epochs == 0 {
            return Err(contract("local_epochs must be >= 1"));
        }
        Ok(())
    }

    pub fn with_seed(self, rng_seed: u64) -> Self {
        Self { rng_seed, ..self }
    }
}

/// Intermediate values of a batched forward pass.
pub(crate) struct BatchTrace {
    pre_activations: Array2<f64>,
    hidden: Array2<f64>,
    pub(crate) probabilities: Array2<f64>,
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn all_finite<'a>(mut it: impl Iterator<Item = &'a f64>) -> bool {
    it.all(|v| v.is_finite())
}

impl ModelParams {
    pub fn zeros(input_dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        check_dims(input_dim, hidden, classes)?;
        Ok(Self {
            hidden_weights: Array2::zeros((hidden, input_dim)),
            hidden_bias: Array1::zeros(hidden),
            output_weights: Array2::zeros((classes, hidden)),
            output_bias: Array1::zeros(classes),
        })
    }

    /// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases included.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: usize, classes: usize, rng: &mut R) -> Result<Self> {
        check_dims(input_dim, hidden, classes)?;
        let a = 1.0 / (input_dim as f64).sqrt();
        let b = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |bound: f64| rng.random_range(-bound..=bound);
        let hidden_weights = Array2::from_shape_simple_fn((hidden, input_dim), || uniform(a));
        let hidden_bias = Array1::from_shape_simple_fn(hidden, || uniform(a));
        let output_weights = Array2::from_shape_simple_fn((classes, hidden), || uniform(b));
        let output_bias = Array1::from_shape_simple_fn(classes, || uniform(b));
        Ok(Self {
            hidden_weights,
            hidden_bias,
            output_weights,
            output_bias,
        })
    }

    pub fn from_parts(
        hidden_weights: Array2<f64>,
        hidden_bias: Array1<f64>,
        output_weights: Array2<f64>,
        output_bias: Array1<f64>,
    ) -> Result<Self> {
        let (s, d) = hidden_weights.dim();
        let l = output_weights.nrows();
        check_dims(d, s, l)?;
        if hidden_bias.len() != s || output_weights.ncols() != s || output_bias.len() != l {
            return Err(contract("inconsistent parameter shapes"));
        }
        let params = Self {
            hidden_weights,
            hidden_bias,
            output_weights,
            output_bias,
        };
        if !params.is_finite() {
            return Err(contract("parameters must be finite"));
        }
        Ok(params)
    }

    pub fn input_dim(&self) -> usize {
        self.hidden_weights.ncols()
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_weights.nrows()
    }

    pub fn classes(&self) -> usize {
        self.output_weights.nrows()
    }

    pub fn hidden_weights(&self) -> &Array2<f64> {
        &self.hidden_weights
    }

    pub fn hidden_bias(&self) -> &Array1<f64> {
        &self.hidden_bias
    }

    pub fn output_weights(&self) -> &Array2<f64> {
        &self.output_weights
    }

    pub fn output_bias(&self) -> &Array1<f64> {
        &self.output_bias
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.hidden_weights.dim() == other.hidden_weights.dim()
            && self.output_weights.dim() == other.output_weights.dim()
    }

    pub fn is_finite(&self) -> bool {
        all_finite(self.values())
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        self.hidden_weights.len() + self.hidden_bias.len() + self.output_weights.len() + self.output_bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every scalar in a fixed order: hidden weights, hidden bias, output
    /// weights, output bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.hidden_weights
            .iter()
            .chain(self.hidden_bias.iter())
            .chain(self.output_weights.iter())
            .chain(self.output_bias.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.hidden_weights
            .iter_mut()
            .chain(self.hidden_bias.iter_mut())
            .chain(self.output_weights.iter_mut())
            .chain(self.output_bias.iter_mut())
    }

    /// Elementwise `self + scale * other`.
    pub fn scaled_add(&self, scale: f64, other: &Self) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(contract("shape mismatch"));
        }
        let mut out = self.clone();
        out.hidden_weights.scaled_add(scale, &other.hidden_weights);
        out.hidden_bias.scaled_add(scale, &other.hidden_bias);
        out.output_weights.scaled_add(scale, &other.output_weights);
        out.output_bias.scaled_add(scale, &other.output_bias);
        Ok(out)
    }

    pub fn output_row(&self, class: usize) -> Result<Array1<f64>> {
        if class >= self.classes() {
            return Err(contract(format!("class {class} out of range for {} classes", self.classes())));
        }
        let s = self.hidden_width();
        let mut row = Array1::zeros(s + 1);
        row.slice_mut(s![..s]).assign(&self.output_weights.row(class));
        row[s] = self.output_bias[class];
        Ok(row)
    }

    /// Returns a copy with output row `class` replaced by `row` (weights then bias).
    pub fn with_output_row(&self, class: usize, row: ArrayView1<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.set_output_row(class, row)?;
        Ok(out)
    }

    pub fn set_output_row(&mut self, class: usize, row: ArrayView1<f64>) -> Result<()> {
        let s = self.hidden_width();
        if class >= self.classes() {
            return Err(contract(format!("class {class} out of range for {} classes", self.classes())));
        }
        if row.len() != s + 1 {
            return Err(contract(format!("output row must have length {}, got {}", s + 1, row.len())));
        }
        if !all_finite(row.iter()) {
            return Err(contract("output row must be finite"));
        }
        self.output_weights.row_mut(class).assign(&row.slice(s![..s]));
        self.output_bias[class] = row[s];
        Ok(())
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(contract(format!("input has dimension {}, model expects {}", x.len(), self.input_dim())));
        }
        if !all_finite(x.iter()) {
            return Err(contract("input must be finite"));
        }
        let trace = self.forward_batch(x.insert_axis(Axis(0)));
        let logits = trace.hidden.row(0).dot(&self.output_weights.t()) + &self.output_bias;
        Ok(ForwardTrace {
            hidden_activations: trace.hidden.row(0).to_owned(),
            logits,
            probabilities: trace.probabilities.row(0).to_owned(),
        })
    }

    pub(crate) fn forward_batch(&self, features: ArrayView2<f64>) -> BatchTrace {
        let mut pre_activations = features.dot(&self.hidden_weights.t());
        pre_activations += &self.hidden_bias;
        let hidden = pre_activations.mapv(|v| v.max(0.0));
        let mut probabilities = hidden.dot(&self.output_weights.t());
        probabilities += &self.output_bias;
        softmax_rows(&mut probabilities);
        BatchTrace {
            pre_activations,
            hidden,
            probabilities,
        }
    }

    /// Class probabilities for every row of `features`.
    pub fn predict_proba(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.input_dim() {
            return Err(contract("feature dimension mismatch"));
        }
        Ok(self.forward_batch(features).probabilities)
    }

    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(self.predict_proba(features)?.rows().into_iter().map(|p| argmax(p)).collect())
    }

    /// Mean cross-entropy gradient over the batch.
    pub fn backward(&self, features: ArrayView2<f64>, labels: &[usize]) -> Result<Gradients> {
        let n = features.nrows();
        if n == 0 {
            return Err(contract("backward requires a nonempty batch"));
        }
        if labels.len() != n {
            return Err(contract("features and labels differ in length"));
        }
        if features.ncols() != self.input_dim() {
            return Err(contract("feature dimension mismatch"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.classes()) {
            return Err(contract(format!("label {bad} out of range")));
        }
        let trace = self.forward_batch(features);
        // logit gradient: (p - onehot(y)) / n
        let mut delta_out = trace.probabilities;
        for (mut row, &y) in delta_out.rows_mut().into_iter().zip(labels) {
            row[y] -= 1.0;
        }
        delta_out /= n as f64;

        let output_weights = delta_out.t().dot(&trace.hidden);
        let output_bias = delta_out.sum_axis(Axis(0));
        let mut delta_hidden = delta_out.dot(&self.output_weights);
        Zip::from(&mut delta_hidden)
            .and(&trace.pre_activations)
            .for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        let hidden_weights = delta_hidden.t().dot(&features);
        let hidden_bias = delta_hidden.sum_axis(Axis(0));
        Ok(ModelParams {
            hidden_weights,
            hidden_bias,
            output_weights,
            output_bias,
        })
    }

    /// `self - learning_rate * grads`.
    pub fn sgd_step(&self, grads: &Gradients, learning_rate: f64) -> Result<Self> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(contract("learning rate must be finite and nonnegative"));
        }
        let out = self.scaled_add(-learning_rate, grads)?;
        if !out.is_finite() {
            return Err(contract("SGD step produced non-finite parameters"));
        }
        Ok(out)
    }

    /// `local_epochs` passes of shuffled mini-batch SGD. The final short batch
    /// is kept. An empty labeled set leaves the parameters unchanged.
    pub fn train_local(&self, labeled: &LabeledSet, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if labeled.is_empty() {
            log::warn!("local training skipped: empty labeled set");
            return Ok(self.clone());
        }
        if labeled.dim() != self.input_dim() {
            return Err(contract("labeled set dimension does not match the model"));
        }
        let mut rng = seed::rng(cfg.rng_seed);
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        let mut params = self.clone();
        let features = labeled.features();
        let labels = labeled.labels();
        let mut batch_y = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.local_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch_x = features.select(Axis(0), chunk);
                batch_y.clear();
                batch_y.extend(chunk.iter().map(|&i| labels[i]));
                let grads = params.backward(batch_x.view(), &batch_y)?;
                params = params.sgd_step(&grads, cfg.learning_rate)?;
            }
        }
        Ok(params)
    }
}

fn check_dims(input_dim: usize, hidden: usize, classes: usize) -> Result<()> {
    if input_dim == 0 || hidden == 0 || classes < 2 {
        return Err(contract(format!(
            "need input_dim >= 1, hidden >= 1, classes >= 2 (got {input_dim}, {hidden}, {classes})"
        )));
    }
    Ok(())
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy `-ln p[y]`.
pub fn loss(probabilities: ArrayView1<f64>, label: usize) -> Result<f64> {
    if label >= probabilities.len() {
        return Err(contract(format!("label {label} out of range")));
    }
    Ok(-probabilities[label].ln())
}

/// Mean cross-entropy of a batch. Used by gradient checks.
pub fn batch_loss(params: &ModelParams, features: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if features.nrows() == 0 || labels.len() != features.nrows() {
        return Err(contract("batch_loss needs a nonempty, consistent batch"));
    }
    let probs = params.predict_proba(features)?;
    let mut total = 0.0;
    for (p, &y) in probs.rows().into_iter().zip(labels) {
        total += loss(p, y)?;
    }
    Ok(total / labels.len() as f64)
}
