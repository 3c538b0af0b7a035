//! Online Poisson regressor: hashed categorical embeddings feeding a ReLU
//! network with an exponential output link, trained one example at a time
//! with AdaGrad.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::loss::poisson_nll_lograte;
use crate::types::LabelParts;

mod checkpoint;

pub use checkpoint::CHECKPOINT_MAGIC;

/// Hyperparameters and feature schema of one regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    /// Categorical fields, in embedding concatenation order.
    pub categorical_fields: Vec<String>,
    /// Numeric inputs, appended after the embeddings in this order.
    pub numeric_features: Vec<String>,
    pub embedding_dim: usize,
    pub hash_buckets_per_field: usize,
    pub hidden_layer_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub adagrad_epsilon: f64,
    pub output_bias_init: f64,
    /// Separate heads for the positive and negative parts of a signed label.
    pub two_output_mode: bool,
    pub rng_seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            categorical_fields: Vec::new(),
            numeric_features: Vec::new(),
            embedding_dim: 8,
            hash_buckets_per_field: 4096,
            hidden_layer_sizes: vec![32, 32],
            learning_rate: 0.05,
            adagrad_epsilon: 1e-6,
            output_bias_init: 0.5f64.ln(),
            two_output_mode: false,
            rng_seed: 0,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("regressor: {m}")));
        if self.embedding_dim < 1 {
            return bad("embedding_dim must be at least 1");
        }
        if self.hash_buckets_per_field < 2 {
            return bad("hash_buckets_per_field must be at least 2");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.adagrad_epsilon > 0.0) {
            return bad("adagrad_epsilon must be positive");
        }
        if !self.output_bias_init.is_finite() {
            return bad("output_bias_init must be finite");
        }
        if self.hidden_layer_sizes.contains(&0) {
            return bad("hidden layers must be non-empty");
        }
        if self.input_dim() == 0 {
            return bad("no input features declared");
        }
        let mut names: Vec<&str> = self
            .categorical_fields
            .iter()
            .chain(&self.numeric_features)
            .map(String::as_str)
            .collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate feature name in schema");
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.categorical_fields.len() * self.embedding_dim + self.numeric_features.len()
    }

    pub fn output_dim(&self) -> usize {
        if self.two_output_mode {
            2
        } else {
            1
        }
    }
}

/// Serving or training inputs: categorical tokens and numeric values keyed
/// by schema name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureVector {
    pub categorical: Vec<(String, String)>,
    pub numeric: Vec<(String, f64)>,
}

impl FeatureVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_token(mut self, field: impl Into<String>, token: impl Into<String>) -> Self {
        self.categorical.push((field.into(), token.into()));
        self
    }

    pub fn with_numeric(mut self, name: impl Into<String>, value: f64) -> Self {
        self.numeric.push((name.into(), value));
        self
    }

    pub fn extend(&mut self, other: FeatureVector) {
        self.categorical.extend(other.categorical);
        self.numeric.extend(other.numeric);
    }
}

/// Stable 64-bit FNV-1a hash of `field ‖ 0xff ‖ token`.
pub fn feature_hash(field: &str, token: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in field.bytes().chain(std::iter::once(0xff)).chain(token.bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Model output. `negative_rate` is present only in two-output mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Output {
    pub rate: f64,
    pub negative_rate: Option<f64>,
}

impl Output {
    /// The signed prediction `rate - negative_rate`.
    pub fn signed(&self) -> f64 {
        self.rate - self.negative_rate.unwrap_or(0.0)
    }

    pub fn parts(&self) -> LabelParts {
        LabelParts {
            positive: self.rate,
            negative: self.negative_rate.unwrap_or(0.0),
        }
    }
}

/// Training label for a single step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Non-negative label for the single-output model.
    Count(f64),
    /// Positive and negative parts for the two-output model.
    Split(LabelParts),
}

#[derive(Debug, Clone)]
struct EmbeddingTable {
    field: String,
    rows: Vec<f64>,
    acc: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Dense {
    name: String,
    inputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    w_acc: Vec<f64>,
    b_acc: Vec<f64>,
}

impl Dense {
    fn new(name: String, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            name,
            inputs,
            weights,
            bias: vec![0.0; outputs],
            w_acc: vec![0.0; inputs * outputs],
            b_acc: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }
}

/// Per-parameter gradient of the loss for one example.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    /// `(field index, row, gradient)` for every embedding row the input
    /// touched.
    pub embedding_rows: Vec<(usize, usize, Vec<f64>)>,
    /// `(weights, bias)` gradients for each hidden layer followed by the
    /// output layer.
    pub dense: Vec<(Vec<f64>, Vec<f64>)>,
}

struct Trace {
    input: Vec<f64>,
    rows: Vec<Option<usize>>,
    /// Post-activation outputs of each hidden layer.
    hidden: Vec<Vec<f64>>,
    log_rates: Vec<f64>,
}

/// A hashed-embedding Poisson network with its AdaGrad state.
#[derive(Debug)]
pub struct PoissonRegressor {
    config: RegressorConfig,
    tables: Vec<EmbeddingTable>,
    /// Hidden layers followed by the output layer.
    layers: Vec<Dense>,
    numeric_scale: Vec<f64>,
    forward_calls: AtomicU64,
}

impl Clone for PoissonRegressor {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            tables: self.tables.clone(),
            layers: self.layers.clone(),
            numeric_scale: self.numeric_scale.clone(),
            forward_calls: AtomicU64::new(self.forward_calls.load(Ordering::Relaxed)),
        }
    }
}

impl PoissonRegressor {
    pub fn new(config: RegressorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let dim = config.embedding_dim;
        let buckets = config.hash_buckets_per_field;
        let tables = config
            .categorical_fields
            .iter()
            .map(|field| EmbeddingTable {
                field: field.clone(),
                rows: (0..buckets * dim).map(|_| rng.random_range(-0.05..0.05)).collect(),
                acc: vec![0.0; buckets * dim],
            })
            .collect();
        let mut layers = Vec::with_capacity(config.hidden_layer_sizes.len() + 1);
        let mut fan_in = config.input_dim();
        for (l, &width) in config.hidden_layer_sizes.iter().enumerate() {
            layers.push(Dense::new(format!("hidden{l}"), fan_in, width, &mut rng));
            fan_in = width;
        }
        let mut output = Dense::new("output".into(), fan_in, config.output_dim(), &mut rng);
        output.bias.fill(config.output_bias_init);
        layers.push(output);
        Ok(Self {
            numeric_scale: vec![1.0; config.numeric_features.len()],
            config,
            tables,
            layers,
            forward_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &RegressorConfig {
        &self.config
    }

    /// Number of [`forward`](Self::forward) calls served so far.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Zeroes every parameter and sets the output bias of each head to
    /// `log_rate`, leaving a constant predictor.
    pub fn reset_to_constant(&mut self, log_rate: f64) {
        for t in &mut self.tables {
            t.rows.fill(0.0);
        }
        for layer in &mut self.layers {
            layer.weights.fill(0.0);
            layer.bias.fill(0.0);
        }
        if let Some(out) = self.layers.last_mut() {
            out.bias.fill(log_rate);
        }
    }

    fn encode(&self, features: &FeatureVector) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
        let dim = self.config.embedding_dim;
        let n_cat = self.tables.len();
        let mut input = vec![0.0; self.config.input_dim()];
        let mut rows = vec![None; n_cat];
        for (field, token) in &features.categorical {
            let f = self
                .tables
                .iter()
                .position(|t| &t.field == field)
                .ok_or_else(|| Error::Schema(format!("unknown categorical field `{field}`")))?;
            if rows[f].is_some() {
                return Err(Error::Schema(format!("field `{field}` given twice")));
            }
            let row = (feature_hash(field, token) % self.config.hash_buckets_per_field as u64) as usize;
            rows[f] = Some(row);
            input[f * dim..(f + 1) * dim]
                .copy_from_slice(&self.tables[f].rows[row * dim..(row + 1) * dim]);
        }
        let base = n_cat * dim;
        let mut seen = vec![false; self.numeric_scale.len()];
        for (name, value) in &features.numeric {
            let k = self
                .config
                .numeric_features
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Schema(format!("unknown numeric feature `{name}`")))?;
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::Schema(format!("numeric feature `{name}` given twice")));
            }
            input[base + k] = value * self.numeric_scale[k];
        }
        Ok((input, rows))
    }

    fn trace(&self, features: &FeatureVector) -> Result<Trace> {
        let (input, rows) = self.encode(features)?;
        let (hidden_layers, output) = self.layers.split_at(self.layers.len() - 1);
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(hidden_layers.len());
        let mut z = Vec::new();
        for layer in hidden_layers {
            layer.affine(hidden.last().map_or(&input[..], |h| &h[..]), &mut z);
            hidden.push(z.iter().map(|v| v.max(0.0)).collect());
        }
        let mut log_rates = Vec::new();
        output[0].affine(hidden.last().map_or(&input[..], |h| &h[..]), &mut log_rates);
        Ok(Trace {
            input,
            rows,
            hidden,
            log_rates,
        })
    }

    /// Predicted rate(s) for `features`.
    pub fn forward(&self, features: &FeatureVector) -> Result<Output> {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let trace = self.trace(features)?;
        Ok(Output {
            rate: trace.log_rates[0].exp(),
            negative_rate: trace.log_rates.get(1).map(|s| s.exp()),
        })
    }

    fn targets(&self, target: Target) -> Result<Vec<f64>> {
        match (target, self.config.two_output_mode) {
            (Target::Count(y), false) if y >= 0.0 => Ok(vec![y]),
            (Target::Split(p), true) if p.positive >= 0.0 && p.negative >= 0.0 => {
                Ok(vec![p.positive, p.negative])
            }
            (t, two) => Err(contract(format!(
                "target {t:?} is not valid for a {} regressor",
                if two { "two-output" } else { "single-output" }
            ))),
        }
    }

    /// Loss and gradient for one example without touching the parameters.
    pub fn gradients(&self, features: &FeatureVector, target: Target) -> Result<Gradients> {
        let labels = self.targets(target)?;
        let trace = self.trace(features)?;
        let mut loss = 0.0;
        let mut delta: Vec<f64> = Vec::with_capacity(labels.len());
        for (s, y) in trace.log_rates.iter().zip(&labels) {
            loss += poisson_nll_lograte(*s, *y);
            delta.push(s.exp() - y);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                block: "output".into(),
            });
        }

        let mut dense = vec![(Vec::new(), Vec::new()); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let x = if l == 0 { &trace.input } else { &trace.hidden[l - 1] };
            let mut gw = vec![0.0; layer.weights.len()];
            for (o, d) in delta.iter().enumerate() {
                if *d != 0.0 {
                    for (g, v) in gw[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(x) {
                        *g = d * v;
                    }
                }
            }
            let mut dx = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d != 0.0 {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (acc, w) in dx.iter_mut().zip(row) {
                        *acc += w * d;
                    }
                }
            }
            dense[l] = (gw, delta);
            // ReLU mask of the layer below; after layer 0 `dx` is the input
            // gradient.
            if l > 0 {
                for (g, h) in dx.iter_mut().zip(&trace.hidden[l - 1]) {
                    if *h <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = dx;
        }

        let dim = self.config.embedding_dim;
        let embedding_rows = trace
            .rows
            .iter()
            .enumerate()
            .filter_map(|(f, row)| row.map(|r| (f, r, delta[f * dim..(f + 1) * dim].to_vec())))
            .collect();

        let grads = Gradients {
            loss,
            embedding_rows,
            dense,
        };
        self.check_finite(&grads)?;
        Ok(grads)
    }

    fn check_finite(&self, g: &Gradients) -> Result<()> {
        for (f, _, row) in &g.embedding_rows {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "gradient",
                    block: format!("embedding/{}", self.tables[*f].field),
                });
            }
        }
        for (layer, (gw, gb)) in self.layers.iter().zip(&g.dense) {
            if gw.iter().chain(gb).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "gradient",
                    block: layer.name.clone(),
                });
            }
        }
        Ok(())
    }

    /// One online AdaGrad step. Returns the loss before the update.
    pub fn train_step(&mut self, features: &FeatureVector, target: Target) -> Result<f64> {
        let grads = self.gradients(features, target)?;
        self.apply(&grads);
        Ok(grads.loss)
    }

    /// Applies `G += g^2; w -= lr * g / (sqrt(G) + eps)` to every parameter
    /// with a non-zero gradient.
    pub fn apply(&mut self, grads: &Gradients) {
        let lr = self.config.learning_rate;
        let eps = self.config.adagrad_epsilon;
        let dim = self.config.embedding_dim;
        for (f, row, g) in &grads.embedding_rows {
            let t = &mut self.tables[*f];
            let span = row * dim..(row + 1) * dim;
            adagrad(&mut t.rows[span.clone()], &mut t.acc[span], g, lr, eps);
        }
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.dense) {
            adagrad(&mut layer.weights, &mut layer.w_acc, gw, lr, eps);
            adagrad(&mut layer.bias, &mut layer.b_acc, gb, lr, eps);
        }
    }

    /// Parameter arrays in declaration order: embedding tables, then
    /// weights and bias of each dense layer.
    pub fn parameter_blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = self
            .tables
            .iter()
            .map(|t| (format!("embedding/{}", t.field), t.rows.as_slice()))
            .collect();
        for l in &self.layers {
            out.push((format!("{}/weights", l.name), &l.weights));
            out.push((format!("{}/bias", l.name), &l.bias));
        }
        out
    }

    pub fn parameter_blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = self
            .tables
            .iter_mut()
            .map(|t| (format!("embedding/{}", t.field), t.rows.as_mut_slice()))
            .collect();
        for l in &mut self.layers {
            out.push((format!("{}/weights", l.name), l.weights.as_mut_slice()));
            out.push((format!("{}/bias", l.name), l.bias.as_mut_slice()));
        }
        out
    }

    /// AdaGrad accumulators, aligned with [`parameter_blocks`](Self::parameter_blocks).
    pub fn accumulator_blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = self
            .tables
            .iter()
            .map(|t| (format!("embedding/{}", t.field), t.acc.as_slice()))
            .collect();
        for l in &self.layers {
            out.push((format!("{}/weights", l.name), &l.w_acc));
            out.push((format!("{}/bias", l.name), &l.b_acc));
        }
        out
    }

    fn accumulator_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.tables.iter_mut().map(|t| t.acc.as_mut_slice()).collect();
        for l in &mut self.layers {
            out.push(l.w_acc.as_mut_slice());
            out.push(l.b_acc.as_mut_slice());
        }
        out
    }

    /// Gradient laid out like [`parameter_blocks`](Self::parameter_blocks),
    /// with zeros for untouched embedding rows.
    pub fn dense_gradient(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        let dim = self.config.embedding_dim;
        let mut out: Vec<Vec<f64>> = self.tables.iter().map(|t| vec![0.0; t.rows.len()]).collect();
        for (f, row, g) in &grads.embedding_rows {
            out[*f][row * dim..(row + 1) * dim].copy_from_slice(g);
        }
        for (gw, gb) in &grads.dense {
            out.push(gw.clone());
            out.push(gb.clone());
        }
        out
    }

    /// Hash bucket an input token maps to.
    pub fn bucket_of(&self, field: &str, token: &str) -> usize {
        (feature_hash(field, token) % self.config.hash_buckets_per_field as u64) as usize
    }
}

fn adagrad(params: &mut [f64], acc: &mut [f64], grad: &[f64], lr: f64, eps: f64) {
    for ((w, g2), g) in params.iter_mut().zip(acc.iter_mut()).zip(grad) {
        if *g != 0.0 {
            *g2 += g * g;
            *w -= lr * g / (g2.sqrt() + eps);
        }
    }
}
