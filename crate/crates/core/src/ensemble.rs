//! The delay-adjusted model: one fully separate regressor per delay bucket.
//!
//! With thermometer encoding, sub-model `f_i` predicts the label mass in
//! `[d_i, M)`. It trains once the example is `d_{i+1}` old, on the observed
//! slice `[d_i, d_{i+1})` plus the current prediction of `f_{i+1}` for the
//! rest. `f_n` trains on its fully observed tail at age `M`. Sub-models
//! `f_i` with `i >= 1` also see the label observed before `d_i`. Serving a
//! fresh click needs only `f_0`.
//!
//! With bucket encoding, sub-model `g_i` predicts only `[d_i, d_{i+1})`,
//! trains on that slice once it is complete, and serving sums all of them.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::regressor::{FeatureVector, Output, PoissonRegressor, RegressorConfig, Target};
use crate::types::{ClickExample, DelayBucketing, LabelParts};

/// Numeric input carrying `ln(1 + label so far)`.
pub const AUX_NUMERIC: &str = "label_so_far";
/// Categorical input carrying the bucketed label so far.
pub const AUX_TOKEN: &str = "label_so_far_bucket";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Encoding {
    Thermometer,
    Bucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub bucketing: DelayBucketing,
    /// Template for every sub-model; its feature schema is the serving
    /// schema. Auxiliary inputs are appended per sub-model.
    pub regressor: RegressorConfig,
    pub encoding: Encoding,
    pub use_aux: bool,
    /// Integer cut points for the categorical aux token.
    pub aux_count_buckets: Vec<u32>,
}

/// Cut points giving the tokens `0, 1, 2, 3-4, 5-8, 9+`.
pub const DEFAULT_AUX_CUTS: [u32; 5] = [1, 2, 3, 5, 9];

impl EnsembleConfig {
    pub fn new(bucketing: DelayBucketing, regressor: RegressorConfig, encoding: Encoding, use_aux: bool) -> Self {
        Self {
            bucketing,
            regressor,
            encoding,
            use_aux,
            aux_count_buckets: DEFAULT_AUX_CUTS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoding == Encoding::Bucket && self.use_aux {
            return Err(Error::Config(
                "bucket encoding cannot use auxiliary features: every bucket model serves fresh clicks".into(),
            ));
        }
        if self.aux_count_buckets.is_empty()
            || self.aux_count_buckets[0] == 0
            || self.aux_count_buckets.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "aux cut points must be positive and strictly increasing, got {:?}",
                self.aux_count_buckets
            )));
        }
        let reserved = [AUX_NUMERIC, AUX_TOKEN];
        if self
            .regressor
            .categorical_fields
            .iter()
            .chain(&self.regressor.numeric_features)
            .any(|f| reserved.contains(&f.as_str()))
        {
            return Err(Error::Config(format!("feature names {reserved:?} are reserved")));
        }
        self.regressor.validate()
    }

    /// Whether sub-model `i` receives the label-so-far inputs.
    pub fn has_aux(&self, i: usize) -> bool {
        self.use_aux && self.encoding == Encoding::Thermometer && i >= 1
    }

    fn sub_model_config(&self, i: usize) -> RegressorConfig {
        let mut c = self.regressor.clone();
        c.rng_seed = mix_seed(self.regressor.rng_seed, i as u64);
        // The template's initial rate is for the whole label; spread it
        // evenly over the buckets each sub-model covers.
        let buckets = self.bucketing.sub_model_count();
        let covered = match self.encoding {
            Encoding::Thermometer => buckets - i,
            Encoding::Bucket => 1,
        };
        c.output_bias_init += (covered as f64 / buckets as f64).ln();
        if self.has_aux(i) {
            c.categorical_fields.push(AUX_TOKEN.into());
            c.numeric_features.push(AUX_NUMERIC.into());
        }
        c
    }
}

fn mix_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed ^ (i + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Token for a label-so-far value under integer cut points `c_0 < c_1 < …`:
/// intervals `[0, c_0), [c_0, c_1), …, [c_last, ∞)` named `"a"` for a single
/// integer, `"a-b"` for a range and `"c+"` for the open tail.
pub fn count_bucket_token(value: f64, cuts: &[u32]) -> String {
    let idx = cuts.iter().take_while(|&&c| f64::from(c) <= value).count();
    let lo = if idx == 0 { 0 } else { cuts[idx - 1] };
    match cuts.get(idx) {
        None => format!("{lo}+"),
        Some(&hi) if hi - lo <= 1 => lo.to_string(),
        Some(&hi) => format!("{lo}-{}", hi - 1),
    }
}

/// Serving-time features `X_p` of an example.
pub fn serving_features(example: &ClickExample) -> FeatureVector {
    FeatureVector {
        categorical: example
            .features
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        numeric: Vec::new(),
    }
}

/// Anything that can predict the label mass in `[d_m, M)` from what is
/// observable at age `d_m`.
pub trait TailPredictor {
    fn predict_tail(&self, example: &ClickExample, m: usize) -> Result<f64>;
}

/// Completed label estimate at time `now`: the observed mass before `d_m`
/// plus the predicted tail from `d_m`, where `d_m` is the latest boundary
/// the example's age has passed. Events seen in `[d_m, age)` are ignored.
/// Fully matured examples return their true label.
pub fn estimate_mature_label<P: TailPredictor + ?Sized>(
    predictor: &P,
    bucketing: &DelayBucketing,
    example: &ClickExample,
    now: f64,
) -> Result<f64> {
    if now < example.click_time {
        return Err(contract(format!(
            "estimate requested at {now}, before the click at {}",
            example.click_time
        )));
    }
    let age = example.age_at(now);
    if age >= bucketing.attribution_window() {
        return Ok(example.mature_label());
    }
    let m = bucketing.index_for_age(age);
    let known = example.observed_prefix(bucketing.start(m))?;
    Ok(known + predictor.predict_tail(example, m)?)
}

/// Sub-models `f_0 … f_n`, sharing no parameters.
#[derive(Debug, Clone)]
pub struct SubModelEnsemble {
    config: EnsembleConfig,
    sub_models: Vec<PoissonRegressor>,
    clamped_labels: u64,
}

impl SubModelEnsemble {
    pub fn new(config: EnsembleConfig) -> Result<Self> {
        config.validate()?;
        let sub_models = (0..config.bucketing.sub_model_count())
            .map(|i| PoissonRegressor::new(config.sub_model_config(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            sub_models,
            clamped_labels: 0,
        })
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    pub fn bucketing(&self) -> &DelayBucketing {
        &self.config.bucketing
    }

    pub fn sub_models(&self) -> &[PoissonRegressor] {
        &self.sub_models
    }

    pub fn sub_model_mut(&mut self, i: usize) -> &mut PoissonRegressor {
        &mut self.sub_models[i]
    }

    /// Completed single-output labels that went negative and were clamped.
    pub fn clamped_labels(&self) -> u64 {
        self.clamped_labels
    }

    /// Total forward passes across all sub-models.
    pub fn forward_calls(&self) -> u64 {
        self.sub_models.iter().map(PoissonRegressor::forward_calls).sum()
    }

    /// Label-so-far inputs for sub-model `i`, computed only from events with
    /// delay below `d_i`.
    pub fn aux_features(&self, example: &ClickExample, i: usize) -> Result<FeatureVector> {
        aux_features(&self.config, example, i)
    }

    fn features_for(&self, example: &ClickExample, i: usize) -> Result<FeatureVector> {
        let mut fv = serving_features(example);
        if self.config.has_aux(i) {
            fv.extend(self.aux_features(example, i)?);
        }
        Ok(fv)
    }

    /// Prediction of the full mature label at click time.
    pub fn serve(&self, example: &ClickExample) -> Result<Output> {
        let fv = serving_features(example);
        match self.config.encoding {
            Encoding::Thermometer => self.sub_models[0].forward(&fv),
            Encoding::Bucket => {
                let mut total = LabelParts::default();
                for m in &self.sub_models {
                    total = total + m.forward(&fv)?.parts();
                }
                Ok(Output {
                    rate: total.positive,
                    negative_rate: self.config.regressor.two_output_mode.then_some(total.negative),
                })
            }
        }
    }

    /// `(train_time, sub_model_index)` pairs, ascending: sub-model `i`
    /// trains when the click is `d_{i+1}` old, the last one at `M`.
    pub fn training_schedule(&self, example: &ClickExample) -> Vec<(f64, usize)> {
        training_schedule(&self.config.bucketing, example)
    }

    /// Age at which sub-model `i` may train on an example.
    pub fn required_age(&self, i: usize) -> f64 {
        self.config.bucketing.end(i)
    }

    /// Training label of sub-model `i` under the current state of the later
    /// sub-models.
    pub fn training_label(&self, example: &ClickExample, i: usize) -> Result<LabelParts> {
        let b = &self.config.bucketing;
        if i >= b.sub_model_count() {
            return Err(contract(format!("sub-model index {i} out of range")));
        }
        let slice = example.window_parts(b.start(i), b.end(i));
        if self.config.encoding == Encoding::Bucket || i == b.n() {
            return Ok(slice);
        }
        let next = self.sub_models[i + 1].forward(&self.features_for(example, i + 1)?)?;
        Ok(slice + next.parts())
    }

    /// One training step of sub-model `i` on `example`. Returns its loss.
    pub fn train_on(&mut self, example: &ClickExample, i: usize) -> Result<f64> {
        let label = self.training_label(example, i)?;
        let target = if self.config.regressor.two_output_mode {
            Target::Split(label)
        } else {
            let signed = label.signed();
            if signed < 0.0 {
                self.clamped_labels += 1;
            }
            Target::Count(signed.max(0.0))
        };
        let fv = self.features_for(example, i)?;
        self.sub_models[i].train_step(&fv, target)
    }

    /// Completed label estimate at `now`; thermometer encoding only.
    pub fn estimate_mature_label(&self, example: &ClickExample, now: f64) -> Result<f64> {
        if self.config.encoding != Encoding::Thermometer {
            return Err(contract("label completion needs thermometer encoding"));
        }
        estimate_mature_label(self, &self.config.bucketing, example, now)
    }
}

impl TailPredictor for SubModelEnsemble {
    fn predict_tail(&self, example: &ClickExample, m: usize) -> Result<f64> {
        let fv = self.features_for(example, m)?;
        Ok(self.sub_models[m].forward(&fv)?.signed())
    }
}

pub(crate) fn aux_features(config: &EnsembleConfig, example: &ClickExample, i: usize) -> Result<FeatureVector> {
    let b = &config.bucketing;
    if i == 0 || i > b.n() {
        return Err(contract(format!(
            "aux features exist for sub-models 1..={}, not {i}",
            b.n()
        )));
    }
    let so_far = example.observed_prefix(b.start(i))?.max(0.0);
    Ok(FeatureVector::new()
        .with_token(AUX_TOKEN, count_bucket_token(so_far, &config.aux_count_buckets))
        .with_numeric(AUX_NUMERIC, so_far.ln_1p()))
}

pub(crate) fn training_schedule(bucketing: &DelayBucketing, example: &ClickExample) -> Vec<(f64, usize)> {
    (0..bucketing.sub_model_count())
        .map(|i| (example.click_time + bucketing.end(i), i))
        .collect()
}
