//! The comparison matrix: single-delay baselines and ensemble ablations
//! behind one model interface.

use serde::{Deserialize, Serialize};

use crate::ensemble::{serving_features, Encoding, EnsembleConfig, SubModelEnsemble};
use crate::error::{contract, Error, Result};
use crate::regressor::{Output, PoissonRegressor, RegressorConfig, Target};
use crate::types::{ClickExample, DelayBucketing, LabelParts, DAY, HOUR};

/// Report names of the standard matrix, in display order.
pub const VARIANT_NAMES: [&str; 8] = ["M1", "M2_7d", "M2_15d", "M3", "M4", "M5", "Proposed", "Oracle"];

/// Default minimal training delay of the naive baseline.
pub const DEFAULT_DELTA_MIN: f64 = 6.0 * HOUR;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LabelMode {
    /// Whatever was observed by the training delay.
    PrefixAtDelay,
    /// The full label, whenever training happens.
    Mature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VariantKind {
    SingleDelay {
        #[serde(with = "crate::duration")]
        delay: f64,
        label_mode: LabelMode,
    },
    Ensemble { ensemble_config: EnsembleConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: VariantKind,
    /// Regressor of SINGLE_DELAY variants; ensembles carry their own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regressor: Option<RegressorConfig>,
}

/// Shared settings from which the standard matrix is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixDefaults {
    pub bucketing: DelayBucketing,
    pub regressor: RegressorConfig,
    #[serde(with = "crate::duration")]
    pub delta_min: f64,
    #[serde(with = "crate::duration::list")]
    pub m2_delays: Vec<f64>,
}

impl Default for MatrixDefaults {
    fn default() -> Self {
        Self {
            bucketing: DelayBucketing::default_days(),
            regressor: RegressorConfig::default(),
            delta_min: DEFAULT_DELTA_MIN,
            m2_delays: vec![7.0 * DAY, 15.0 * DAY],
        }
    }
}

/// `M2_7d` style name for a training delay.
pub fn m2_name(delay: f64) -> String {
    if delay % DAY == 0.0 {
        format!("M2_{}d", delay / DAY)
    } else if delay % HOUR == 0.0 {
        format!("M2_{}h", delay / HOUR)
    } else {
        format!("M2_{delay}s")
    }
}

impl VariantSpec {
    pub fn single(name: impl Into<String>, delay: f64, label_mode: LabelMode, regressor: RegressorConfig) -> Self {
        Self {
            name: name.into(),
            kind: VariantKind::SingleDelay { delay, label_mode },
            regressor: Some(regressor),
        }
    }

    pub fn ensemble(name: impl Into<String>, ensemble_config: EnsembleConfig) -> Self {
        Self {
            name: name.into(),
            kind: VariantKind::Ensemble { ensemble_config },
            regressor: None,
        }
    }

    pub fn m1(d: &MatrixDefaults) -> Self {
        Self::single("M1", d.delta_min, LabelMode::PrefixAtDelay, d.regressor.clone())
    }

    pub fn m2(d: &MatrixDefaults, delay: f64) -> Self {
        Self::single(m2_name(delay), delay, LabelMode::PrefixAtDelay, d.regressor.clone())
    }

    pub fn m3(d: &MatrixDefaults) -> Self {
        Self::single("M3", d.bucketing.attribution_window(), LabelMode::Mature, d.regressor.clone())
    }

    pub fn oracle(d: &MatrixDefaults) -> Self {
        Self::single("Oracle", 0.0, LabelMode::Mature, d.regressor.clone())
    }

    pub fn m4(d: &MatrixDefaults) -> Self {
        Self::ensemble("M4", EnsembleConfig::new(d.bucketing.clone(), d.regressor.clone(), Encoding::Bucket, false))
    }

    pub fn m5(d: &MatrixDefaults) -> Self {
        Self::ensemble("M5", EnsembleConfig::new(d.bucketing.clone(), d.regressor.clone(), Encoding::Thermometer, false))
    }

    pub fn proposed(d: &MatrixDefaults) -> Self {
        Self::ensemble(
            "Proposed",
            EnsembleConfig::new(d.bucketing.clone(), d.regressor.clone(), Encoding::Thermometer, true),
        )
    }

    /// Every variant, in [`VARIANT_NAMES`] order for the default delays.
    pub fn standard_matrix(d: &MatrixDefaults) -> Vec<Self> {
        let mut v = vec![Self::m1(d)];
        v.extend(d.m2_delays.iter().map(|&delay| Self::m2(d, delay)));
        v.extend([Self::m3(d), Self::m4(d), Self::m5(d), Self::proposed(d), Self::oracle(d)]);
        v
    }

    /// One variant of the standard matrix by report name.
    pub fn by_name(name: &str, d: &MatrixDefaults) -> Result<Self> {
        Self::standard_matrix(d)
            .into_iter()
            .find(|v| v.name == name)
            .ok_or_else(|| {
                let valid: Vec<String> = Self::standard_matrix(d).into_iter().map(|v| v.name).collect();
                Error::Config(format!("unknown variant `{name}`; valid names: {}", valid.join(", ")))
            })
    }

    /// Trains on labels no deployed system could have at that time.
    pub fn impossible_in_practice(&self) -> bool {
        matches!(self.kind, VariantKind::SingleDelay { delay, label_mode: LabelMode::Mature } if delay == 0.0)
    }

    /// Note attached to reports.
    pub fn note(&self) -> Option<&'static str> {
        self.impossible_in_practice().then_some("upper bound, impossible in practice")
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            VariantKind::SingleDelay { delay, .. } => {
                if !(delay.is_finite() && *delay >= 0.0) {
                    return Err(Error::Config(format!("variant {}: delay must be non-negative, got {delay}", self.name)));
                }
                self.regressor
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("variant {} needs a regressor config", self.name)))?
                    .validate()
            }
            VariantKind::Ensemble { ensemble_config } => ensemble_config.validate(),
        }
    }

    pub fn build(&self) -> Result<VariantModel> {
        self.validate()?;
        match &self.kind {
            VariantKind::SingleDelay { delay, label_mode } => Ok(VariantModel::Single(SingleDelayModel {
                delay: *delay,
                label_mode: *label_mode,
                regressor: PoissonRegressor::new(self.regressor.clone().expect("validated"))?,
            })),
            VariantKind::Ensemble { ensemble_config } => {
                Ok(VariantModel::Ensemble(SubModelEnsemble::new(ensemble_config.clone())?))
            }
        }
    }
}

/// One regressor trained once per example at a fixed age.
#[derive(Debug, Clone)]
pub struct SingleDelayModel {
    delay: f64,
    label_mode: LabelMode,
    regressor: PoissonRegressor,
}

impl SingleDelayModel {
    pub fn regressor(&self) -> &PoissonRegressor {
        &self.regressor
    }

    pub fn training_label(&self, example: &ClickExample) -> Result<LabelParts> {
        let m = example.attribution_window;
        match self.label_mode {
            LabelMode::PrefixAtDelay => {
                if self.delay > m {
                    return Err(contract(format!("training delay {} exceeds the attribution window {m}", self.delay)));
                }
                Ok(example.window_parts(0.0, self.delay))
            }
            LabelMode::Mature => Ok(example.window_parts(0.0, m)),
        }
    }
}

/// A built variant. The harness talks to every variant through these
/// methods only.
#[derive(Debug, Clone)]
pub enum VariantModel {
    Single(SingleDelayModel),
    Ensemble(SubModelEnsemble),
}

impl VariantModel {
    /// Prediction at click time from serving features alone.
    pub fn serve(&self, example: &ClickExample) -> Result<Output> {
        match self {
            VariantModel::Single(s) => s.regressor.forward(&serving_features(example)),
            VariantModel::Ensemble(e) => e.serve(example),
        }
    }

    /// `(train_time, sub_model_index)` pairs, ascending in time.
    pub fn training_schedule(&self, example: &ClickExample) -> Vec<(f64, usize)> {
        match self {
            VariantModel::Single(s) => vec![(example.click_time + s.delay, 0)],
            VariantModel::Ensemble(e) => e.training_schedule(example),
        }
    }

    /// Minimum example age at which sub-model `i` may train.
    pub fn required_age(&self, i: usize) -> f64 {
        match self {
            VariantModel::Single(s) => s.delay,
            VariantModel::Ensemble(e) => e.required_age(i),
        }
    }

    pub fn training_label(&self, example: &ClickExample, i: usize) -> Result<LabelParts> {
        match self {
            VariantModel::Single(s) => {
                if i != 0 {
                    return Err(contract(format!("single-delay variants have one sub-model, got index {i}")));
                }
                s.training_label(example)
            }
            VariantModel::Ensemble(e) => e.training_label(example, i),
        }
    }

    /// One training step; returns the pre-update loss.
    pub fn train_on(&mut self, example: &ClickExample, i: usize) -> Result<f64> {
        match self {
            VariantModel::Single(s) => {
                if i != 0 {
                    return Err(contract(format!("single-delay variants have one sub-model, got index {i}")));
                }
                let label = s.training_label(example)?;
                let target = if s.regressor.config().two_output_mode {
                    Target::Split(label)
                } else {
                    Target::Count(label.signed().max(0.0))
                };
                s.regressor.train_step(&serving_features(example), target)
            }
            VariantModel::Ensemble(e) => e.train_on(example, i),
        }
    }

    pub fn two_output(&self) -> bool {
        match self {
            VariantModel::Single(s) => s.regressor.config().two_output_mode,
            VariantModel::Ensemble(e) => e.config().regressor.two_output_mode,
        }
    }

    pub fn forward_calls(&self) -> u64 {
        match self {
            VariantModel::Single(s) => s.regressor.forward_calls(),
            VariantModel::Ensemble(e) => e.forward_calls(),
        }
    }

    pub fn as_ensemble(&self) -> Option<&SubModelEnsemble> {
        match self {
            VariantModel::Ensemble(e) => Some(e),
            VariantModel::Single(_) => None,
        }
    }
}
