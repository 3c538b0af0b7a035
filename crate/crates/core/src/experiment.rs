//! Experiment configuration, seeding and multi-variant orchestration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{generate, GeneratedStream, StreamConfig};
use crate::error::{Error, Result};
use crate::harness::{compare, run, ExperimentReport, RunOptions, RunResult, SliceSet, ARTIFACT_VERSION};
use crate::regressor::RegressorConfig;
use crate::types::{DelayBucketing, DAY};
use crate::variants::{MatrixDefaults, VariantSpec, DEFAULT_DELTA_MIN, VARIANT_NAMES};

pub const CONFIG_SCHEMA_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceConfig {
    #[serde(with = "crate::duration")]
    pub new_campaign_max_age: f64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            new_campaign_max_age: 10.0 * DAY,
        }
    }
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: String,
    pub stream: StreamConfig,
    /// Directory written by `gen`; when set the stream is loaded rather
    /// than generated and seeds only vary model initialization.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stream_path: Option<PathBuf>,
    pub bucketing: DelayBucketing,
    /// Merged over [`default_regressor`], so a partial object keeps the
    /// stream's feature schema.
    #[serde(deserialize_with = "regressor_over_defaults")]
    pub regressor: RegressorConfig,
    #[serde(with = "crate::duration")]
    pub delta_min: f64,
    #[serde(with = "crate::duration::list")]
    pub m2_delays: Vec<f64>,
    /// Variants to run; empty means the full matrix.
    pub variants: Vec<String>,
    /// Per-variant JSON patches applied to the regressor settings.
    pub overrides: BTreeMap<String, serde_json::Value>,
    pub slices: SliceConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
}

/// Regressor settings for the synthetic streams' feature schema.
pub fn default_regressor() -> RegressorConfig {
    RegressorConfig {
        categorical_fields: vec!["campaign".into(), "segment".into(), "context".into()],
        ..RegressorConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION.into(),
            stream: StreamConfig::default(),
            stream_path: None,
            bucketing: DelayBucketing::default_days(),
            regressor: default_regressor(),
            delta_min: DEFAULT_DELTA_MIN,
            m2_delays: vec![7.0 * DAY, 15.0 * DAY],
            variants: Vec::new(),
            overrides: BTreeMap::new(),
            slices: SliceConfig::default(),
            output_dir: None,
            seeds: vec![1],
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version `{}`, expected `{CONFIG_SCHEMA_VERSION}`",
                self.schema_version
            )));
        }
        if self.stream_path.is_none() {
            self.stream.validate()?;
            if self.stream.attribution_window != self.bucketing.attribution_window() {
                return Err(Error::Config(format!(
                    "stream attribution window {}s differs from the bucketing's {}s",
                    self.stream.attribution_window,
                    self.bucketing.attribution_window()
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.slices.new_campaign_max_age > 0.0) {
            return Err(Error::Config("new_campaign_max_age must be positive".into()));
        }
        for name in self.overrides.keys() {
            if !self.matrix_defaults(0).variant_names().contains(name) {
                return Err(Error::Config(format!("override for unknown variant `{name}`")));
            }
        }
        for spec in self.variant_specs(0)? {
            spec.validate()?;
        }
        Ok(())
    }

    /// Stable SHA-256 over the canonical JSON form. The output directory
    /// does not affect results and is left out.
    pub fn digest(&self) -> String {
        let keyed = Self {
            output_dir: None,
            ..self.clone()
        };
        let canonical = serde_json::to_value(&keyed).expect("config serializes").to_string();
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    fn matrix_defaults(&self, seed: u64) -> MatrixDefaults {
        MatrixDefaults {
            bucketing: self.bucketing.clone(),
            regressor: RegressorConfig {
                rng_seed: seed,
                ..self.regressor.clone()
            },
            delta_min: self.delta_min,
            m2_delays: self.m2_delays.clone(),
        }
    }

    /// Variants to run for `seed`, with overrides applied.
    pub fn variant_specs(&self, seed: u64) -> Result<Vec<VariantSpec>> {
        let d = self.matrix_defaults(seed);
        let names = if self.variants.is_empty() { d.variant_names() } else { self.variants.clone() };
        let mut out = Vec::with_capacity(names.len());
        for name in &names {
            let mut spec = VariantSpec::by_name(name, &d)?;
            if let Some(patch) = self.overrides.get(name) {
                apply_override(&mut spec, patch)?;
            }
            out.push(spec);
        }
        Ok(out)
    }

    /// The stream for `seed`: loaded from `stream_path` or generated.
    pub fn stream(&self, seed: u64) -> Result<GeneratedStream> {
        match &self.stream_path {
            Some(dir) => GeneratedStream::read_dir(dir),
            None => generate(&StreamConfig {
                rng_seed: seed,
                ..self.stream.clone()
            }),
        }
    }

    pub fn slice_set(&self, stream: &GeneratedStream) -> SliceSet {
        let mut s = SliceSet::for_population(&stream.population);
        s.new_campaign_max_age = self.slices.new_campaign_max_age;
        s
    }
}

impl MatrixDefaults {
    pub fn variant_names(&self) -> Vec<String> {
        VariantSpec::standard_matrix(self).into_iter().map(|v| v.name).collect()
    }
}

fn merge_json(target: &mut serde_json::Value, patch: &serde_json::Value) {
    match (target, patch) {
        (serde_json::Value::Object(t), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge_json(t.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (t, p) => *t = p.clone(),
    }
}

fn regressor_over_defaults<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<RegressorConfig, D::Error> {
    let patch = serde_json::Value::deserialize(d)?;
    let mut value = serde_json::to_value(default_regressor()).expect("regressor serializes");
    merge_json(&mut value, &patch);
    serde_json::from_value(value).map_err(serde::de::Error::custom)
}

fn apply_override(spec: &mut VariantSpec, patch: &serde_json::Value) -> Result<()> {
    let bad = |e: serde_json::Error| Error::Config(format!("override for {}: {e}", spec.name));
    let target = match &mut spec.kind {
        crate::variants::VariantKind::SingleDelay { .. } => spec.regressor.as_mut().expect("single-delay regressor"),
        crate::variants::VariantKind::Ensemble { ensemble_config } => &mut ensemble_config.regressor,
    };
    let mut value = serde_json::to_value(&*target).expect("regressor serializes");
    merge_json(&mut value, patch);
    *target = serde_json::from_value(value).map_err(bad)?;
    Ok(())
}

/// Runs the configured variants over one seed's stream and compares them.
/// At most `jobs` variants train concurrently.
pub fn run_seed(config: &ExperimentConfig, seed: u64, jobs: usize, options: &RunOptions) -> Result<(ExperimentReport, Vec<RunResult>)> {
    let stream = config.stream(seed)?;
    let slices = config.slice_set(&stream);
    let specs = config.variant_specs(seed)?;
    let mut options = options.clone();
    options.stream_end.get_or_insert(stream.duration());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let runs: Vec<RunResult> = pool.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                log::info!("seed {seed}: running {}", spec.name);
                run(spec, &stream.examples, &slices, &options)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let report = compare(&config.digest(), &runs)?;
    Ok((report, runs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Sample mean and (n - 1) standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Self { mean, std: var.sqrt(), n })
    }
}

/// Per-metric mean and standard deviation over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub config_digest: String,
    pub artifact_version: String,
    pub seeds: Vec<u64>,
    /// variant → slice → metric → summary.
    pub variants: BTreeMap<String, BTreeMap<String, BTreeMap<String, MeanStd>>>,
}

impl AggregateReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn aggregate(seeds: &[u64], reports: &[ExperimentReport]) -> Result<AggregateReport> {
    let digest = reports
        .first()
        .map(|r| r.config_digest.clone())
        .ok_or_else(|| Error::Config("no reports to aggregate".into()))?;
    if let Some(r) = reports.iter().find(|r| r.config_digest != digest) {
        return Err(Error::DigestMismatch(digest, r.config_digest.clone()));
    }
    let mut values: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (v, vr) in &r.variants {
            for (slice, s) in &vr.slices {
                for (metric, value) in [("pll", s.pll), ("bias", s.bias), ("pll_vs_M3_pct", s.pll_vs_m3_pct)] {
                    if let Some(x) = value {
                        values.entry((v.clone(), slice.clone(), metric.into())).or_default().push(x);
                    }
                }
            }
        }
    }
    let mut variants: BTreeMap<String, BTreeMap<String, BTreeMap<String, MeanStd>>> = BTreeMap::new();
    for ((v, slice, metric), xs) in values {
        if let Some(ms) = MeanStd::of(&xs) {
            variants.entry(v).or_default().entry(slice).or_default().insert(metric, ms);
        }
    }
    Ok(AggregateReport {
        config_digest: digest,
        artifact_version: ARTIFACT_VERSION.into(),
        seeds: seeds.to_vec(),
        variants,
    })
}

/// Names accepted by `--variant`, besides `all`.
pub fn valid_variant_names() -> Vec<String> {
    VARIANT_NAMES.iter().map(|s| s.to_string()).collect()
}
