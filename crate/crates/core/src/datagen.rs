//! Deterministic synthetic click streams with known delay distributions.
//!
//! Each click of campaign `c` draws a latent intensity
//! `theta = s * Gamma(alpha_c, rate beta_c)`, where `s` is the product of
//! the click's segment and context multipliers (and the campaign's drift
//! factor, when enabled). Its conversion count is `Poisson(theta)` and each
//! conversion's delay is drawn from the campaign's delay mixture truncated
//! to the attribution window. Because the delay split is an independent
//! thinning, the head and tail counts are conditionally independent
//! Poissons given `theta` and correlated through it, which gives the
//! closed-form posterior used as an oracle sub-model.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, LogNormal, Normal, Poisson, Weibull};
use serde::{Deserialize, Serialize};

use crate::ensemble::TailPredictor;
use crate::error::{contract, Error, Result};
use crate::types::{ClickExample, ConversionEvent, DelayBucketing, DAY, HOUR};

pub const STREAM_SCHEMA_VERSION: &str = "v1";

/// One parametric delay family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DelayComponent {
    Exponential { mean: f64 },
    Weibull { shape: f64, scale: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl DelayComponent {
    pub fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t.is_infinite() {
            return 1.0;
        }
        match *self {
            DelayComponent::Exponential { mean } => -(-t / mean).exp_m1(),
            DelayComponent::Weibull { shape, scale } => -(-(t / scale).powf(shape)).exp_m1(),
            DelayComponent::LogNormal { mu, sigma } => {
                0.5 * libm::erfc(-(t.ln() - mu) / (sigma * std::f64::consts::SQRT_2))
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            DelayComponent::Exponential { mean } => Exp::new(1.0 / mean).expect("validated").sample(rng),
            DelayComponent::Weibull { shape, scale } => Weibull::new(scale, shape).expect("validated").sample(rng),
            DelayComponent::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).expect("validated").sample(rng),
        }
    }

    fn is_valid(&self) -> bool {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            DelayComponent::Exponential { mean } => pos(mean),
            DelayComponent::Weibull { shape, scale } => pos(shape) && pos(scale),
            DelayComponent::LogNormal { mu, sigma } => mu.is_finite() && pos(sigma),
        }
    }
}

/// Weighted mixture of delay families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayMixture {
    pub components: Vec<(f64, DelayComponent)>,
}

impl DelayMixture {
    pub fn single(component: DelayComponent) -> Self {
        Self {
            components: vec![(1.0, component)],
        }
    }

    /// Untruncated mixture CDF.
    pub fn cdf(&self, t: f64) -> f64 {
        self.components.iter().map(|(w, c)| w * c.cdf(t)).sum()
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let mut u: f64 = rng.random();
        for (w, c) in &self.components {
            if u < *w {
                return c.sample(rng);
            }
            u -= w;
        }
        self.components.last().expect("non-empty").1.sample(rng)
    }
}

/// Distribution of a single conversion's value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueDistribution {
    Unit,
    LogNormal { mu: f64, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignProfile {
    pub campaign_id: u32,
    pub start_time: f64,
    /// Gamma shape `alpha` of the per-click intensity.
    pub gamma_shape: f64,
    /// Gamma rate `beta` of the per-click intensity.
    pub gamma_rate: f64,
    pub delay: DelayMixture,
    pub attribution_window: f64,
    /// Multiplicative change of the intensity per simulated day; 1.0 means
    /// stationary.
    pub drift_per_day: f64,
    /// Relative share of traffic while active.
    pub traffic_weight: f64,
    pub segment_weights: Vec<f64>,
    pub context_weights: Vec<f64>,
    pub retraction_prob: f64,
    /// Mean time between a conversion and its retraction.
    pub retraction_delay_mean: f64,
    pub value: ValueDistribution,
}

impl CampaignProfile {
    /// A stationary campaign with a single delay family and uniform
    /// segments; handy for controlled experiments.
    pub fn simple(campaign_id: u32, alpha: f64, beta: f64, delay: DelayComponent, attribution_window: f64) -> Self {
        Self {
            campaign_id,
            start_time: -365.0 * DAY,
            gamma_shape: alpha,
            gamma_rate: beta,
            delay: DelayMixture::single(delay),
            attribution_window,
            drift_per_day: 1.0,
            traffic_weight: 1.0,
            segment_weights: vec![1.0],
            context_weights: vec![1.0],
            retraction_prob: 0.0,
            retraction_delay_mean: 3.0 * DAY,
            value: ValueDistribution::Unit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("campaign {}: {m}", self.campaign_id)));
        if !(self.gamma_shape > 0.0 && self.gamma_rate > 0.0) {
            return fail(format!("gamma parameters must be positive ({}, {})", self.gamma_shape, self.gamma_rate));
        }
        let wsum: f64 = self.delay.components.iter().map(|(w, _)| w).sum();
        if self.delay.components.is_empty()
            || (wsum - 1.0).abs() > 1e-9
            || self.delay.components.iter().any(|(w, c)| !(*w >= 0.0) || !c.is_valid())
        {
            return fail(format!("invalid delay mixture {:?}", self.delay));
        }
        if !(self.attribution_window > 0.0) {
            return fail("attribution window must be positive".into());
        }
        if self.delay.cdf(self.attribution_window) < 0.05 {
            return fail("less than 5% of the delay mass falls inside the attribution window".into());
        }
        if !(0.0..=1.0).contains(&self.retraction_prob) {
            return fail(format!("retraction probability {} outside [0, 1]", self.retraction_prob));
        }
        if !(self.retraction_delay_mean > 0.0) {
            return fail("retraction delay mean must be positive".into());
        }
        if !(self.drift_per_day > 0.0 && self.traffic_weight > 0.0) {
            return fail("drift factor and traffic weight must be positive".into());
        }
        if self.segment_weights.is_empty()
            || self.context_weights.is_empty()
            || self.segment_weights.iter().chain(&self.context_weights).any(|w| !(*w >= 0.0))
        {
            return fail("segment and context weights must be non-negative".into());
        }
        if let ValueDistribution::LogNormal { mu, sigma } = self.value {
            if !(mu.is_finite() && sigma > 0.0) {
                return fail("invalid value distribution".into());
            }
        }
        Ok(())
    }

    /// Exact (untruncated) CDF of the campaign's delay mixture.
    pub fn true_delay_cdf(&self, t: f64) -> f64 {
        self.delay.cdf(t)
    }

    /// `P(delay < t)` for delays truncated to the attribution window.
    pub fn window_cdf(&self, t: f64) -> f64 {
        let m = self.attribution_window;
        (self.delay.cdf(t.min(m)) / self.delay.cdf(m)).min(1.0)
    }

    /// Median of the generated (window-truncated) delays.
    pub fn median_delay(&self) -> f64 {
        let (mut lo, mut hi) = (0.0, self.attribution_window);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.window_cdf(mid) < 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Whether the closed-form posterior applies to this campaign.
    pub fn oracle_valid(&self) -> bool {
        self.drift_per_day == 1.0 && self.retraction_prob == 0.0
    }

    fn sample_delay<R: Rng>(&self, rng: &mut R) -> f64 {
        loop {
            let d = self.delay.sample(rng);
            if d < self.attribution_window {
                return d;
            }
        }
    }
}

/// `(1 - p)(alpha + k) / (beta + p)`: posterior mean of the tail count given
/// `k` head events under Gamma(`alpha`, rate `beta`) mixing, when a fraction
/// `p` of the delay mass lies in the head.
pub fn gamma_poisson_tail_mean(alpha: f64, beta: f64, p: f64, k: f64) -> f64 {
    (1.0 - p) * (alpha + k) / (beta + p)
}

/// Campaigns plus the multipliers attached to segment and context tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub campaigns: Vec<CampaignProfile>,
    pub segment_multipliers: Vec<f64>,
    pub context_multipliers: Vec<f64>,
}

pub const HIGH_DELAY_QUANTILE: f64 = 0.9;

impl Population {
    pub fn validate(&self) -> Result<()> {
        if self.campaigns.is_empty() {
            return Err(Error::Config("population has no campaigns".into()));
        }
        for (i, c) in self.campaigns.iter().enumerate() {
            if c.campaign_id as usize != i {
                return Err(Error::Config(format!("campaign ids must be 0..n in order, found {} at {i}", c.campaign_id)));
            }
            c.validate()?;
            if c.segment_weights.len() != self.segment_multipliers.len()
                || c.context_weights.len() != self.context_multipliers.len()
            {
                return Err(Error::Config(format!(
                    "campaign {}: segment/context weights do not match the multiplier tables",
                    c.campaign_id
                )));
            }
        }
        if self.segment_multipliers.iter().chain(&self.context_multipliers).any(|m| !(*m > 0.0)) {
            return Err(Error::Config("rate multipliers must be positive".into()));
        }
        Ok(())
    }

    pub fn campaign(&self, id: u32) -> Result<&CampaignProfile> {
        self.campaigns
            .get(id as usize)
            .ok_or_else(|| contract(format!("unknown campaign {id}")))
    }

    /// Segment times context multiplier of an example, from its tokens.
    pub fn rate_scale(&self, example: &ClickExample) -> Result<f64> {
        let index = |field: &str, prefix: char, table: &[f64]| -> Result<f64> {
            let token = example
                .features
                .get(field)
                .ok_or_else(|| contract(format!("example {} lacks `{field}`", example.example_id)))?;
            token
                .strip_prefix(prefix)
                .and_then(|s| s.parse::<usize>().ok())
                .and_then(|i| table.get(i).copied())
                .ok_or_else(|| contract(format!("unrecognised {field} token `{token}`")))
        };
        Ok(index("segment", 's', &self.segment_multipliers)? * index("context", 'x', &self.context_multipliers)?)
    }

    /// Posterior mean of the label mass in `[horizon, M)` given the events
    /// observed before `horizon`. Valid for stationary campaigns without
    /// retractions.
    pub fn posterior_expected_tail(&self, example: &ClickExample, horizon: f64) -> Result<f64> {
        let c = self.campaign(example.campaign_id)?;
        if !c.oracle_valid() {
            return Err(contract(format!(
                "campaign {} drifts or retracts; the closed-form posterior does not apply",
                c.campaign_id
            )));
        }
        if !(0.0..c.attribution_window).contains(&horizon) {
            return Err(contract(format!("horizon {horizon} outside [0, {})", c.attribution_window)));
        }
        let k = example.observed_prefix(horizon)?;
        let p = c.window_cdf(horizon);
        let beta = c.gamma_rate / self.rate_scale(example)?;
        Ok(gamma_poisson_tail_mean(c.gamma_shape, beta, p, k))
    }

    /// Campaigns whose median delay is at or above the population's
    /// `quantile` of medians.
    pub fn high_delay_campaigns(&self, quantile: f64) -> Vec<bool> {
        let medians: Vec<f64> = self.campaigns.iter().map(CampaignProfile::median_delay).collect();
        let mut sorted = medians.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let k = (((1.0 - quantile) * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
        let threshold = sorted[k.min(sorted.len()) - 1];
        medians.iter().map(|&m| m >= threshold).collect()
    }

    /// Ratio of the largest to the smallest campaign median delay.
    pub fn median_delay_span(&self) -> f64 {
        let medians = self.campaigns.iter().map(CampaignProfile::median_delay);
        let (lo, hi) = medians.fold((f64::INFINITY, 0.0f64), |(lo, hi), m| (lo.min(m), hi.max(m)));
        hi / lo
    }
}

/// `f_m` replaced by the analytic posterior.
pub struct PosteriorOracle<'a> {
    pub population: &'a Population,
    pub bucketing: &'a DelayBucketing,
}

impl TailPredictor for PosteriorOracle<'_> {
    fn predict_tail(&self, example: &ClickExample, m: usize) -> Result<f64> {
        self.population.posterior_expected_tail(example, self.bucketing.start(m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub total_clicks: usize,
    pub campaign_count: usize,
    /// Share of campaigns created part-way through the stream.
    pub cold_start_fraction: f64,
    /// Creation times of those campaigns, as fractions of the duration.
    pub cold_start_window: (f64, f64),
    #[serde(with = "crate::duration")]
    pub duration: f64,
    pub rng_seed: u64,
    #[serde(with = "crate::duration")]
    pub attribution_window: f64,
    /// Per-campaign multiplicative rate trend.
    pub drift: bool,
    /// Largest absolute daily log-drift when `drift` is on.
    pub max_log_drift_per_day: f64,
    pub retractions: bool,
    pub retraction_prob: f64,
    /// Log-normal conversion values instead of unit counts.
    pub value_labels: bool,
    pub segment_count: usize,
    pub context_count: usize,
    /// Range of campaign mean conversions per click.
    pub mean_rate_range: (f64, f64),
    /// Range of the Gamma shape; smaller means more overdispersion.
    pub gamma_shape_range: (f64, f64),
    /// Campaign delay scales are spread log-uniformly over this range.
    pub median_delay_range: (f64, f64),
    /// Horizons at which the sidecar records each click's tail probability.
    #[serde(with = "crate::duration::list")]
    pub sidecar_horizons: Vec<f64>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            total_clicks: 200_000,
            campaign_count: 50,
            cold_start_fraction: 0.5,
            cold_start_window: (0.1, 0.65),
            duration: 120.0 * DAY,
            rng_seed: 1,
            attribution_window: 30.0 * DAY,
            drift: true,
            max_log_drift_per_day: 0.006,
            retractions: false,
            retraction_prob: 0.15,
            value_labels: false,
            segment_count: 6,
            context_count: 3,
            mean_rate_range: (0.05, 5.0),
            gamma_shape_range: (0.6, 2.5),
            median_delay_range: (1.0 * HOUR, 10.0 * DAY),
            sidecar_horizons: vec![6.0 * HOUR, DAY, 3.0 * DAY, 7.0 * DAY, 15.0 * DAY],
        }
    }
}

impl StreamConfig {
    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_value(self).expect("config serializes").to_string();
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("stream: {m}")));
        if self.total_clicks < 1 {
            return fail("total_clicks must be at least 1");
        }
        if self.campaign_count < 1 {
            return fail("campaign_count must be at least 1");
        }
        if !(0.0..1.0).contains(&self.cold_start_fraction) {
            return fail("cold_start_fraction must be in [0, 1)");
        }
        let (clo, chi) = self.cold_start_window;
        if !(0.0 < clo && clo <= chi && chi < 1.0) {
            return fail("cold_start_window must satisfy 0 < lo <= hi < 1");
        }
        if !(self.duration > 0.0 && self.attribution_window > 0.0) {
            return fail("duration and attribution window must be positive");
        }
        if !(0.0..=1.0).contains(&self.retraction_prob) {
            return fail("retraction_prob must be in [0, 1]");
        }
        if self.segment_count < 1 || self.context_count < 1 {
            return fail("need at least one segment and one context");
        }
        let (lo, hi) = self.mean_rate_range;
        let (alo, ahi) = self.gamma_shape_range;
        let (dlo, dhi) = self.median_delay_range;
        if !(lo > 0.0 && hi >= lo && alo > 0.0 && ahi >= alo && dlo > 0.0 && dhi >= dlo) {
            return fail("parameter ranges must be positive and ordered");
        }
        if self.duration <= self.attribution_window {
            log::warn!(
                "stream duration {}s does not exceed the attribution window {}s; no label will mature",
                self.duration,
                self.attribution_window
            );
        }
        Ok(())
    }

    /// Draws a campaign population from this configuration.
    pub fn population(&self) -> Result<Population> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed ^ 0x5eed_ca4a_1a11_0000);
        let segment_multipliers = lognormal_multipliers(&mut rng, self.segment_count, 0.45);
        let context_multipliers = lognormal_multipliers(&mut rng, self.context_count, 0.25);

        let n = self.campaign_count;
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        let cold = ((self.cold_start_fraction * n as f64).floor() as usize).min(n - 1);
        let mut cold_flags = vec![false; n];
        for flag in cold_flags.iter_mut().take(cold) {
            *flag = true;
        }
        cold_flags.shuffle(&mut rng);

        let (dlo, dhi) = self.median_delay_range;
        let (rlo, rhi) = self.mean_rate_range;
        let log_uniform = |u: f64, lo: f64, hi: f64| (lo.ln() + u * (hi / lo).ln()).exp();
        let mut campaigns = Vec::with_capacity(n);
        for id in 0..n {
            let u = (strata[id] as f64 + rng.random::<f64>()) / n as f64;
            let median = log_uniform(u, dlo, dhi);
            let main = match rng.random_range(0..3) {
                0 => DelayComponent::Exponential { mean: median / std::f64::consts::LN_2 },
                1 => {
                    let shape = rng.random_range(0.5..1.5);
                    DelayComponent::Weibull { shape, scale: median / std::f64::consts::LN_2.powf(1.0 / shape) }
                }
                _ => DelayComponent::LogNormal { mu: median.ln(), sigma: rng.random_range(0.7..1.6) },
            };
            let delay = if rng.random::<f64>() < 0.4 {
                let w = rng.random_range(0.15..0.35);
                let tail_mean = median * rng.random_range(4.0..10.0);
                DelayMixture {
                    components: vec![(1.0 - w, main), (w, DelayComponent::Exponential { mean: tail_mean })],
                }
            } else {
                DelayMixture::single(main)
            };
            let mean_rate = log_uniform(rng.random(), rlo, rhi);
            let alpha = rng.random_range(self.gamma_shape_range.0..=self.gamma_shape_range.1);
            let start_time = if cold_flags[id] {
                rng.random_range(self.cold_start_window.0..=self.cold_start_window.1) * self.duration
            } else {
                -rng.random_range(30.0..365.0) * DAY
            };
            let drift_per_day = if self.drift {
                (rng.random_range(-1.0..=1.0) * self.max_log_drift_per_day).exp()
            } else {
                1.0
            };
            let value = if self.value_labels {
                ValueDistribution::LogNormal { mu: rng.random_range(-0.5..0.5), sigma: 0.6 }
            } else {
                ValueDistribution::Unit
            };
            campaigns.push(CampaignProfile {
                campaign_id: id as u32,
                start_time,
                gamma_shape: alpha,
                gamma_rate: alpha / mean_rate,
                delay,
                attribution_window: self.attribution_window,
                drift_per_day,
                traffic_weight: LogNormal::new(0.0, 0.5).expect("valid").sample(&mut rng),
                segment_weights: (0..self.segment_count).map(|_| rng.random_range(0.2..1.0)).collect(),
                context_weights: (0..self.context_count).map(|_| rng.random_range(0.2..1.0)).collect(),
                retraction_prob: if self.retractions { self.retraction_prob } else { 0.0 },
                retraction_delay_mean: rng.random_range(1.0..5.0) * DAY,
                value,
            });
        }
        let population = Population {
            campaigns,
            segment_multipliers,
            context_multipliers,
        };
        population.validate()?;
        Ok(population)
    }
}

fn lognormal_multipliers<R: Rng>(rng: &mut R, n: usize, sigma: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).expect("valid");
    let raw: Vec<f64> = (0..n).map(|_| normal.sample(rng).exp()).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    raw.into_iter().map(|m| m / mean).collect()
}

/// Per-click generator ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub example_id: u64,
    /// Latent intensity, including segment, context and drift multipliers.
    pub theta: f64,
    pub rate_scale: f64,
    pub high_delay: bool,
    pub campaign_median_delay: f64,
    /// `(horizon, P(delay >= horizon))` under the campaign's truncated delay
    /// distribution.
    pub tail_probabilities: Vec<(f64, f64)>,
}

/// A generated stream with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedStream {
    pub config: StreamConfig,
    pub population: Population,
    pub examples: Vec<ClickExample>,
    pub truth: Vec<GroundTruth>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: String,
    artifact_version: String,
    config_digest: String,
    clicks: usize,
    config: StreamConfig,
    population: Population,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STREAM_FILE: &str = "stream.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";

/// Generates a stream from `config`, drawing its population first.
pub fn generate(config: &StreamConfig) -> Result<GeneratedStream> {
    let population = config.population()?;
    generate_with_population(config, population)
}

/// Generates clicks for an explicit population.
pub fn generate_with_population(config: &StreamConfig, population: Population) -> Result<GeneratedStream> {
    config.validate()?;
    population.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0xc11c_5000_0000_0001);

    // Conditioned on the count, Poisson arrivals are uniform order statistics.
    let mut times: Vec<f64> = (0..config.total_clicks)
        .map(|_| rng.random::<f64>() * config.duration)
        .collect();
    times.sort_by(f64::total_cmp);

    let high_delay = population.high_delay_campaigns(HIGH_DELAY_QUANTILE);
    let medians: Vec<f64> = population.campaigns.iter().map(CampaignProfile::median_delay).collect();
    let mut examples = Vec::with_capacity(times.len());
    let mut truth = Vec::with_capacity(times.len());
    for (idx, &t) in times.iter().enumerate() {
        let Some(c) = pick_campaign(&population.campaigns, t, &mut rng) else {
            return Err(Error::Config(format!("no campaign is active at time {t}")));
        };
        let segment = pick_weighted(&c.segment_weights, &mut rng);
        let context = pick_weighted(&c.context_weights, &mut rng);
        let drift = c.drift_per_day.powf(t / DAY);
        let scale = population.segment_multipliers[segment] * population.context_multipliers[context];
        let base: f64 = Gamma::new(c.gamma_shape, 1.0 / c.gamma_rate).expect("validated").sample(&mut rng);
        let theta = base * scale * drift;
        let count = if theta > 0.0 {
            Poisson::new(theta).expect("positive").sample(&mut rng) as usize
        } else {
            0
        };
        let mut events = Vec::with_capacity(count);
        for _ in 0..count {
            let delay = c.sample_delay(&mut rng);
            let value = match c.value {
                ValueDistribution::Unit => 1.0,
                ValueDistribution::LogNormal { mu, sigma } => {
                    LogNormal::new(mu, sigma).expect("validated").sample(&mut rng)
                }
            };
            events.push(ConversionEvent { value, ..ConversionEvent::count(delay) });
            if c.retraction_prob > 0.0 && rng.random::<f64>() < c.retraction_prob {
                let later = delay + Exp::new(1.0 / c.retraction_delay_mean).expect("validated").sample(&mut rng);
                if later > delay && later < c.attribution_window {
                    events.push(ConversionEvent::retraction(later, value));
                }
            }
        }
        events.sort_by(|a, b| a.delay.total_cmp(&b.delay));

        let mut features = BTreeMap::new();
        features.insert("campaign".to_string(), format!("c{}", c.campaign_id));
        features.insert("segment".to_string(), format!("s{segment}"));
        features.insert("context".to_string(), format!("x{context}"));
        let example_id = idx as u64;
        examples.push(ClickExample {
            example_id,
            click_time: t,
            campaign_id: c.campaign_id,
            campaign_start_time: c.start_time,
            features,
            attribution_window: c.attribution_window,
            events,
        });
        truth.push(GroundTruth {
            example_id,
            theta,
            rate_scale: scale * drift,
            high_delay: high_delay[c.campaign_id as usize],
            campaign_median_delay: medians[c.campaign_id as usize],
            tail_probabilities: config
                .sidecar_horizons
                .iter()
                .map(|&h| (h, 1.0 - c.window_cdf(h)))
                .collect(),
        });
    }
    Ok(GeneratedStream {
        config: config.clone(),
        population,
        examples,
        truth,
    })
}

fn pick_campaign<'a, R: Rng>(campaigns: &'a [CampaignProfile], t: f64, rng: &mut R) -> Option<&'a CampaignProfile> {
    let total: f64 = campaigns.iter().filter(|c| c.start_time <= t).map(|c| c.traffic_weight).sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for c in campaigns.iter().filter(|c| c.start_time <= t) {
        if u < c.traffic_weight {
            return Some(c);
        }
        u -= c.traffic_weight;
        last = Some(c);
    }
    last
}

fn pick_weighted<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

impl GeneratedStream {
    /// End of the simulated period.
    pub fn duration(&self) -> f64 {
        self.config.duration
    }

    /// Writes `manifest.json`, `stream.jsonl` and `truth.jsonl` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            schema_version: STREAM_SCHEMA_VERSION.into(),
            artifact_version: crate::harness::ARTIFACT_VERSION.into(),
            config_digest: self.config.digest(),
            clicks: self.examples.len(),
            config: self.config.clone(),
            population: self.population.clone(),
        };
        let mut f = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n")?;
        f.flush()?;
        write_lines(&dir.join(STREAM_FILE), &self.examples)?;
        write_lines(&dir.join(TRUTH_FILE), &self.truth)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
        if manifest.schema_version != STREAM_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported stream schema {}, expected {STREAM_SCHEMA_VERSION}",
                manifest.schema_version
            )));
        }
        let examples: Vec<ClickExample> = read_lines(&dir.join(STREAM_FILE))?;
        let truth: Vec<GroundTruth> = read_lines(&dir.join(TRUTH_FILE))?;
        if examples.len() != manifest.clicks || truth.len() != examples.len() {
            return Err(Error::Config(format!(
                "stream in {} is incomplete: manifest lists {} clicks, found {} examples and {} truth rows",
                dir.display(),
                manifest.clicks,
                examples.len(),
                truth.len()
            )));
        }
        if truth.iter().zip(&examples).any(|(t, e)| t.example_id != e.example_id) {
            return Err(Error::Config("truth rows are not aligned with the stream".into()));
        }
        Ok(Self {
            config: manifest.config,
            population: manifest.population,
            examples,
            truth,
        })
    }
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut f, row)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
