//! Click examples, conversion events, delay buckets and the label views
//! derived from them.
//!
//! All time intervals are left-closed and right-open: an event whose delay
//! equals a bucket boundary belongs to the later bucket.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{contract, Error, Result};

/// Seconds in a simulated day.
pub const DAY: f64 = 86_400.0;
/// Seconds in an hour.
pub const HOUR: f64 = 3_600.0;

/// Whether an event adds to or retracts from the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

impl Serialize for Sign {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(match self {
            Sign::Plus => 1,
            Sign::Minus => -1,
        })
    }
}

impl<'de> Deserialize<'de> for Sign {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match i8::deserialize(d)? {
            1 => Ok(Sign::Plus),
            -1 => Ok(Sign::Minus),
            other => Err(serde::de::Error::custom(format!(
                "event sign must be 1 or -1, got {other}"
            ))),
        }
    }
}

/// One post-click event, positioned by its delay after the click.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConversionEvent {
    pub delay: f64,
    pub value: f64,
    pub sign: Sign,
}

impl ConversionEvent {
    pub fn count(delay: f64) -> Self {
        Self {
            delay,
            value: 1.0,
            sign: Sign::Plus,
        }
    }

    pub fn retraction(delay: f64, value: f64) -> Self {
        Self {
            delay,
            value,
            sign: Sign::Minus,
        }
    }

    pub fn signed_value(&self) -> f64 {
        self.sign.factor() * self.value
    }
}

/// Positive and negative mass of a label window, kept apart so that
/// two-headed regressors can train on each side.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LabelParts {
    pub positive: f64,
    pub negative: f64,
}

impl LabelParts {
    pub fn signed(&self) -> f64 {
        self.positive - self.negative
    }
}

impl std::ops::Add for LabelParts {
    type Output = LabelParts;
    fn add(self, rhs: LabelParts) -> LabelParts {
        LabelParts {
            positive: self.positive + rhs.positive,
            negative: self.negative + rhs.negative,
        }
    }
}

/// A single ad click together with every conversion attributed to it.
///
/// In a live system `events` would only be partially visible; the simulator
/// carries the full list and every consumer restricts itself to the prefix
/// it is allowed to see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickExample {
    pub example_id: u64,
    pub click_time: f64,
    pub campaign_id: u32,
    pub campaign_start_time: f64,
    /// Serving-time categorical features, field name to token.
    pub features: BTreeMap<String, String>,
    pub attribution_window: f64,
    /// Sorted by delay ascending; every delay is below `attribution_window`.
    pub events: Vec<ConversionEvent>,
}

impl ClickExample {
    /// Checks the per-example invariants.
    pub fn validate(&self) -> Result<()> {
        if !(self.campaign_start_time <= self.click_time) {
            return Err(contract(format!(
                "example {}: campaign starts after the click",
                self.example_id
            )));
        }
        let mut last = 0.0;
        for ev in &self.events {
            if !(ev.delay >= 0.0 && ev.value >= 0.0) {
                return Err(contract(format!(
                    "example {}: event with negative delay or value",
                    self.example_id
                )));
            }
            if ev.delay >= self.attribution_window {
                return Err(contract(format!(
                    "example {}: event delay {} outside the attribution window",
                    self.example_id, ev.delay
                )));
            }
            if ev.delay < last {
                return Err(contract(format!(
                    "example {}: events not sorted by delay",
                    self.example_id
                )));
            }
            last = ev.delay;
        }
        Ok(())
    }

    /// Signed mass of events with delay in `[lo, hi)`.
    pub fn window_sum(&self, lo: f64, hi: f64) -> f64 {
        self.events
            .iter()
            .filter(|e| e.delay >= lo && e.delay < hi)
            .map(ConversionEvent::signed_value)
            .sum()
    }

    /// Positive and negative mass of events with delay in `[lo, hi)`.
    pub fn window_parts(&self, lo: f64, hi: f64) -> LabelParts {
        let mut parts = LabelParts::default();
        for e in self.events.iter().filter(|e| e.delay >= lo && e.delay < hi) {
            match e.sign {
                Sign::Plus => parts.positive += e.value,
                Sign::Minus => parts.negative += e.value,
            }
        }
        parts
    }

    /// The label once the attribution window has fully elapsed.
    pub fn mature_label(&self) -> f64 {
        self.window_sum(0.0, self.attribution_window)
    }

    /// Signed label mass visible strictly before `horizon`.
    pub fn observed_prefix(&self, horizon: f64) -> Result<f64> {
        if !(0.0..=self.attribution_window).contains(&horizon) {
            return Err(contract(format!(
                "horizon {horizon} outside [0, {}]",
                self.attribution_window
            )));
        }
        Ok(self.window_sum(0.0, horizon))
    }

    /// Age of the click at simulated time `now`.
    pub fn age_at(&self, now: f64) -> f64 {
        now - self.click_time
    }
}

/// Delay boundaries `d_1 < … < d_n` inside the attribution window `M`.
///
/// Sub-model `i` is responsible for delays starting at `d_i` (with `d_0 = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBucketing", into = "RawBucketing")]
pub struct DelayBucketing {
    boundaries: Vec<f64>,
    attribution_window: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBucketing {
    #[serde(with = "crate::duration::list")]
    boundaries: Vec<f64>,
    #[serde(with = "crate::duration")]
    attribution_window: f64,
}

impl TryFrom<RawBucketing> for DelayBucketing {
    type Error = Error;
    fn try_from(raw: RawBucketing) -> Result<Self> {
        DelayBucketing::new(raw.boundaries, raw.attribution_window)
    }
}

impl From<DelayBucketing> for RawBucketing {
    fn from(b: DelayBucketing) -> Self {
        RawBucketing {
            boundaries: b.boundaries,
            attribution_window: b.attribution_window,
        }
    }
}

pub const MIN_SUB_MODELS: usize = 3;
pub const MAX_SUB_MODELS: usize = 10;

impl DelayBucketing {
    pub fn new(boundaries: Vec<f64>, attribution_window: f64) -> Result<Self> {
        let count = boundaries.len() + 1;
        if !(MIN_SUB_MODELS..=MAX_SUB_MODELS).contains(&count) {
            return Err(Error::Config(format!(
                "bucketing yields {count} sub-models, expected {MIN_SUB_MODELS}..={MAX_SUB_MODELS}"
            )));
        }
        let mut prev = 0.0;
        for &d in &boundaries {
            if !(d > prev) {
                return Err(Error::Config(format!(
                    "bucket boundaries must be strictly increasing and positive, got {boundaries:?}"
                )));
            }
            prev = d;
        }
        if !(prev < attribution_window) {
            return Err(Error::Config(format!(
                "last bucket boundary {prev} must be below the attribution window {attribution_window}"
            )));
        }
        Ok(Self {
            boundaries,
            attribution_window,
        })
    }

    /// Boundaries of one, three, seven and fifteen days inside a thirty day
    /// window.
    pub fn default_days() -> Self {
        Self::new(vec![DAY, 3.0 * DAY, 7.0 * DAY, 15.0 * DAY], 30.0 * DAY)
            .expect("default bucketing is valid")
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn attribution_window(&self) -> f64 {
        self.attribution_window
    }

    /// Number of boundaries, `n`.
    pub fn n(&self) -> usize {
        self.boundaries.len()
    }

    /// Number of sub-models, `n + 1`.
    pub fn sub_model_count(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// `d_i`, with `d_0 = 0`.
    pub fn start(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.boundaries[i - 1]
        }
    }

    /// `d_{i+1}`, or `M` for the last bucket.
    pub fn end(&self, i: usize) -> f64 {
        self.boundaries
            .get(i)
            .copied()
            .unwrap_or(self.attribution_window)
    }

    /// Largest `m` with `d_m <= age` (0 when `age < d_1`).
    pub fn index_for_age(&self, age: f64) -> usize {
        self.boundaries.iter().take_while(|&&d| d <= age).count()
    }

    /// `[d_i, M)` masses for `i = 0..=n`; element 0 is the mature label.
    pub fn thermometer_labels(&self, example: &ClickExample) -> Vec<f64> {
        (0..self.sub_model_count())
            .map(|i| example.window_sum(self.start(i), self.attribution_window))
            .collect()
    }

    /// `[d_i, d_{i+1})` masses for `i = 0..=n`; they sum to the mature label.
    pub fn bucket_labels(&self, example: &ClickExample) -> Vec<f64> {
        (0..self.sub_model_count())
            .map(|i| example.window_sum(self.start(i), self.end(i)))
            .collect()
    }
}
