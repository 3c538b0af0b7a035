//! Evaluate-then-train simulation over a merged event timeline.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::datagen::{GeneratedStream, Population, HIGH_DELAY_QUANTILE};
use crate::error::{Error, Result};
use crate::loss::poisson_nll;
use crate::metrics::{MetricsAccumulator, Summary, WindowPoint};
use crate::types::{ClickExample, DAY};
use crate::variants::{VariantModel, VariantSpec};

/// Tolerance on the maturity check, for `click_time + d` round-off.
const AGE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SliceKind {
    All,
    NewCampaign,
    HighDelay,
}

impl SliceKind {
    pub fn name(self) -> &'static str {
        match self {
            SliceKind::All => "ALL",
            SliceKind::NewCampaign => "NEW_CAMPAIGN",
            SliceKind::HighDelay => "HIGH_DELAY",
        }
    }
}

/// Slice predicates over examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSet {
    /// Campaign age at click below which an example is NEW_CAMPAIGN.
    pub new_campaign_max_age: f64,
    /// Campaigns tagged HIGH_DELAY.
    pub high_delay_campaigns: BTreeSet<u32>,
}

impl SliceSet {
    pub fn new(high_delay_campaigns: BTreeSet<u32>) -> Self {
        Self {
            new_campaign_max_age: 10.0 * DAY,
            high_delay_campaigns,
        }
    }

    /// Tags campaigns at or above the population's 90th percentile of
    /// median delay.
    pub fn for_population(population: &Population) -> Self {
        let tags = population.high_delay_campaigns(HIGH_DELAY_QUANTILE);
        Self::new(
            tags.iter()
                .enumerate()
                .filter(|(_, &t)| t)
                .map(|(i, _)| i as u32)
                .collect(),
        )
    }

    pub fn kinds(&self) -> [SliceKind; 3] {
        [SliceKind::All, SliceKind::NewCampaign, SliceKind::HighDelay]
    }

    pub fn contains(&self, kind: SliceKind, example: &ClickExample) -> bool {
        match kind {
            SliceKind::All => true,
            SliceKind::NewCampaign => example.click_time - example.campaign_start_time < self.new_campaign_max_age,
            SliceKind::HighDelay => self.high_delay_campaigns.contains(&example.campaign_id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Eval,
    Train { sub_model: usize },
}

/// One entry of the simulation timeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    /// Index of the example in the stream.
    pub sequence: usize,
    pub kind: EventKind,
}

impl SimEvent {
    fn key(&self) -> (u8, usize) {
        match self.kind {
            EventKind::Eval => (0, 0),
            EventKind::Train { sub_model } => (1, sub_model),
        }
    }
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then_with(|| self.key().cmp(&other.key()))
            .then_with(|| self.sequence.cmp(&other.sequence))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// TRAIN events after this time are dropped. Defaults to the last click.
    pub stream_end: Option<f64>,
    /// Examples whose TRAIN events are withheld.
    pub skip_training: BTreeSet<u64>,
    /// Keep one [`PredictionRecord`] per evaluated example.
    pub record_predictions: bool,
    /// Keep the processed timeline.
    pub record_events: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: u64,
    pub click_time: f64,
    pub prediction: f64,
    pub label: f64,
    pub nll: f64,
}

/// Outcome of one variant over one stream.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub variant: String,
    pub note: Option<&'static str>,
    pub slices: BTreeMap<SliceKind, MetricsAccumulator>,
    pub dropped_train_events: u64,
    pub train_events: u64,
    pub predictions: Vec<PredictionRecord>,
    pub events: Vec<SimEvent>,
    pub model: VariantModel,
}

/// Builds the full timeline of a stream under `model`'s schedule.
pub fn timeline(model: &VariantModel, stream: &[ClickExample]) -> Vec<SimEvent> {
    let mut heap = queue(model, stream);
    let mut out = Vec::with_capacity(heap.len());
    while let Some(std::cmp::Reverse(e)) = heap.pop() {
        out.push(e);
    }
    out
}

fn queue(model: &VariantModel, stream: &[ClickExample]) -> BinaryHeap<std::cmp::Reverse<SimEvent>> {
    let mut heap = BinaryHeap::with_capacity(stream.len() * 6);
    for (sequence, e) in stream.iter().enumerate() {
        heap.push(std::cmp::Reverse(SimEvent {
            time: e.click_time,
            sequence,
            kind: EventKind::Eval,
        }));
        for (time, sub_model) in model.training_schedule(e) {
            heap.push(std::cmp::Reverse(SimEvent {
                time,
                sequence,
                kind: EventKind::Train { sub_model },
            }));
        }
    }
    heap
}

/// Runs `variant` over `stream`, evaluating each example at its click time
/// before any of its training events.
pub fn run(variant: &VariantSpec, stream: &[ClickExample], slices: &SliceSet, options: &RunOptions) -> Result<RunResult> {
    if let Some(w) = stream.windows(2).find(|w| w[1].click_time < w[0].click_time) {
        return Err(Error::OutOfOrder {
            example_id: w[1].example_id,
        });
    }
    for e in stream {
        e.validate()?;
    }
    let mut model = variant.build()?;
    let stream_end = options
        .stream_end
        .unwrap_or_else(|| stream.last().map_or(0.0, |e| e.click_time));
    let two_output = model.two_output();
    let kinds = slices.kinds();
    let mut accs: BTreeMap<SliceKind, MetricsAccumulator> = kinds.iter().map(|&k| (k, MetricsAccumulator::new())).collect();
    let mut result_predictions = Vec::new();
    let mut events = Vec::new();
    let (mut dropped, mut trained) = (0u64, 0u64);

    let mut heap = queue(&model, stream);
    while let Some(std::cmp::Reverse(ev)) = heap.pop() {
        let example = &stream[ev.sequence];
        match ev.kind {
            EventKind::Eval => {
                let out = model.serve(example)?;
                let (nll, pred, label) = if two_output {
                    let parts = example.window_parts(0.0, example.attribution_window);
                    let minus = out.negative_rate.unwrap_or(0.0);
                    let nll = poisson_nll(out.rate, parts.positive)? + poisson_nll(minus, parts.negative)?;
                    (nll, out.signed(), parts.signed())
                } else {
                    let label = example.mature_label();
                    (poisson_nll(out.rate, label)?, out.rate, label)
                };
                let window = (example.click_time / DAY).floor() as i64;
                for &k in &kinds {
                    if slices.contains(k, example) {
                        accs.get_mut(&k).expect("slice").record_loss(nll, pred, label, window)?;
                    }
                }
                if options.record_predictions {
                    result_predictions.push(PredictionRecord {
                        example_id: example.example_id,
                        click_time: example.click_time,
                        prediction: pred,
                        label,
                        nll,
                    });
                }
            }
            EventKind::Train { sub_model } => {
                if ev.time > stream_end {
                    dropped += 1;
                    continue;
                }
                if options.skip_training.contains(&example.example_id) {
                    continue;
                }
                let age = ev.time - example.click_time;
                let required = model.required_age(sub_model);
                if age + AGE_SLACK < required {
                    return Err(Error::Contract(format!(
                        "example {} reached sub-model {sub_model} at age {age}s, before its required age {required}s",
                        example.example_id
                    )));
                }
                model.train_on(example, sub_model)?;
                trained += 1;
            }
        }
        if options.record_events {
            events.push(ev);
        }
    }
    log::debug!(
        "{}: {} examples, {trained} training steps, {dropped} immature steps dropped",
        variant.name,
        stream.len()
    );
    Ok(RunResult {
        variant: variant.name.clone(),
        note: variant.note(),
        slices: accs,
        dropped_train_events: dropped,
        train_events: trained,
        predictions: result_predictions,
        events,
        model,
    })
}

/// Runs over a generated stream with its own slices, training until the
/// end of the simulated period.
pub fn run_generated(variant: &VariantSpec, stream: &GeneratedStream, options: &RunOptions) -> Result<RunResult> {
    let slices = SliceSet::for_population(&stream.population);
    let mut options = options.clone();
    options.stream_end.get_or_insert(stream.duration());
    run(variant, &stream.examples, &slices, &options)
}

/// Paper reference figures for the all-data slice, percent change of PLL
/// relative to M3 with negative meaning better, in best-first order.
pub const REFERENCE_RANKING: [(&str, f64); 8] = [
    ("Oracle", -9.1),
    ("Proposed", -8.6),
    ("M5", -7.92),
    ("M4", -7.7),
    ("M2_7d", -6.8),
    ("M1", -6.6),
    ("M2_15d", -5.9),
    ("M3", 0.0),
];

pub const ARTIFACT_VERSION: &str = concat!("delayfeed ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub pll: Option<f64>,
    pub bias: Option<f64>,
    pub n: u64,
    /// `(PLL_M3 - PLL) / |PLL_M3| * 100`; positive means lower loss than M3.
    pub pll_vs_m3_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub slices: BTreeMap<String, SliceReport>,
    /// ALL slice, per simulated day.
    pub timeseries: Vec<WindowPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_digest: String,
    pub artifact_version: String,
    pub pll_convention: String,
    pub variants: BTreeMap<String, VariantReport>,
    pub dropped_train_events: BTreeMap<String, u64>,
}

pub const PLL_CONVENTION: &str =
    "pll_vs_M3_pct = (PLL_M3 - PLL_variant) / |PLL_M3| * 100; positive is better than M3 (the opposite sign of the reference table)";

/// Relative improvement over a reference loss in percent.
pub fn pll_improvement_pct(reference: f64, pll: f64) -> Option<f64> {
    (reference != 0.0).then(|| (reference - pll) / reference.abs() * 100.0)
}

/// Assembles a report from runs over the same stream and slices.
pub fn compare(config_digest: &str, runs: &[RunResult]) -> Result<ExperimentReport> {
    let finals: BTreeMap<&str, BTreeMap<SliceKind, Summary>> = runs
        .iter()
        .map(|r| (r.variant.as_str(), r.slices.iter().map(|(k, a)| (*k, a.finalize())).collect()))
        .collect();
    if finals.len() != runs.len() {
        return Err(Error::Config("duplicate variant names in comparison".into()));
    }
    let m3 = finals.get("M3");
    let mut variants = BTreeMap::new();
    for r in runs {
        let mut slices = BTreeMap::new();
        for (kind, s) in &finals[r.variant.as_str()] {
            let reference = m3.and_then(|m| m.get(kind)).and_then(|s| s.pll);
            slices.insert(
                kind.name().to_string(),
                SliceReport {
                    pll: s.pll,
                    bias: s.bias,
                    n: s.n,
                    pll_vs_m3_pct: reference.zip(s.pll).and_then(|(m, p)| pll_improvement_pct(m, p)),
                },
            );
        }
        variants.insert(
            r.variant.clone(),
            VariantReport {
                note: r.note.map(str::to_string),
                slices,
                timeseries: r.slices.get(&SliceKind::All).map(MetricsAccumulator::timeseries).unwrap_or_default(),
            },
        );
    }
    Ok(ExperimentReport {
        config_digest: config_digest.to_string(),
        artifact_version: ARTIFACT_VERSION.to_string(),
        pll_convention: PLL_CONVENTION.to_string(),
        variants,
        dropped_train_events: runs.iter().map(|r| (r.variant.clone(), r.dropped_train_events)).collect(),
    })
}

impl ExperimentReport {
    /// Merges reports produced under the same configuration.
    pub fn merge(reports: Vec<ExperimentReport>) -> Result<ExperimentReport> {
        let mut iter = reports.into_iter();
        let mut out = iter.next().ok_or_else(|| Error::Config("nothing to merge".into()))?;
        for r in iter {
            if r.config_digest != out.config_digest {
                return Err(Error::DigestMismatch(out.config_digest, r.config_digest));
            }
            out.variants.extend(r.variants);
            out.dropped_train_events.extend(r.dropped_train_events);
        }
        // Relative columns depend on M3, which may have arrived last.
        let m3: Option<BTreeMap<String, Option<f64>>> = out
            .variants
            .get("M3")
            .map(|v| v.slices.iter().map(|(k, s)| (k.clone(), s.pll)).collect());
        for v in out.variants.values_mut() {
            for (k, s) in v.slices.iter_mut() {
                let reference = m3.as_ref().and_then(|m| m.get(k).copied().flatten());
                s.pll_vs_m3_pct = reference.zip(s.pll).and_then(|(m, p)| pll_improvement_pct(m, p));
            }
        }
        Ok(out)
    }

    /// `variant,slice,metric,value` rows after a `#` provenance line;
    /// absent values are empty.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# config_digest={} artifact_version={}\nvariant,slice,metric,value\n",
            self.config_digest, self.artifact_version
        );
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (name, v) in &self.variants {
            for (slice, s) in &v.slices {
                for (metric, value) in [
                    ("pll", fmt(s.pll)),
                    ("bias", fmt(s.bias)),
                    ("n", s.n.to_string()),
                    ("pll_vs_M3_pct", fmt(s.pll_vs_m3_pct)),
                ] {
                    out.push_str(&format!("{name},{slice},{metric},{value}\n"));
                }
            }
        }
        out
    }

    /// Per-day series, one `bias` and one `pll` column per variant after
    /// the `day` column. Missing points are empty cells.
    pub fn timeseries_csv(&self) -> String {
        let mut header = vec!["day".to_string()];
        let mut days: BTreeMap<i64, Vec<String>> = BTreeMap::new();
        let width = 2 * self.variants.len();
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (col, (name, v)) in self.variants.iter().enumerate() {
            header.push(format!("{name}_bias"));
            header.push(format!("{name}_pll"));
            for p in &v.timeseries {
                let row = days.entry(p.day).or_insert_with(|| vec![String::new(); width]);
                row[2 * col] = cell(p.bias);
                row[2 * col + 1] = cell(p.pll);
            }
        }
        let mut out = header.join(",");
        out.push('\n');
        for (day, row) in days {
            out.push_str(&format!("{day},{}\n", row.join(",")));
        }
        out
    }

    /// `variant,slice,pll_vs_M3_pct` rows for bar charts.
    pub fn improvements_csv(&self) -> String {
        let mut out = String::from("variant,slice,pll_vs_M3_pct\n");
        for (name, v) in &self.variants {
            for (slice, s) in &v.slices {
                let value = s.pll_vs_m3_pct.map(|x| x.to_string()).unwrap_or_default();
                out.push_str(&format!("{name},{slice},{value}\n"));
            }
        }
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}
