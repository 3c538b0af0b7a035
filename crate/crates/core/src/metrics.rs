//! Running Poisson log loss and calibration bias, overall and per simulated
//! day.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::loss::poisson_nll;

/// Sums over a set of evaluated examples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub sum_nll: f64,
    pub sum_pred: f64,
    pub sum_label: f64,
    pub example_count: u64,
}

/// Finalized metrics. Either value is absent when it is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pll: Option<f64>,
    pub bias: Option<f64>,
    pub n: u64,
}

impl Totals {
    fn add(&mut self, nll: f64, pred: f64, label: f64) {
        self.sum_nll += nll;
        self.sum_pred += pred;
        self.sum_label += label;
        self.example_count += 1;
    }

    fn merge(&mut self, other: &Totals) {
        self.sum_nll += other.sum_nll;
        self.sum_pred += other.sum_pred;
        self.sum_label += other.sum_label;
        self.example_count += other.example_count;
    }

    pub fn finalize(&self) -> Summary {
        let pll = (self.example_count > 0).then(|| self.sum_nll / self.example_count as f64);
        let bias = (self.example_count > 0 && self.sum_label > 0.0)
            .then(|| self.sum_pred / self.sum_label);
        Summary {
            pll,
            bias,
            n: self.example_count,
        }
    }
}

/// Single-writer accumulator. Parallel runs keep one per thread and
/// [`merge`](MetricsAccumulator::merge) at the end.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    pub total: Totals,
    /// Keyed by simulated-day index.
    pub windows: BTreeMap<i64, Totals>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a prediction `rate` for an example whose mature label is
    /// `label`.
    pub fn record(&mut self, rate: f64, label: f64, window: i64) -> Result<()> {
        let nll = poisson_nll(rate, label)?;
        self.record_loss(nll, rate, label, window)
    }

    /// Records a precomputed loss; used when the prediction is a signed
    /// difference of two rates and the loss is the sum of both heads.
    pub fn record_loss(&mut self, nll: f64, pred: f64, label: f64, window: i64) -> Result<()> {
        if !(nll.is_finite() && pred.is_finite() && label.is_finite()) {
            return Err(contract(format!(
                "non-finite metric input (nll {nll}, prediction {pred}, label {label})"
            )));
        }
        self.total.add(nll, pred, label);
        self.windows.entry(window).or_default().add(nll, pred, label);
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.total.merge(&other.total);
        for (day, t) in &other.windows {
            self.windows.entry(*day).or_default().merge(t);
        }
    }

    pub fn finalize(&self) -> Summary {
        self.total.finalize()
    }

    /// Per-window and running cumulative summaries, in day order.
    pub fn timeseries(&self) -> Vec<WindowPoint> {
        let mut running = Totals::default();
        self.windows
            .iter()
            .map(|(&day, t)| {
                running.merge(t);
                let w = t.finalize();
                let c = running.finalize();
                WindowPoint {
                    day,
                    pll: w.pll,
                    bias: w.bias,
                    cumulative_pll: c.pll,
                    cumulative_bias: c.bias,
                    n: t.example_count,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowPoint {
    pub day: i64,
    pub pll: Option<f64>,
    pub bias: Option<f64>,
    pub cumulative_pll: Option<f64>,
    pub cumulative_bias: Option<f64>,
    pub n: u64,
}
