//! Poisson log loss.
//!
//! The `ln(y!)` term of the negative log-likelihood is dropped: it does not
//! depend on the model, so differences and orderings of losses are
//! unchanged, and it keeps the loss defined for real-valued labels.

use crate::error::{contract, Result};

/// `rate - label * ln(rate)`.
pub fn poisson_nll(rate: f64, label: f64) -> Result<f64> {
    check(rate, label)?;
    Ok(rate - label * rate.ln())
}

/// Derivative of [`poisson_nll`] with respect to `s` where `rate = exp(s)`.
pub fn poisson_nll_grad_lograte(rate: f64, label: f64) -> Result<f64> {
    check(rate, label)?;
    Ok(rate - label)
}

/// Loss evaluated directly on the log-rate, used by the trainer so that a
/// large negative `s` does not round the rate to zero before the log.
pub(crate) fn poisson_nll_lograte(log_rate: f64, label: f64) -> f64 {
    log_rate.exp() - label * log_rate
}

fn check(rate: f64, label: f64) -> Result<()> {
    if !(rate > 0.0) {
        return Err(contract(format!("Poisson rate must be positive, got {rate}")));
    }
    if !(label >= 0.0) {
        return Err(contract(format!("Poisson label must be non-negative, got {label}")));
    }
    Ok(())
}
