//! Triggering function and the two inter-event holders: zero-order hold and
//! the exponential hold used by dynamic average consensus.

use serde::{Deserialize, Serialize};

/// Parameters of the triggering function
/// f_i = e_i^2 - alpha * sum_j a_ij (est_i - est_j)^2 - mu * exp(-nu t).
///
/// Zeno behavior is excluded as long as mu > 0 and nu > 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TriggerParams {
    /// Weight on the local disagreement threshold.
    pub alpha: f64,
    /// Amplitude of the decaying exponential offset.
    pub mu: f64,
    /// Decay rate of the offset, 1/s.
    pub nu: f64,
}

impl TriggerParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0) {
            return Err(format!("trigger alpha must be positive, got {}", self.alpha));
        }
        if !(self.mu > 0.0) {
            return Err(format!("trigger mu must be positive, got {}", self.mu));
        }
        if !(self.nu > 0.0) {
            return Err(format!("trigger nu must be positive, got {}", self.nu));
        }
        Ok(())
    }
}

/// Triggering function value; an event fires when this reaches zero or above.
///
/// `error` is the sampling error of the variant (est minus current value),
/// `local_disagreement_sq` is sum_j a_ij (est_i - est_j)^2 computed by the
/// engine over the broadcast estimates.
pub fn trigger_value(error: f64, local_disagreement_sq: f64, t: f64, p: &TriggerParams) -> f64 {
    error * error - p.alpha * local_disagreement_sq - p.mu * (-p.nu * t).exp()
}

/// Zero-order hold: broadcast value frozen at the last trigger.
#[derive(Debug, Clone, Copy)]
pub struct ZohHolder {
    pub last_trigger_time: f64,
    pub held_value: f64,
}

/// The held value, unchanged between events.
pub fn zoh_value(h: &ZohHolder) -> f64 {
    h.held_value
}

/// Exponential holder: decays from the state sampled at the trigger toward
/// the held output target with rate theta.
#[derive(Debug, Clone, Copy)]
pub struct ExpHolder {
    pub last_trigger_time: f64,
    /// State sampled at the trigger (the value at dt = 0).
    pub start_value: f64,
    /// Held output the estimate decays toward.
    pub target_value: f64,
    pub theta: f64,
}

/// Closed-form exponential hold
/// exp(-theta dt) * start + (1 - exp(-theta dt)) * target.
///
/// Between events the target is constant, so this equals the integral form
/// of the holder dynamics exactly.
pub fn dac_hold_value(h: &ExpHolder, t: f64) -> f64 {
    debug_assert!(t >= h.last_trigger_time);
    let decay = (-h.theta * (t - h.last_trigger_time)).exp();
    decay * h.start_value + (1.0 - decay) * h.target_value
}
