//! Trace post-processing: consensus error and settling time, truncated
//! L2 norms, the trace-level operator-gain inequality, inter-event
//! statistics, and the averaging variant's tracking error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EventRecord, ReferenceSignal, SimulationTrace, Variant};
use crate::graph::WeightedGraph;
use crate::trigger::TriggerParams;

/// Consensus threshold used for settling-time reports.
pub const CONSENSUS_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("metric requires a {expected:?} trace, got {got:?}")]
    VariantMismatch { expected: Variant, got: Variant },
}

/// Euclidean norm of the mean-removed state at every sample.
pub fn consensus_error(trace: &SimulationTrace) -> Vec<f64> {
    mean_removed_norms(&trace.x)
}

fn mean_removed_norms(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>().sqrt()
        })
        .collect()
}

/// Earliest sample time after which the series stays strictly below the
/// threshold; `None` if the series ends at or above it.
pub fn consensus_time(times: &[f64], series: &[f64], threshold: f64) -> Option<f64> {
    assert!(threshold > 0.0, "threshold must be positive");
    assert_eq!(times.len(), series.len());
    let last_bad = series.iter().rposition(|&v| v >= threshold);
    match last_bad {
        None => times.first().copied(),
        Some(k) if k + 1 < times.len() => Some(times[k + 1]),
        Some(_) => None,
    }
}

/// Truncated L2 norm of a vector-valued sample series by the trapezoid
/// rule: sqrt of the integral of the squared Euclidean norm.
pub fn l2_norm_trapezoid(times: &[f64], rows: &[Vec<f64>]) -> f64 {
    assert_eq!(times.len(), rows.len());
    if times.len() < 2 {
        return 0.0;
    }
    let sq: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut acc = 0.0;
    for k in 0..times.len() - 1 {
        acc += (times[k + 1] - times[k]) * 0.5 * (sq[k] + sq[k + 1]);
    }
    acc.sqrt()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OperatorGainCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

/// Trace-level restatement of the sampling-operator gain bound: the L2
/// norm of the sampling error is at most sqrt(2 alpha lambda_N) times the
/// L2 norm of the mean-removed estimate signal plus sqrt(N mu / nu).
pub fn operator_gain_check(
    trace: &SimulationTrace,
    alpha: f64,
    lambda_n: f64,
    mu: f64,
    nu: f64,
) -> OperatorGainCheck {
    let n = trace.agent_count() as f64;
    let lhs = l2_norm_trapezoid(&trace.times, &trace.sampling_error);
    let z_rows: Vec<Vec<f64>> = trace
        .estimates
        .iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            row.iter().map(|v| v - mean).collect()
        })
        .collect();
    let z_norm = l2_norm_trapezoid(&trace.times, &z_rows);
    let rhs = (2.0 * alpha * lambda_n).sqrt() * z_norm + (n * mu / nu).sqrt();
    OperatorGainCheck { lhs, rhs, margin: rhs - lhs }
}

/// Largest violation of the pointwise trigger inequality
/// e_i^2 <= alpha * disagreement_i + mu e^{-nu t} over all samples and
/// agents. Non-positive values mean the constraint held everywhere.
pub fn pointwise_trigger_slack(
    trace: &SimulationTrace,
    graph: &WeightedGraph,
    trigger: &TriggerParams,
) -> f64 {
    let adj = crate::graph::adjacency_lists(graph);
    let mut worst = f64::NEG_INFINITY;
    for (k, &t) in trace.times.iter().enumerate() {
        let est = &trace.estimates[k];
        let err = &trace.sampling_error[k];
        let offset = trigger.mu * (-trigger.nu * t).exp();
        for (i, nb) in adj.iter().enumerate() {
            let dis: f64 = nb.iter().map(|&(j, w)| w * (est[i] - est[j]) * (est[i] - est[j])).sum();
            let violation = err[i] * err[i] - trigger.alpha * dis - offset;
            worst = worst.max(violation);
        }
    }
    worst
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterEventStats {
    /// Smallest gap between consecutive events of one agent; `None` when no
    /// agent has two events.
    pub min: Option<f64>,
    /// Mean of all per-agent consecutive gaps.
    pub mean: Option<f64>,
    /// Events logged per agent.
    pub counts: Vec<usize>,
}

pub fn inter_event_stats(events: &[EventRecord]) -> InterEventStats {
    let n = events.iter().map(|e| e.agent + 1).max().unwrap_or(0);
    let mut per_agent: Vec<Vec<f64>> = vec![Vec::new(); n];
    for e in events {
        per_agent[e.agent].push(e.time);
    }
    let counts: Vec<usize> = per_agent.iter().map(|v| v.len()).collect();
    let mut gaps = Vec::new();
    for times in &per_agent {
        for pair in times.windows(2) {
            gaps.push(pair[1] - pair[0]);
        }
    }
    if gaps.is_empty() {
        InterEventStats { min: None, mean: None, counts }
    } else {
        let min = gaps.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        InterEventStats { min: Some(min), mean: Some(mean), counts }
    }
}

#[derive(Debug, Clone)]
pub struct DacTrackingSeries {
    /// errors[k][i] = x_i(t_k) minus the instantaneous reference average.
    pub errors: Vec<Vec<f64>>,
    /// Euclidean norm of the error vector at each sample.
    pub norms: Vec<f64>,
    /// Supremum of the norm over the second half of the horizon (t > T/2).
    pub sup_second_half: f64,
}

/// Tracking error of the averaging variant: each agent against the
/// instantaneous average of all reference signals.
pub fn dac_tracking_error(
    trace: &SimulationTrace,
    references: &[ReferenceSignal],
) -> Result<DacTrackingSeries, MetricsError> {
    if trace.variant != Variant::Dac {
        return Err(MetricsError::VariantMismatch { expected: Variant::Dac, got: trace.variant });
    }
    let n = trace.agent_count();
    assert_eq!(references.len(), n, "one reference signal per agent");
    let mut errors = Vec::with_capacity(trace.times.len());
    let mut norms = Vec::with_capacity(trace.times.len());
    for (k, &t) in trace.times.iter().enumerate() {
        let avg = references.iter().map(|r| r.value(t)).sum::<f64>() / n as f64;
        let row: Vec<f64> = (0..n).map(|i| trace.x[k][i] - avg).collect();
        norms.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        errors.push(row);
    }
    let t_half = trace.times.last().copied().unwrap_or(0.0) * 0.5;
    let sup_second_half = trace
        .times
        .iter()
        .zip(&norms)
        .filter(|(&t, _)| t > t_half)
        .map(|(_, &v)| v)
        .fold(0.0f64, f64::max);
    Ok(DacTrackingSeries { errors, norms, sup_second_half })
}

/// Headline numbers of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    /// Settling time of the consensus error below [`CONSENSUS_THRESHOLD`].
    pub t_min: Option<f64>,
    pub final_consensus_error: f64,
    pub event_counts: Vec<usize>,
    pub min_inter_event: Option<f64>,
    /// Slack of the trace-level operator-gain inequality (bound minus
    /// achieved; non-negative when the inequality holds).
    pub operator_gain_margin: f64,
    /// Second-half tracking-error supremum (averaging variant only).
    pub dac_tracking_sup: Option<f64>,
}

/// Computes the standard summary of a completed run.
pub fn summarize_run(
    trace: &SimulationTrace,
    trigger: &TriggerParams,
    lambda_n: f64,
    references: Option<&[ReferenceSignal]>,
) -> RunSummary {
    let norms = consensus_error(trace);
    let t_min = consensus_time(&trace.times, &norms, CONSENSUS_THRESHOLD);
    let final_consensus_error = norms.last().copied().unwrap_or(0.0);
    let stats = inter_event_stats(&trace.events);
    let gain = operator_gain_check(trace, trigger.alpha, lambda_n, trigger.mu, trigger.nu);
    let dac_tracking_sup = match (trace.variant, references) {
        (Variant::Dac, Some(refs)) => {
            Some(dac_tracking_error(trace, refs).expect("variant checked").sup_second_half)
        }
        _ => None,
    };
    RunSummary {
        t_min,
        final_consensus_error,
        event_counts: stats.counts,
        min_inter_event: stats.min,
        operator_gain_margin: gain.margin,
        dac_tracking_sup,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn trace_from_x(variant: Variant, times: Vec<f64>, x: Vec<Vec<f64>>) -> SimulationTrace {
        let zeros: Vec<Vec<f64>> = x.iter().map(|row| vec![0.0; row.len()]).collect();
        SimulationTrace {
            variant,
            times,
            estimates: x.clone(),
            sampling_error: zeros,
            x,
            d: None,
            y: None,
            w: None,
            events: Vec::new(),
            holder_updates: Vec::new(),
            theta: None,
        }
    }

    #[test]
    fn consensus_error_examples() {
        let trace = trace_from_x(
            Variant::Nominal,
            vec![0.0, 1.0],
            vec![vec![2.0; 6], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]],
        );
        let norms = consensus_error(&trace);
        assert_abs_diff_eq!(norms[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(norms[1], (5.0f64 / 6.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn consensus_time_semantics() {
        let times: Vec<f64> = (0..5).map(|k| k as f64).collect();
        assert_eq!(consensus_time(&times, &[0.0; 5], 0.1), Some(0.0));
        assert_eq!(consensus_time(&times, &[0.5, 0.3, 0.09, 0.05, 0.01], 0.1), Some(2.0));
        // Dips below, re-exceeds, then settles: only the final exceedance counts.
        assert_eq!(consensus_time(&times, &[0.5, 0.05, 0.3, 0.05, 0.01], 0.1), Some(3.0));
        assert_eq!(consensus_time(&times, &[0.5, 0.3, 0.2, 0.15, 0.12], 0.1), None);
        assert_eq!(consensus_time(&times, &[0.5, 0.3, 0.2, 0.15, 0.1], 0.1), None);
    }

    #[test]
    fn inter_event_examples() {
        let events: Vec<EventRecord> = [0.0, 0.1, 0.3]
            .iter()
            .map(|&t| EventRecord { agent: 0, time: t, f_value_at_trigger: 0.0 })
            .collect();
        let stats = inter_event_stats(&events);
        assert_abs_diff_eq!(stats.min.unwrap(), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(stats.mean.unwrap(), 0.15, epsilon = 1e-15);
        assert_eq!(stats.counts, vec![3]);

        let single = vec![EventRecord { agent: 1, time: 0.0, f_value_at_trigger: 0.0 }];
        let stats = inter_event_stats(&single);
        assert_eq!(stats.min, None);
        assert_eq!(stats.counts, vec![0, 1]);
    }

    #[test]
    fn trapezoid_matches_exponential_integral() {
        let step = 1e-4;
        let t_end = 4.0;
        let count = (t_end / step) as usize + 1;
        let times: Vec<f64> = (0..count).map(|k| k as f64 * step).collect();
        let rows: Vec<Vec<f64>> = times.iter().map(|&t| vec![(-t).exp()]).collect();
        let exact = ((1.0 - (-2.0 * t_end).exp()) / 2.0).sqrt();
        assert_abs_diff_eq!(l2_norm_trapezoid(&times, &rows), exact, epsilon = 1e-6);
    }

    #[test]
    fn tracking_error_requires_averaging_variant() {
        let trace = trace_from_x(Variant::Nominal, vec![0.0], vec![vec![0.0, 0.0]]);
        let refs = vec![ReferenceSignal::zero(), ReferenceSignal::zero()];
        assert_eq!(
            dac_tracking_error(&trace, &refs).unwrap_err(),
            MetricsError::VariantMismatch { expected: Variant::Dac, got: Variant::Nominal }
        );
    }

    #[test]
    fn tracking_error_zero_when_states_match_reference_average() {
        use crate::engine::Waveform;
        let refs = vec![
            ReferenceSignal::single(2.0, Waveform::Sin, 0.3, 0.0, 0.0),
            ReferenceSignal::single(1.0, Waveform::Cos, 0.7, 0.2, 0.0),
        ];
        let times = vec![0.0, 0.5, 1.0, 7.0];
        let x: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| {
                let avg = (refs[0].value(t) + refs[1].value(t)) / 2.0;
                vec![avg, avg]
            })
            .collect();
        let mut trace = trace_from_x(Variant::Dac, times, x);
        trace.theta = Some(0.25);
        let series = dac_tracking_error(&trace, &refs).unwrap();
        assert!(series.norms.iter().all(|&v| v < 1e-14));
        assert_eq!(series.sup_second_half, 0.0);
    }
}
