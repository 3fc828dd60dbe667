//! Condition evaluation and the summary.json document.

use consensus_core::conditions::{
    check_additive, check_dac_consensus, check_dac_performance, check_nominal, check_topology,
    gain_profiles, ConditionReport, LoopFamily,
};
use consensus_core::engine::{simulate, Scenario, SimError, SimulationTrace, Variant};
use consensus_core::graph::{laplacian, spectrum, LaplacianSpectrum};
use consensus_core::lti::FrequencyGrid;
use consensus_core::metrics::{summarize_run, RunSummary};
use serde::{Deserialize, Serialize};

use crate::config::ResolvedRun;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    /// State norm left the finite range before the horizon.
    Diverged,
    /// Per-agent event cap was hit; the run is truncated.
    EventStorm,
    /// `check` mode: conditions only, no trajectory.
    NotSimulated,
}

/// Everything summary.json holds. The scenario echo is literal: feeding it
/// back through `run` with the same seed reproduces the outputs bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryDoc {
    pub builtin: Option<String>,
    pub variant: Variant,
    pub outcome: Outcome,
    pub diverged: bool,
    pub seed: u64,
    pub lambda2: f64,
    #[serde(rename = "lambdaN")]
    pub lambda_n: f64,
    pub eta: Option<f64>,
    pub delta: Option<f64>,
    pub gamma: f64,
    pub summary: Option<RunSummary>,
    pub conditions: Vec<ConditionReport>,
    pub scenario: Scenario,
    pub decimation: usize,
}

pub struct RunOutcome {
    pub doc: SummaryDoc,
    pub trace: SimulationTrace,
    pub exit_code: i32,
}

/// Applicable convergence conditions plus the frequency-sweep small-gain
/// report. Returns the loop gamma alongside.
pub fn evaluate_conditions(run: &ResolvedRun, spec: &LaplacianSpectrum) -> (f64, Vec<ConditionReport>) {
    let sc = &run.scenario;
    let alpha = sc.trigger.alpha;
    let lambda2 = spec.lambda2;
    let lambda_n = spec.lambda_n;
    let sampling_gain = (2.0 * alpha * lambda_n).sqrt();

    let mut reports = vec![check_nominal(alpha, lambda_n)];
    let (gamma, family) = match sc.variant {
        Variant::Nominal => (sampling_gain, None),
        Variant::Additive => {
            let eta = run.eta.expect("additive run resolved with eta");
            reports.push(check_additive(alpha, sc.beta, eta, lambda_n));
            (eta.max(sampling_gain), Some(LoopFamily::Additive { beta: sc.beta }))
        }
        Variant::Topology => {
            let delta = run.delta.expect("topology run resolved with delta");
            reports.push(check_topology(alpha, delta, lambda2, lambda_n));
            (delta.max(sampling_gain), Some(LoopFamily::Topology { beta: sc.beta }))
        }
        Variant::Dac => {
            let eta = run.eta.expect("dac run resolved with eta");
            let theta = sc.theta.expect("dac scenario validated with theta");
            reports.push(check_dac_consensus(alpha, sc.beta, theta, eta, lambda_n));
            reports.push(check_dac_performance(alpha, sc.beta, theta, eta, lambda2, lambda_n));
            (eta.max(sampling_gain), Some(LoopFamily::Dac { beta: sc.beta, theta }))
        }
    };

    if let Some(family) = family {
        let profile = gain_profiles(&family, spec, &FrequencyGrid::default_condition_grid());
        let lhs = profile.sup_mu_upper;
        let rhs = 1.0 / gamma;
        reports.push(ConditionReport {
            name: "small_gain_profile".to_string(),
            lhs,
            rhs,
            satisfied: lhs < rhs,
            inputs: [
                ("gamma".to_string(), gamma),
                ("sup_omega".to_string(), profile.sup_omega),
                ("grid_points".to_string(), profile.omegas.len() as f64),
            ]
            .into_iter()
            .collect(),
        });
    }

    if let Some(filter) = &run.checks {
        reports.retain(|r| filter.iter().any(|f| f == &r.name));
    }
    (gamma, reports)
}

fn base_doc(run: &ResolvedRun) -> Result<SummaryDoc, String> {
    let spec = spectrum(&laplacian(&run.scenario.graph)).map_err(|e| e.to_string())?;
    let (gamma, conditions) = evaluate_conditions(run, &spec);
    Ok(SummaryDoc {
        builtin: run.builtin.clone(),
        variant: run.scenario.variant,
        outcome: Outcome::NotSimulated,
        diverged: false,
        seed: run.seed,
        lambda2: spec.lambda2,
        lambda_n: spec.lambda_n,
        eta: run.eta,
        delta: run.delta,
        gamma,
        summary: None,
        conditions,
        scenario: run.scenario.clone(),
        decimation: run.decimation,
    })
}

/// Conditions only; no trajectory is computed.
pub fn check_run(run: &ResolvedRun) -> Result<SummaryDoc, String> {
    base_doc(run)
}

/// Simulates the scenario and assembles the full report. Divergence and
/// event storms still produce a document and a (partial) trace; the exit
/// code tells them apart.
pub fn execute_run(run: &ResolvedRun) -> Result<RunOutcome, String> {
    let mut doc = base_doc(run)?;
    let (trace, outcome, exit_code) = match simulate(&run.scenario) {
        Ok(trace) => (trace, Outcome::Completed, 0),
        Err(SimError::NonFinite { partial, .. }) => (*partial, Outcome::Diverged, 2),
        Err(SimError::EventStorm { partial, .. }) => (*partial, Outcome::EventStorm, 3),
        Err(e) => return Err(e.to_string()),
    };
    doc.outcome = outcome;
    doc.diverged = outcome == Outcome::Diverged;
    doc.summary = Some(summarize_run(
        &trace,
        &run.scenario.trigger,
        doc.lambda_n,
        run.scenario.references.as_deref(),
    ));
    if doc.scenario.variant == Variant::Dac && doc.scenario.w0.is_none() {
        // Echo the filter state the run actually started from so the echo
        // re-runs bit for bit.
        if let Some(w) = &trace.w {
            doc.scenario.w0 = w.first().cloned();
        }
    }
    Ok(RunOutcome { doc, trace, exit_code })
}
