//! JSON run configuration and its resolution into a ready-to-run scenario.

use std::path::PathBuf;

use consensus_core::engine::{ReferenceSignal, Scenario, Variant};
use consensus_core::graph::WeightedGraph;
use consensus_core::lti::{hinf_norm, random_norm_bounded, StateSpaceSystem};
use consensus_core::trigger::TriggerParams;
use serde::Deserialize;

use crate::builtins;

/// Every tenth integration step lands in trace.csv unless overridden.
pub const DEFAULT_DECIMATION: usize = 10;

const HINF_TOL: f64 = 1e-8;

/// Top-level JSON config. Either `builtin` selects a packaged scenario or
/// the scenario fields (`variant` through `step`) describe one inline.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub builtin: Option<String>,
    pub variant: Option<Variant>,
    pub graph: Option<WeightedGraph>,
    pub trigger: Option<TriggerParams>,
    pub gains: Option<Gains>,
    pub uncertainties: Option<UncertaintySpec>,
    pub references: Option<Vec<ReferenceSignal>>,
    pub x0: Option<Vec<f64>>,
    pub w0: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    pub step: Option<f64>,
    pub seed: Option<u64>,
    pub outputs: Option<PathBuf>,
    pub decimation: Option<usize>,
    pub checks: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gains {
    pub beta: f64,
    #[serde(default)]
    pub theta: Option<f64>,
}

/// Uncertainty description: explicit per-agent blocks, explicit per-edge
/// blocks, or seeded random per-edge blocks below a prescribed norm bound.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum UncertaintySpec {
    Agents { agents: Vec<StateSpaceSystem> },
    Edges { edges: Vec<StateSpaceSystem> },
    RandomEdges { random_edges: RandomEdgeSpec },
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomEdgeSpec {
    pub order: usize,
    pub bound: f64,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub builtin: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub step: Option<f64>,
    pub horizon: Option<f64>,
    pub decimation: Option<usize>,
    pub gnuplot: bool,
}

/// Fully resolved run: a validated scenario plus everything the report
/// layer needs (uncertainty bounds, seed, output policy).
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub builtin: Option<String>,
    pub scenario: Scenario,
    /// Worst-case H-infinity norm over agent uncertainty blocks.
    pub eta: Option<f64>,
    /// Norm bound of the edge uncertainty blocks.
    pub delta: Option<f64>,
    pub seed: u64,
    pub decimation: usize,
    pub checks: Option<Vec<String>>,
    pub outputs: Option<PathBuf>,
    pub gnuplot: bool,
}

pub fn resolve(cfg: RunConfig, ov: &Overrides) -> Result<ResolvedRun, String> {
    let seed_opt = ov.seed.or(cfg.seed);
    let builtin_name = ov.builtin.clone().or_else(|| cfg.builtin.clone());

    let mut run = match builtin_name {
        Some(name) => builtins::make(&name, seed_opt)
            .ok_or_else(|| format!("unknown builtin {name:?}; see `consensus-sim list`"))?,
        None => resolve_inline(&cfg, seed_opt)?,
    };

    if let Some(step) = ov.step {
        run.scenario.step = step;
    }
    if let Some(horizon) = ov.horizon {
        run.scenario.horizon = horizon;
    }
    run.scenario.validate()?;

    run.decimation = ov.decimation.or(cfg.decimation).unwrap_or(DEFAULT_DECIMATION);
    if run.decimation == 0 {
        return Err("decimation must be at least 1".into());
    }
    run.checks = cfg.checks;
    run.outputs = ov.out.clone().or(cfg.outputs);
    run.gnuplot = ov.gnuplot;
    Ok(run)
}

fn resolve_inline(cfg: &RunConfig, seed_opt: Option<u64>) -> Result<ResolvedRun, String> {
    let variant = cfg.variant.ok_or("missing field `variant` (or `builtin`)")?;
    let graph = cfg.graph.clone().ok_or("missing field `graph`")?;
    let trigger = cfg.trigger.clone().ok_or("missing field `trigger`")?;
    let gains = cfg.gains.as_ref().ok_or("missing field `gains`")?;
    let x0 = cfg.x0.clone().ok_or("missing field `x0`")?;
    let horizon = cfg.horizon.ok_or("missing field `horizon`")?;
    let step = cfg.step.ok_or("missing field `step`")?;
    let seed = seed_opt.unwrap_or(0);

    let mut agent_uncertainties = None;
    let mut edge_uncertainties = None;
    let mut eta = None;
    let mut delta = None;
    match &cfg.uncertainties {
        None => {}
        Some(UncertaintySpec::Agents { agents }) => {
            eta = Some(worst_case_norm(agents, "agent")?);
            agent_uncertainties = Some(agents.clone());
        }
        Some(UncertaintySpec::Edges { edges }) => {
            delta = Some(worst_case_norm(edges, "edge")?);
            edge_uncertainties = Some(edges.clone());
        }
        Some(UncertaintySpec::RandomEdges { random_edges }) => {
            if !(random_edges.bound > 0.0 && random_edges.bound.is_finite()) {
                return Err(format!(
                    "random_edges.bound must be positive and finite, got {}",
                    random_edges.bound
                ));
            }
            delta = Some(random_edges.bound);
            edge_uncertainties = Some(seeded_edge_blocks(
                graph.edges.len(),
                seed,
                random_edges.order,
                random_edges.bound,
            ));
        }
    }

    let scenario = Scenario {
        variant,
        graph,
        trigger,
        beta: gains.beta,
        theta: gains.theta,
        agent_uncertainties,
        edge_uncertainties,
        references: cfg.references.clone(),
        x0,
        w0: cfg.w0.clone(),
        horizon,
        step,
    };
    Ok(ResolvedRun {
        builtin: None,
        scenario,
        eta,
        delta,
        seed,
        decimation: DEFAULT_DECIMATION,
        checks: None,
        outputs: None,
        gnuplot: false,
    })
}

/// One independent block per edge, seeded so the same `seed` reproduces
/// the same realization bit for bit.
pub fn seeded_edge_blocks(
    edge_count: usize,
    seed: u64,
    order: usize,
    bound: f64,
) -> Vec<StateSpaceSystem> {
    (0..edge_count)
        .map(|e| random_norm_bounded(seed.wrapping_add(e as u64), order, bound))
        .collect()
}

pub fn worst_case_norm(blocks: &[StateSpaceSystem], kind: &str) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (i, b) in blocks.iter().enumerate() {
        let norm = hinf_norm(b, HINF_TOL)
            .map_err(|e| format!("{kind} uncertainty block {i}: {e}"))?;
        worst = worst.max(norm);
    }
    Ok(worst)
}
