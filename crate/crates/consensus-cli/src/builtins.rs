//! Packaged scenarios on the six-agent benchmark graph.

use consensus_core::benchmark::{
    agent_uncertainty_blocks, benchmark_graph, default_x0, reference_signals,
};
use consensus_core::engine::{Scenario, Variant};
use consensus_core::trigger::TriggerParams;

use crate::config::{seeded_edge_blocks, worst_case_norm, ResolvedRun, DEFAULT_DECIMATION};

pub const BUILTIN_NAMES: [&str; 6] = [
    "nominal",
    "additive_beta02",
    "additive_beta01",
    "additive_beta12",
    "topology",
    "dac",
];

/// Norm bound imposed on the seeded edge blocks of the `topology` builtin.
pub const TOPOLOGY_DELTA: f64 = 0.1315;
pub const TOPOLOGY_EDGE_ORDER: usize = 2;
const TOPOLOGY_DEFAULT_SEED: u64 = 11;

const DEFAULT_STEP: f64 = 1e-3;

fn trigger(alpha: f64) -> TriggerParams {
    TriggerParams { alpha, mu: 0.1, nu: 5.0 }
}

fn base(scenario: Scenario, name: &str, seed: u64) -> ResolvedRun {
    ResolvedRun {
        builtin: Some(name.to_string()),
        scenario,
        eta: None,
        delta: None,
        seed,
        decimation: DEFAULT_DECIMATION,
        checks: None,
        outputs: None,
        gnuplot: false,
    }
}

/// Builds a builtin by name. The seed only affects scenarios with random
/// content (the `topology` edge blocks); it is echoed everywhere for
/// reproducibility.
pub fn make(name: &str, seed: Option<u64>) -> Option<ResolvedRun> {
    let graph = benchmark_graph();
    let run = match name {
        "nominal" => {
            let scenario = Scenario {
                variant: Variant::Nominal,
                graph,
                trigger: trigger(0.02),
                beta: 0.2,
                theta: None,
                agent_uncertainties: None,
                edge_uncertainties: None,
                references: None,
                x0: default_x0(),
                w0: None,
                horizon: 40.0,
                step: DEFAULT_STEP,
            };
            base(scenario, name, seed.unwrap_or(0))
        }
        "additive_beta02" | "additive_beta01" | "additive_beta12" => {
            let (beta, horizon) = match name {
                "additive_beta02" => (0.2, 40.0),
                "additive_beta01" => (0.1, 60.0),
                _ => (1.2, 40.0),
            };
            let blocks = agent_uncertainty_blocks();
            let eta = worst_case_norm(&blocks, "agent").expect("benchmark blocks are stable");
            let scenario = Scenario {
                variant: Variant::Additive,
                graph,
                trigger: trigger(0.02),
                beta,
                theta: None,
                agent_uncertainties: Some(blocks),
                edge_uncertainties: None,
                references: None,
                x0: default_x0(),
                w0: None,
                horizon,
                step: DEFAULT_STEP,
            };
            let mut run = base(scenario, name, seed.unwrap_or(0));
            run.eta = Some(eta);
            run
        }
        "topology" => {
            let seed = seed.unwrap_or(TOPOLOGY_DEFAULT_SEED);
            let blocks = seeded_edge_blocks(
                graph.edges.len(),
                seed,
                TOPOLOGY_EDGE_ORDER,
                TOPOLOGY_DELTA,
            );
            let scenario = Scenario {
                variant: Variant::Topology,
                graph,
                trigger: trigger(0.002),
                beta: 0.08,
                theta: None,
                agent_uncertainties: None,
                edge_uncertainties: Some(blocks),
                references: None,
                x0: default_x0(),
                w0: None,
                horizon: 60.0,
                step: DEFAULT_STEP,
            };
            let mut run = base(scenario, name, seed);
            run.delta = Some(TOPOLOGY_DELTA);
            run
        }
        "dac" => {
            let blocks = agent_uncertainty_blocks();
            let eta = worst_case_norm(&blocks, "agent").expect("benchmark blocks are stable");
            let scenario = Scenario {
                variant: Variant::Dac,
                graph,
                trigger: trigger(0.02),
                beta: 1.2,
                theta: Some(0.25),
                agent_uncertainties: Some(blocks),
                edge_uncertainties: None,
                references: Some(reference_signals()),
                x0: default_x0(),
                w0: None,
                horizon: 200.0,
                step: DEFAULT_STEP,
            };
            let mut run = base(scenario, name, seed.unwrap_or(0));
            run.eta = Some(eta);
            run
        }
        _ => return None,
    };
    Some(run)
}

/// One line per builtin for the `list` subcommand.
pub fn describe(name: &str) -> Option<String> {
    let line = match name {
        "nominal" => "ideal channels, beta=0.2 alpha=0.02 mu=0.1 nu=5 horizon=40".to_string(),
        "additive_beta02" => {
            "agent uncertainty blocks, beta=0.2 alpha=0.02 mu=0.1 nu=5 horizon=40".to_string()
        }
        "additive_beta01" => {
            "agent uncertainty blocks, beta=0.1 alpha=0.02 mu=0.1 nu=5 horizon=60".to_string()
        }
        "additive_beta12" => {
            "agent uncertainty blocks, beta=1.2 alpha=0.02 mu=0.1 nu=5 horizon=40 (diverges)"
                .to_string()
        }
        "topology" => format!(
            "seeded order-{TOPOLOGY_EDGE_ORDER} edge blocks, delta={TOPOLOGY_DELTA} \
             beta=0.08 alpha=0.002 mu=0.1 nu=5 horizon=60"
        ),
        "dac" => {
            "averaging variant, theta=0.25 beta=1.2 alpha=0.02 mu=0.1 nu=5 horizon=200".to_string()
        }
        _ => return None,
    };
    Some(line)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_resolves_and_validates() {
        for name in BUILTIN_NAMES {
            let run = make(name, None).unwrap();
            run.scenario.validate().unwrap();
            assert_eq!(run.builtin.as_deref(), Some(name));
            assert!(describe(name).is_some());
        }
    }

    #[test]
    fn topology_seed_changes_blocks() {
        let a = make("topology", Some(1)).unwrap();
        let b = make("topology", Some(2)).unwrap();
        let blocks_a = a.scenario.edge_uncertainties.unwrap();
        let blocks_b = b.scenario.edge_uncertainties.unwrap();
        assert_ne!(format!("{blocks_a:?}"), format!("{blocks_b:?}"));
    }
}
