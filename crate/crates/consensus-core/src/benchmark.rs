//! The six-agent benchmark network used by the built-in scenarios: graph,
//! per-agent uncertainty blocks, reference signals, and the default
//! initial condition.

use crate::engine::{ReferenceSignal, Waveform};
use crate::graph::WeightedGraph;
use crate::lti::StateSpaceSystem;

/// Six-node weighted benchmark graph.
pub fn benchmark_graph() -> WeightedGraph {
    WeightedGraph::new(
        6,
        vec![
            (0, 1, 1.0),
            (0, 2, 2.0),
            (0, 4, 0.5),
            (1, 5, 1.0),
            (2, 4, 1.0),
            (3, 4, 1.0),
            (4, 5, 1.0),
        ],
    )
    .expect("benchmark graph is valid")
}

/// Per-agent stable SISO uncertainty blocks for the additive-uncertainty
/// and averaging scenarios.
pub fn agent_uncertainty_blocks() -> Vec<StateSpaceSystem> {
    vec![
        StateSpaceSystem::siso(
            &[-55.4, 140.7, -155.7, -71.41],
            &[-8.24, -1.28],
            &[3.3989, -5.4689],
            0.1022,
        ),
        StateSpaceSystem::siso(
            &[-55.4, 140.7, -163.7, -39.56],
            &[-5.1520, -9.2230],
            &[2.03, -2.14],
            0.2760,
        ),
        StateSpaceSystem::siso(&[-0.3], &[-0.28], &[0.5454], 0.046),
        StateSpaceSystem::siso(
            &[-5.4, 14.7, -15.7, -1.41],
            &[-1.24, -0.28],
            &[0.1150, -2.4610],
            0.0920,
        ),
        StateSpaceSystem::siso(
            &[-55.4, 140.7, -155.7, -71.41],
            &[-3.0150, -3.1122],
            &[0.33, -2.14],
            0.4133,
        ),
        StateSpaceSystem::siso(
            &[
                -44.4, 140.7, -57.4, //
                -19.7, -18.41, -6.32, //
                45.70, 29.0, -130.84,
            ],
            &[-0.24, -1.28, 1.16],
            &[4.4563, -10.2542, 4.2646],
            0.2875,
        ),
    ]
}

/// Reference signals for the averaging scenario, one per agent.
pub fn reference_signals() -> Vec<ReferenceSignal> {
    vec![
        ReferenceSignal::single(6.1, Waveform::Sin, 0.02, 0.0, 0.0),
        ReferenceSignal::single(19.1, Waveform::Cos, 0.02, 0.0, 0.0),
        ReferenceSignal::single(4.8, Waveform::Cos, 0.07, 8.0, 0.0),
        ReferenceSignal::single(2.2, Waveform::Sin, 0.06, 0.0, 0.0),
        ReferenceSignal::single(1.9, Waveform::Cos, 0.041, 0.0, 0.09),
        ReferenceSignal::single(2.5, Waveform::Sin, 0.05, 0.0, 0.0),
    ]
}

/// Default initial agent states for the benchmark scenarios.
pub fn default_x0() -> Vec<f64> {
    vec![1.0, -2.0, 3.0, -1.0, 2.0, -3.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::laplacian;
    use approx::assert_abs_diff_eq;

    #[test]
    fn laplacian_first_row_matches_edge_weights() {
        let l = laplacian(&benchmark_graph());
        let expected = [3.5, -1.0, -2.0, 0.0, -0.5, 0.0];
        for (j, &v) in expected.iter().enumerate() {
            assert_abs_diff_eq!(l[(0, j)], v, epsilon = 0.0);
        }
    }

    #[test]
    fn blocks_are_stable_siso() {
        let blocks = agent_uncertainty_blocks();
        assert_eq!(blocks.len(), 6);
        let orders: Vec<usize> = blocks.iter().map(|b| b.order()).collect();
        assert_eq!(orders, vec![2, 2, 1, 2, 2, 3]);
        for b in &blocks {
            assert_eq!((b.inputs(), b.outputs()), (1, 1));
            assert!(b.is_strictly_stable());
        }
    }

    #[test]
    fn reference_values_at_zero() {
        let refs = reference_signals();
        assert_abs_diff_eq!(refs[0].value(0.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(refs[1].value(0.0), 19.1, epsilon = 1e-15);
        assert_abs_diff_eq!(refs[2].value(0.0), 4.8 * 8.0f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(refs[4].value(10.0), 1.9 * 0.41f64.cos() * (-0.9f64).exp(), epsilon = 1e-15);
    }
}
