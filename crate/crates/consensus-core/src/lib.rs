//! Event-triggered distributed consensus over undirected networks.
//!
//! The crate provides the building blocks of an event-triggered consensus
//! simulator: weighted graphs with their Laplacian spectra ([`graph`]),
//! LTI uncertainty blocks with H-infinity machinery ([`lti`]), triggering
//! functions and inter-event holders ([`trigger`]), a hybrid RK4 simulation
//! engine with bisection event location ([`engine`]), closed-form robustness
//! condition checks ([`conditions`]), and trace post-processing ([`metrics`]).
//! [`benchmark`] ships the six-agent network, uncertainty blocks, and
//! reference signals used by the built-in scenarios of the CLI.

pub mod benchmark;
pub mod conditions;
pub mod engine;
pub mod graph;
pub mod lti;
pub mod metrics;
pub mod trigger;

pub use conditions::{ConditionReport, GainProfile, LoopFamily};
pub use engine::{
    EventRecord, ReferenceSignal, ReferenceTerm, Scenario, SimError, SimulationTrace, Variant,
    Waveform,
};
pub use graph::{LaplacianSpectrum, WeightedGraph};
pub use lti::{FrequencyGrid, StateSpaceSystem};
pub use metrics::RunSummary;
pub use trigger::TriggerParams;
