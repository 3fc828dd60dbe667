//! Hybrid simulation of the event-triggered consensus loops: fixed-step
//! RK4 between events, trigger evaluation at step ends, bisection of the
//! crossing instant on the step's cubic Hermite dense output, and holder
//! updates applied in cascade rounds at each trigger instant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{adjacency_lists, WeightedGraph};
use crate::lti::{co_simulate_step, StateSpaceSystem};
use crate::trigger::{dac_hold_value, trigger_value, ExpHolder, TriggerParams};

/// Default per-agent event budget before the run aborts as an event storm.
pub const DEFAULT_EVENT_CAP: usize = 1_000_000;
/// Any state component beyond this magnitude aborts the run as divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

/// Crossing refinement tolerance on the trigger value, scaled by mu so it
/// tracks the trigger's own magnitude floor.
pub fn trigger_tolerance(p: &TriggerParams) -> f64 {
    1e-8 * p.mu
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Nominal,
    Additive,
    Topology,
    Dac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Waveform {
    Sin,
    Cos,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReferenceTerm {
    pub amplitude: f64,
    pub kind: Waveform,
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub decay: f64,
}

impl ReferenceTerm {
    fn value(&self, t: f64) -> f64 {
        let arg = self.frequency * t + self.phase;
        let env = self.amplitude * (-self.decay * t).exp();
        env * match self.kind {
            Waveform::Sin => arg.sin(),
            Waveform::Cos => arg.cos(),
        }
    }

    fn rate(&self, t: f64) -> f64 {
        let arg = self.frequency * t + self.phase;
        let env = self.amplitude * (-self.decay * t).exp();
        match self.kind {
            Waveform::Sin => env * (self.frequency * arg.cos() - self.decay * arg.sin()),
            Waveform::Cos => env * (-self.frequency * arg.sin() - self.decay * arg.cos()),
        }
    }
}

/// Sum of damped sinusoid terms with an analytic derivative.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReferenceSignal {
    pub terms: Vec<ReferenceTerm>,
}

impl ReferenceSignal {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn single(amplitude: f64, kind: Waveform, frequency: f64, phase: f64, decay: f64) -> Self {
        Self {
            terms: vec![ReferenceTerm { amplitude, kind, frequency, phase, decay }],
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        self.terms.iter().map(|term| term.value(t)).sum()
    }

    /// Analytic time derivative, term by term.
    pub fn rate(&self, t: f64) -> f64 {
        self.terms.iter().map(|term| term.rate(t)).sum()
    }
}

/// Full experiment description for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub variant: Variant,
    pub graph: WeightedGraph,
    pub trigger: TriggerParams,
    pub beta: f64,
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub agent_uncertainties: Option<Vec<StateSpaceSystem>>,
    #[serde(default)]
    pub edge_uncertainties: Option<Vec<StateSpaceSystem>>,
    #[serde(default)]
    pub references: Option<Vec<ReferenceSignal>>,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub w0: Option<Vec<f64>>,
    pub horizon: f64,
    pub step: f64,
}

impl Scenario {
    /// Structural validation; every variant-specific optional must be
    /// present exactly when that variant uses it.
    pub fn validate(&self) -> Result<(), String> {
        self.graph.validate().map_err(|e| format!("graph: {e}"))?;
        self.trigger.validate()?;
        let n = self.graph.node_count;
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(format!("beta must be positive and finite, got {}", self.beta));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(format!("horizon must be positive and finite, got {}", self.horizon));
        }
        if !(self.step > 0.0) {
            return Err(format!("step must be positive, got {}", self.step));
        }
        if self.step > 1e-2 {
            return Err(format!("step must be at most 1e-2 s, got {}", self.step));
        }
        if self.step >= self.horizon {
            return Err(format!(
                "step ({}) must be smaller than horizon ({})",
                self.step, self.horizon
            ));
        }
        if self.x0.len() != n {
            return Err(format!("x0 has {} entries, graph has {} nodes", self.x0.len(), n));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err("x0 entries must be finite".to_string());
        }
        let want = |cond: bool, field: &str, used: bool| -> Result<(), String> {
            if cond == used {
                Ok(())
            } else if used {
                Err(format!("{field} is required for variant {:?}", self.variant))
            } else {
                Err(format!("{field} is not used by variant {:?}", self.variant))
            }
        };
        let is_dac = self.variant == Variant::Dac;
        want(self.theta.is_some(), "theta", is_dac)?;
        want(
            self.agent_uncertainties.is_some(),
            "agent_uncertainties",
            matches!(self.variant, Variant::Additive | Variant::Dac),
        )?;
        want(
            self.edge_uncertainties.is_some(),
            "edge_uncertainties",
            self.variant == Variant::Topology,
        )?;
        want(self.references.is_some(), "references", is_dac)?;
        if !is_dac && self.w0.is_some() {
            return Err(format!("w0 is not used by variant {:?}", self.variant));
        }
        if let Some(theta) = self.theta {
            if !(theta > 0.0 && theta.is_finite()) {
                return Err(format!("theta must be positive and finite, got {theta}"));
            }
        }
        if let Some(blocks) = &self.agent_uncertainties {
            if blocks.len() != n {
                return Err(format!(
                    "agent_uncertainties has {} blocks, graph has {} nodes",
                    blocks.len(),
                    n
                ));
            }
            for (i, b) in blocks.iter().enumerate() {
                if b.inputs() != 1 || b.outputs() != 1 {
                    return Err(format!("agent_uncertainties[{i}] must be single-input single-output"));
                }
            }
        }
        if let Some(blocks) = &self.edge_uncertainties {
            if blocks.len() != self.graph.edges.len() {
                return Err(format!(
                    "edge_uncertainties has {} blocks, graph has {} edges",
                    blocks.len(),
                    self.graph.edges.len()
                ));
            }
            for (e, b) in blocks.iter().enumerate() {
                if b.inputs() != 1 || b.outputs() != 1 {
                    return Err(format!("edge_uncertainties[{e}] must be single-input single-output"));
                }
            }
        }
        if let Some(refs) = &self.references {
            if refs.len() != n {
                return Err(format!("references has {} signals, graph has {} nodes", refs.len(), n));
            }
            for (i, r) in refs.iter().enumerate() {
                for term in &r.terms {
                    if term.decay < 0.0 {
                        return Err(format!("references[{i}] has negative decay (unbounded signal)"));
                    }
                    if !(term.amplitude.is_finite() && term.frequency.is_finite() && term.phase.is_finite()) {
                        return Err(format!("references[{i}] has a non-finite term"));
                    }
                }
            }
        }
        if let Some(w0) = &self.w0 {
            if w0.len() != n {
                return Err(format!("w0 has {} entries, graph has {} nodes", w0.len(), n));
            }
            if w0.iter().any(|v| !v.is_finite()) {
                return Err("w0 entries must be finite".to_string());
            }
        }
        Ok(())
    }
}

/// One logged trigger. The stored value is the trigger function at the
/// instant the event was applied: near zero for bisected crossings, the
/// post-reset value for the mandatory t0 events, and the (non-negative)
/// crossing value for same-instant cascade triggers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub agent: usize,
    pub time: f64,
    pub f_value_at_trigger: f64,
}

/// What a holder was loaded with at an event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HeldValue {
    /// Zero-order hold sample.
    Sample(f64),
    /// Exponential holder: decays from `start` toward `target` at rate theta.
    Exponential { start: f64, target: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderUpdate {
    pub agent: usize,
    pub time: f64,
    pub held: HeldValue,
}

/// Time-sampled run record. Rows are sample instants: `x[k][i]` is agent
/// i's state at `times[k]`. The estimate channel holds the broadcast
/// signal each variant triggers on (ZOH of x or y, or the exponential
/// holder output for the averaging variant).
#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub variant: Variant,
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub estimates: Vec<Vec<f64>>,
    /// Sampling error the trigger compares: estimate minus tracked signal.
    pub sampling_error: Vec<Vec<f64>>,
    /// Uncertainty block outputs (additive and averaging variants).
    pub d: Option<Vec<Vec<f64>>>,
    /// Measured outputs y = x + d (additive and averaging variants).
    pub y: Option<Vec<Vec<f64>>>,
    /// Averaging filter states (averaging variant only).
    pub w: Option<Vec<Vec<f64>>>,
    pub events: Vec<EventRecord>,
    pub holder_updates: Vec<HolderUpdate>,
    /// Exponential holder rate (averaging variant only); needed for replay.
    pub theta: Option<f64>,
}

impl SimulationTrace {
    pub fn agent_count(&self) -> usize {
        self.x.first().map(|row| row.len()).unwrap_or(0)
    }

    /// Event times grouped per agent, in chronological order.
    pub fn events_by_agent(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.agent_count()];
        for ev in &self.events {
            out[ev.agent].push(ev.time);
        }
        out
    }

    /// Keeps every `every`-th sample plus the final one. Events and holder
    /// updates are untouched; they are not grid-sampled data.
    pub fn decimate(&mut self, every: usize) {
        assert!(every >= 1, "decimation factor must be at least 1");
        if every == 1 || self.times.is_empty() {
            return;
        }
        let last = self.times.len() - 1;
        let keep = move |k: usize| k % every == 0 || k == last;
        fn filter<T>(rows: &mut Vec<T>, keep: impl Fn(usize) -> bool) {
            let mut k = 0;
            rows.retain(|_| {
                let r = keep(k);
                k += 1;
                r
            });
        }
        filter(&mut self.times, keep);
        filter(&mut self.x, keep);
        filter(&mut self.estimates, keep);
        filter(&mut self.sampling_error, keep);
        for opt in [&mut self.d, &mut self.y, &mut self.w] {
            if let Some(rows) = opt {
                filter(rows, keep);
            }
        }
    }

    /// Reconstructs the estimate channel purely from the holder-update log
    /// and the holder closed forms; the stored channel must match this.
    pub fn replay_estimates(&self) -> Vec<Vec<f64>> {
        let n = self.agent_count();
        let mut per_agent: Vec<Vec<&HolderUpdate>> = vec![Vec::new(); n];
        for u in &self.holder_updates {
            per_agent[u.agent].push(u);
        }
        let mut out = vec![vec![0.0; n]; self.times.len()];
        for i in 0..n {
            let ups = &per_agent[i];
            assert!(!ups.is_empty(), "agent {i} has no holder updates");
            let mut idx = 0;
            for (k, &t) in self.times.iter().enumerate() {
                while idx + 1 < ups.len() && ups[idx + 1].time <= t {
                    idx += 1;
                }
                let u = ups[idx];
                out[k][i] = match u.held {
                    HeldValue::Sample(v) => v,
                    HeldValue::Exponential { start, target } => {
                        let theta = self.theta.expect("exponential holds require theta");
                        let h = ExpHolder {
                            last_trigger_time: u.time,
                            start_value: start,
                            target_value: target,
                            theta,
                        };
                        dac_hold_value(&h, t)
                    }
                };
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("event storm: agent {agent} exceeded {cap} events at t = {time}")]
    EventStorm {
        agent: usize,
        cap: usize,
        time: f64,
        partial: Box<SimulationTrace>,
    },
    #[error("state diverged (|state| > 1e9 or non-finite) at t = {time}")]
    NonFinite { time: f64, partial: Box<SimulationTrace> },
    #[error("singular holder update solve at t = {time}")]
    SingularEventSolve { time: f64 },
}

// ---------------------------------------------------------------------------
// Reference dynamics in matrix form. These are the textbook right-hand
// sides; the engine below evaluates the same algebra on flat buffers, and
// the integration tests check the two against each other.

/// Nominal consensus flow given the held estimates: -beta L xhat.
pub fn dynamics_nominal(xhat: &DVector<f64>, beta: f64, l: &DMatrix<f64>) -> DVector<f64> {
    -(l * xhat) * beta
}

#[derive(Debug, Clone)]
pub struct AdditiveDerivatives {
    pub x_dot: DVector<f64>,
    pub block_state_dots: Vec<DVector<f64>>,
    pub d: DVector<f64>,
    pub y: DVector<f64>,
    pub u: DVector<f64>,
}

/// Additive-uncertainty flow given the held outputs yhat: the input
/// u = -beta L yhat drives both the agents and the per-agent blocks.
pub fn dynamics_additive(
    x: &DVector<f64>,
    yhat: &DVector<f64>,
    block_states: &[DVector<f64>],
    beta: f64,
    l: &DMatrix<f64>,
    blocks: &[StateSpaceSystem],
) -> AdditiveDerivatives {
    let n = x.len();
    let u = -(l * yhat) * beta;
    let mut block_state_dots = Vec::with_capacity(n);
    let mut d = DVector::zeros(n);
    for i in 0..n {
        let (ds, out) = co_simulate_step(&blocks[i], &block_states[i], &DVector::from_element(1, u[i]));
        block_state_dots.push(ds);
        d[i] = out[0];
    }
    let y = x + &d;
    AdditiveDerivatives { x_dot: u.clone(), block_state_dots, d, y, u }
}

/// Edge-uncertainty flow: nominal drift from the held estimates plus the
/// perturbation channel routed through the incidence factors.
pub fn dynamics_topology(
    xhat: &DVector<f64>,
    edge_states: &[DVector<f64>],
    beta: f64,
    d_inc: &DMatrix<f64>,
    w: &DMatrix<f64>,
    edge_blocks: &[StateSpaceSystem],
) -> (DVector<f64>, Vec<DVector<f64>>) {
    let m = edge_blocks.len();
    let w_sqrt = DMatrix::from_fn(m, m, |i, j| if i == j { w[(i, i)].sqrt() } else { 0.0 });
    let zeta = &w_sqrt * (d_inc.transpose() * xhat);
    let mut edge_state_dots = Vec::with_capacity(m);
    let mut v = DVector::zeros(m);
    for e in 0..m {
        let (ds, out) =
            co_simulate_step(&edge_blocks[e], &edge_states[e], &DVector::from_element(1, zeta[e]));
        edge_state_dots.push(ds);
        v[e] = out[0];
    }
    let l = d_inc * w * d_inc.transpose();
    let x_dot = -(&l * xhat) * beta - (d_inc * (&w_sqrt * v)) * beta;
    (x_dot, edge_state_dots)
}

#[derive(Debug, Clone)]
pub struct DacDerivatives {
    pub x_dot: DVector<f64>,
    pub w_dot: DVector<f64>,
    pub block_state_dots: Vec<DVector<f64>>,
    pub d: DVector<f64>,
    pub y: DVector<f64>,
    pub u: DVector<f64>,
}

/// Averaging-variant flow given the holder outputs what at the current
/// instant: u = -beta L what, y = x + d, x' = u + r', w' = -theta(w-y) + u.
pub fn dynamics_dac(
    x: &DVector<f64>,
    w: &DVector<f64>,
    what: &DVector<f64>,
    block_states: &[DVector<f64>],
    r_dot: &DVector<f64>,
    beta: f64,
    theta: f64,
    l: &DMatrix<f64>,
    blocks: &[StateSpaceSystem],
) -> DacDerivatives {
    let n = x.len();
    let u = -(l * what) * beta;
    let mut block_state_dots = Vec::with_capacity(n);
    let mut d = DVector::zeros(n);
    for i in 0..n {
        let (ds, out) = co_simulate_step(&blocks[i], &block_states[i], &DVector::from_element(1, u[i]));
        block_state_dots.push(ds);
        d[i] = out[0];
    }
    let y = x + &d;
    let x_dot = &u + r_dot;
    let w_dot = (&y - w) * theta + &u;
    DacDerivatives { x_dot, w_dot, block_state_dots, d, y, u }
}

// ---------------------------------------------------------------------------
// Engine internals: flat-buffer right-hand side and the event loop.

struct CompiledBlock {
    order: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: f64,
    off: usize,
}

impl CompiledBlock {
    fn compile(sys: &StateSpaceSystem, off: usize) -> Self {
        let order = sys.order();
        let mut a = vec![0.0; order * order];
        for r in 0..order {
            for c in 0..order {
                a[r * order + c] = sys.a[(r, c)];
            }
        }
        let b: Vec<f64> = (0..order).map(|r| sys.b[(r, 0)]).collect();
        let c: Vec<f64> = (0..order).map(|j| sys.c[(0, j)]).collect();
        CompiledBlock { order, a, b, c, d: sys.d[(0, 0)], off }
    }

    /// c * xi part of the output, without the feedthrough term.
    fn state_output(&self, s: &[f64]) -> f64 {
        let xi = &s[self.off..self.off + self.order];
        self.c.iter().zip(xi).map(|(c, x)| c * x).sum()
    }

    fn output(&self, s: &[f64], u: f64) -> f64 {
        self.state_output(s) + self.d * u
    }

    fn deriv_into(&self, s: &[f64], u: f64, out: &mut [f64]) {
        let xi = &s[self.off..self.off + self.order];
        for r in 0..self.order {
            let row = &self.a[r * self.order..(r + 1) * self.order];
            out[r] = row.iter().zip(xi).map(|(a, x)| a * x).sum::<f64>() + self.b[r] * u;
        }
    }
}

struct Compiled {
    variant: Variant,
    n: usize,
    beta: f64,
    theta: f64,
    trig: TriggerParams,
    tol: f64,
    adj: Vec<Vec<(usize, f64)>>,
    deg: Vec<f64>,
    blocks: Vec<CompiledBlock>,
    edge_head: Vec<usize>,
    edge_tail: Vec<usize>,
    edge_sqrt_w: Vec<f64>,
    refs: Vec<ReferenceSignal>,
    dim: usize,
    w_off: usize,
}

impl Compiled {
    fn new(sc: &Scenario) -> Self {
        let n = sc.graph.node_count;
        let adj = adjacency_lists(&sc.graph);
        let deg: Vec<f64> = adj.iter().map(|nb| nb.iter().map(|&(_, w)| w).sum()).collect();
        let is_dac = sc.variant == Variant::Dac;
        let w_off = n;
        let mut off = if is_dac { 2 * n } else { n };
        let raw_blocks: &[StateSpaceSystem] = match sc.variant {
            Variant::Nominal => &[],
            Variant::Additive | Variant::Dac => sc.agent_uncertainties.as_deref().unwrap(),
            Variant::Topology => sc.edge_uncertainties.as_deref().unwrap(),
        };
        let mut blocks = Vec::with_capacity(raw_blocks.len());
        for sys in raw_blocks {
            let blk = CompiledBlock::compile(sys, off);
            off += blk.order;
            blocks.push(blk);
        }
        let mut edge_head = Vec::new();
        let mut edge_tail = Vec::new();
        let mut edge_sqrt_w = Vec::new();
        if sc.variant == Variant::Topology {
            for &(i, j, w) in &sc.graph.edges {
                edge_head.push(i.min(j));
                edge_tail.push(i.max(j));
                edge_sqrt_w.push(w.sqrt());
            }
        }
        Compiled {
            variant: sc.variant,
            n,
            beta: sc.beta,
            theta: sc.theta.unwrap_or(0.0),
            trig: sc.trigger,
            tol: trigger_tolerance(&sc.trigger),
            adj,
            deg,
            blocks,
            edge_head,
            edge_tail,
            edge_sqrt_w,
            refs: sc.references.clone().unwrap_or_default(),
            dim: off,
            w_off,
        }
    }
}

struct Holders {
    /// ZOH values (estimate per agent) for the non-averaging variants.
    zoh: Vec<f64>,
    /// Exponential holder state per agent (averaging variant).
    exp_last: Vec<f64>,
    exp_start: Vec<f64>,
    exp_target: Vec<f64>,
    /// Cached local disagreement per agent; constant between events for the
    /// ZOH variants.
    dis: Vec<f64>,
    /// Cached -beta L (held estimates); constant between events likewise.
    u: Vec<f64>,
    /// Cached per-edge block inputs (topology variant).
    zeta: Vec<f64>,
}

impl Holders {
    fn new(comp: &Compiled) -> Self {
        let n = comp.n;
        Holders {
            zoh: vec![0.0; n],
            exp_last: vec![0.0; n],
            exp_start: vec![0.0; n],
            exp_target: vec![0.0; n],
            dis: vec![0.0; n],
            u: vec![0.0; n],
            zeta: vec![0.0; comp.edge_sqrt_w.len()],
        }
    }

    fn what_at(&self, comp: &Compiled, t: f64, i: usize) -> f64 {
        let decay = (-comp.theta * (t - self.exp_last[i])).exp();
        decay * self.exp_start[i] + (1.0 - decay) * self.exp_target[i]
    }

    /// Recomputes the between-events constants after any holder change.
    fn refresh(&mut self, comp: &Compiled) {
        if comp.variant == Variant::Dac {
            return;
        }
        for i in 0..comp.n {
            let mut dis = 0.0;
            let mut flow = 0.0;
            for &(j, w) in &comp.adj[i] {
                let diff = self.zoh[i] - self.zoh[j];
                dis += w * diff * diff;
                flow += w * diff;
            }
            self.dis[i] = dis;
            self.u[i] = -comp.beta * flow;
        }
        if comp.variant == Variant::Topology {
            for e in 0..comp.edge_sqrt_w.len() {
                self.zeta[e] =
                    comp.edge_sqrt_w[e] * (self.zoh[comp.edge_head[e]] - self.zoh[comp.edge_tail[e]]);
            }
        }
    }
}

struct Scratch {
    what: Vec<f64>,
    u: Vec<f64>,
}

struct Buffers {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    kend: Vec<f64>,
    stage: Vec<f64>,
    s0: Vec<f64>,
    s1: Vec<f64>,
    interp: Vec<f64>,
    f_end: Vec<f64>,
    scr: Scratch,
    t0: f64,
    h: f64,
}

impl Buffers {
    fn new(comp: &Compiled) -> Self {
        let z = || vec![0.0; comp.dim];
        Buffers {
            k1: z(),
            k2: z(),
            k3: z(),
            k4: z(),
            kend: z(),
            stage: z(),
            s0: z(),
            s1: z(),
            interp: z(),
            f_end: vec![0.0; comp.n],
            scr: Scratch { what: vec![0.0; comp.n], u: vec![0.0; comp.n] },
            t0: 0.0,
            h: 0.0,
        }
    }

    /// Cubic Hermite dense output of the last step, evaluated at tau.
    fn interp_at(&mut self, tau: f64) {
        let th = (tau - self.t0) / self.h;
        let th2 = th * th;
        let th3 = th2 * th;
        let h00 = 2.0 * th3 - 3.0 * th2 + 1.0;
        let h10 = th3 - 2.0 * th2 + th;
        let h01 = -2.0 * th3 + 3.0 * th2;
        let h11 = th3 - th2;
        for c in 0..self.interp.len() {
            self.interp[c] = h00 * self.s0[c]
                + h10 * self.h * self.k1[c]
                + h01 * self.s1[c]
                + h11 * self.h * self.kend[c];
        }
    }
}

fn deriv(comp: &Compiled, hold: &Holders, t: f64, s: &[f64], out: &mut [f64], scr: &mut Scratch) {
    match comp.variant {
        Variant::Nominal => {
            out[..comp.n].copy_from_slice(&hold.u);
        }
        Variant::Additive => {
            out[..comp.n].copy_from_slice(&hold.u);
            for (i, blk) in comp.blocks.iter().enumerate() {
                blk.deriv_into(s, hold.u[i], &mut out[blk.off..blk.off + blk.order]);
            }
        }
        Variant::Topology => {
            out[..comp.n].copy_from_slice(&hold.u);
            for (e, blk) in comp.blocks.iter().enumerate() {
                let v = blk.output(s, hold.zeta[e]);
                let push = comp.beta * comp.edge_sqrt_w[e] * v;
                out[comp.edge_head[e]] -= push;
                out[comp.edge_tail[e]] += push;
                blk.deriv_into(s, hold.zeta[e], &mut out[blk.off..blk.off + blk.order]);
            }
        }
        Variant::Dac => {
            for i in 0..comp.n {
                scr.what[i] = hold.what_at(comp, t, i);
            }
            for i in 0..comp.n {
                let mut flow = 0.0;
                for &(j, w) in &comp.adj[i] {
                    flow += w * (scr.what[i] - scr.what[j]);
                }
                scr.u[i] = -comp.beta * flow;
            }
            for i in 0..comp.n {
                let blk = &comp.blocks[i];
                let d_i = blk.output(s, scr.u[i]);
                let y_i = s[i] + d_i;
                out[i] = scr.u[i] + comp.refs[i].rate(t);
                out[comp.w_off + i] = -comp.theta * (s[comp.w_off + i] - y_i) + scr.u[i];
                blk.deriv_into(s, scr.u[i], &mut out[blk.off..blk.off + blk.order]);
            }
        }
    }
}

fn rk4_step(comp: &Compiled, hold: &Holders, t: f64, h: f64, buf: &mut Buffers) {
    let Buffers { k1, k2, k3, k4, stage, s0, s1, scr, .. } = buf;
    deriv(comp, hold, t, s0, k1, scr);
    for c in 0..s0.len() {
        stage[c] = s0[c] + 0.5 * h * k1[c];
    }
    deriv(comp, hold, t + 0.5 * h, stage, k2, scr);
    for c in 0..s0.len() {
        stage[c] = s0[c] + 0.5 * h * k2[c];
    }
    deriv(comp, hold, t + 0.5 * h, stage, k3, scr);
    for c in 0..s0.len() {
        stage[c] = s0[c] + h * k3[c];
    }
    deriv(comp, hold, t + h, stage, k4, scr);
    for c in 0..s0.len() {
        s1[c] = s0[c] + h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
    }
}

/// Trigger value of one agent at (t, s) under the current holders.
fn f_one(comp: &Compiled, hold: &Holders, t: f64, s: &[f64], i: usize) -> f64 {
    match comp.variant {
        Variant::Nominal | Variant::Topology => {
            let e = hold.zoh[i] - s[i];
            trigger_value(e, hold.dis[i], t, &comp.trig)
        }
        Variant::Additive => {
            let y = s[i] + comp.blocks[i].output(s, hold.u[i]);
            let e = hold.zoh[i] - y;
            trigger_value(e, hold.dis[i], t, &comp.trig)
        }
        Variant::Dac => {
            let wi = hold.what_at(comp, t, i);
            let mut dis = 0.0;
            for &(j, w) in &comp.adj[i] {
                let diff = wi - hold.what_at(comp, t, j);
                dis += w * diff * diff;
            }
            let e = wi - s[comp.w_off + i];
            trigger_value(e, dis, t, &comp.trig)
        }
    }
}

fn trigger_all(comp: &Compiled, hold: &Holders, t: f64, s: &[f64], fout: &mut [f64]) {
    for i in 0..comp.n {
        fout[i] = f_one(comp, hold, t, s, i);
    }
}

/// Bisects agent i's crossing inside the last step's dense output.
/// Returns the refined instant; if the trigger is already non-negative at
/// the interval start (a residual same-instant crossing), the event lands
/// immediately after it.
fn bisect_crossing(comp: &Compiled, hold: &Holders, buf: &mut Buffers, i: usize) -> f64 {
    let lo = buf.t0;
    let hi = buf.t0 + buf.h;
    let f_lo = {
        buf.interp_at(lo);
        f_one(comp, hold, lo, &buf.interp, i)
    };
    if f_lo >= 0.0 {
        return lo + buf.h * 1e-12;
    }
    let mut a = lo;
    let mut b = hi;
    for _ in 0..30 {
        let mid = 0.5 * (a + b);
        buf.interp_at(mid);
        let fm = f_one(comp, hold, mid, &buf.interp, i);
        if fm.abs() <= comp.tol {
            return mid;
        }
        if fm >= 0.0 {
            b = mid;
        } else {
            a = mid;
        }
    }
    b
}

enum InstantAbort {
    Storm { agent: usize },
    Singular,
}

/// Applies one cascade of holder updates at instant t. `first_round` pairs
/// agents with their logged trigger values; later rounds are agents whose
/// trigger became non-negative because of this instant's earlier updates.
/// An agent updates at most once per instant, keeping its event times
/// strictly increasing.
fn process_instant(
    comp: &Compiled,
    hold: &mut Holders,
    state: &mut [f64],
    t: f64,
    first_round: Vec<(usize, f64)>,
    counts: &mut [usize],
    cap: usize,
    trace: &mut SimulationTrace,
) -> Result<(), InstantAbort> {
    let mut updated = vec![false; comp.n];
    let mut round = first_round;
    while !round.is_empty() {
        for &(i, f) in &round {
            counts[i] += 1;
            trace.events.push(EventRecord { agent: i, time: t, f_value_at_trigger: f });
        }
        apply_round(comp, hold, state, t, &round, trace).map_err(|_| InstantAbort::Singular)?;
        hold.refresh(comp);
        for &(i, _) in &round {
            updated[i] = true;
            if counts[i] > cap {
                return Err(InstantAbort::Storm { agent: i });
            }
        }
        round = (0..comp.n)
            .filter(|&i| !updated[i])
            .filter_map(|i| {
                let f = f_one(comp, hold, t, state, i);
                (f >= 0.0).then_some((i, f))
            })
            .collect();
    }
    Ok(())
}

/// Loads the holders of one simultaneous trigger set. For the additive
/// variant the held outputs satisfy yhat_i = y_i, and y depends on every
/// updated holder through the feedthrough of u = -beta L yhat, so the set
/// is solved jointly as a linear system.
fn apply_round(
    comp: &Compiled,
    hold: &mut Holders,
    state: &[f64],
    t: f64,
    round: &[(usize, f64)],
    trace: &mut SimulationTrace,
) -> Result<(), ()> {
    match comp.variant {
        Variant::Nominal | Variant::Topology => {
            for &(i, _) in round {
                hold.zoh[i] = state[i];
                trace.holder_updates.push(HolderUpdate {
                    agent: i,
                    time: t,
                    held: HeldValue::Sample(state[i]),
                });
            }
        }
        Variant::Additive => {
            let k = round.len();
            let mut a = DMatrix::identity(k, k);
            let mut rhs = DVector::zeros(k);
            for (r, &(i, _)) in round.iter().enumerate() {
                let di = comp.blocks[i].d;
                a[(r, r)] += comp.beta * di * comp.deg[i];
                let mut outside = 0.0;
                for &(j, w) in &comp.adj[i] {
                    if let Some(c) = round.iter().position(|&(q, _)| q == j) {
                        a[(r, c)] -= comp.beta * di * w;
                    } else {
                        outside += w * hold.zoh[j];
                    }
                }
                rhs[r] = state[i] + comp.blocks[i].state_output(state) + comp.beta * di * outside;
            }
            let sol = a.lu().solve(&rhs).ok_or(())?;
            for (r, &(i, _)) in round.iter().enumerate() {
                hold.zoh[i] = sol[r];
                trace.holder_updates.push(HolderUpdate {
                    agent: i,
                    time: t,
                    held: HeldValue::Sample(sol[r]),
                });
            }
        }
        Variant::Dac => {
            // Targets never influence the holder output at the trigger
            // instant itself, so sequential processing in ascending agent
            // order is exact.
            for &(i, _) in round {
                hold.exp_last[i] = t;
                hold.exp_start[i] = state[comp.w_off + i];
                let wi = hold.what_at(comp, t, i);
                let mut flow = 0.0;
                for &(j, w) in &comp.adj[i] {
                    flow += w * (wi - hold.what_at(comp, t, j));
                }
                let u_i = -comp.beta * flow;
                let d_i = comp.blocks[i].output(state, u_i);
                let y_i = state[i] + d_i;
                hold.exp_target[i] = y_i;
                trace.holder_updates.push(HolderUpdate {
                    agent: i,
                    time: t,
                    held: HeldValue::Exponential { start: hold.exp_start[i], target: y_i },
                });
            }
        }
    }
    Ok(())
}

/// Solves (I + beta D_blk L) v = x0 for the feedthrough fixed point used by
/// the mandatory t0 update (held outputs and default averaging state).
fn feedthrough_fixed_point(comp: &Compiled, x0: &[f64]) -> Result<Vec<f64>, SimError> {
    let n = comp.n;
    let mut a = DMatrix::identity(n, n);
    for i in 0..n {
        let di = comp.blocks[i].d;
        a[(i, i)] += comp.beta * di * comp.deg[i];
        for &(j, w) in &comp.adj[i] {
            a[(i, j)] -= comp.beta * di * w;
        }
    }
    let rhs = DVector::from_column_slice(x0);
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or(SimError::SingularEventSolve { time: 0.0 })?;
    Ok(sol.iter().copied().collect())
}

fn record_sample(comp: &Compiled, hold: &Holders, state: &[f64], t: f64, trace: &mut SimulationTrace) {
    let n = comp.n;
    trace.times.push(t);
    trace.x.push(state[..n].to_vec());
    match comp.variant {
        Variant::Nominal | Variant::Topology => {
            trace.estimates.push(hold.zoh.clone());
            trace
                .sampling_error
                .push((0..n).map(|i| hold.zoh[i] - state[i]).collect());
        }
        Variant::Additive => {
            let d: Vec<f64> = (0..n).map(|i| comp.blocks[i].output(state, hold.u[i])).collect();
            let y: Vec<f64> = (0..n).map(|i| state[i] + d[i]).collect();
            trace.estimates.push(hold.zoh.clone());
            trace
                .sampling_error
                .push((0..n).map(|i| hold.zoh[i] - y[i]).collect());
            trace.d.as_mut().unwrap().push(d);
            trace.y.as_mut().unwrap().push(y);
        }
        Variant::Dac => {
            let what: Vec<f64> = (0..n).map(|i| hold.what_at(comp, t, i)).collect();
            let u: Vec<f64> = (0..n)
                .map(|i| {
                    let mut flow = 0.0;
                    for &(j, w) in &comp.adj[i] {
                        flow += w * (what[i] - what[j]);
                    }
                    -comp.beta * flow
                })
                .collect();
            let d: Vec<f64> = (0..n).map(|i| comp.blocks[i].output(state, u[i])).collect();
            let y: Vec<f64> = (0..n).map(|i| state[i] + d[i]).collect();
            trace
                .sampling_error
                .push((0..n).map(|i| what[i] - state[comp.w_off + i]).collect());
            trace.estimates.push(what);
            trace.d.as_mut().unwrap().push(d);
            trace.y.as_mut().unwrap().push(y);
            trace
                .w
                .as_mut()
                .unwrap()
                .push(state[comp.w_off..comp.w_off + n].to_vec());
        }
    }
}

fn state_ok(state: &[f64]) -> bool {
    state.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT)
}

/// Runs a scenario with the default per-agent event budget.
pub fn simulate(sc: &Scenario) -> Result<SimulationTrace, SimError> {
    simulate_with_event_cap(sc, DEFAULT_EVENT_CAP)
}

/// Runs a scenario with an explicit per-agent event budget (test hook for
/// exercising the event-storm guard cheaply).
pub fn simulate_with_event_cap(sc: &Scenario, cap: usize) -> Result<SimulationTrace, SimError> {
    sc.validate().map_err(SimError::InvalidScenario)?;
    let comp = Compiled::new(sc);
    let n = comp.n;

    let mut state = vec![0.0; comp.dim];
    state[..n].copy_from_slice(&sc.x0);

    let has_dy = matches!(comp.variant, Variant::Additive | Variant::Dac);
    let mut trace = SimulationTrace {
        variant: comp.variant,
        times: Vec::new(),
        x: Vec::new(),
        estimates: Vec::new(),
        sampling_error: Vec::new(),
        d: has_dy.then(Vec::new),
        y: has_dy.then(Vec::new),
        w: (comp.variant == Variant::Dac).then(Vec::new),
        events: Vec::new(),
        holder_updates: Vec::new(),
        theta: sc.theta,
    };

    let mut hold = Holders::new(&comp);
    let mut counts = vec![0usize; n];

    // Mandatory initial triggers: every holder loads at t0.
    match comp.variant {
        Variant::Nominal | Variant::Topology => {
            hold.zoh.copy_from_slice(&sc.x0);
            for i in 0..n {
                trace.holder_updates.push(HolderUpdate {
                    agent: i,
                    time: 0.0,
                    held: HeldValue::Sample(sc.x0[i]),
                });
            }
        }
        Variant::Additive => {
            let yhat = feedthrough_fixed_point(&comp, &sc.x0)?;
            hold.zoh.copy_from_slice(&yhat);
            for i in 0..n {
                trace.holder_updates.push(HolderUpdate {
                    agent: i,
                    time: 0.0,
                    held: HeldValue::Sample(yhat[i]),
                });
            }
        }
        Variant::Dac => {
            let w0 = match &sc.w0 {
                Some(w0) => w0.clone(),
                // Default: start the filter on its measured output, the
                // fixed point w = x0 + D_blk(-beta L w).
                None => feedthrough_fixed_point(&comp, &sc.x0)?,
            };
            state[comp.w_off..comp.w_off + n].copy_from_slice(&w0);
            hold.exp_last.fill(0.0);
            hold.exp_start.copy_from_slice(&w0);
            for i in 0..n {
                let mut flow = 0.0;
                for &(j, w) in &comp.adj[i] {
                    flow += w * (w0[i] - w0[j]);
                }
                let u_i = -comp.beta * flow;
                let y_i = sc.x0[i] + comp.blocks[i].d * u_i;
                hold.exp_target[i] = y_i;
                trace.holder_updates.push(HolderUpdate {
                    agent: i,
                    time: 0.0,
                    held: HeldValue::Exponential { start: w0[i], target: y_i },
                });
            }
        }
    }
    hold.refresh(&comp);
    for i in 0..n {
        counts[i] = 1;
        let f = f_one(&comp, &hold, 0.0, &state, i);
        trace.events.push(EventRecord { agent: i, time: 0.0, f_value_at_trigger: f });
    }

    record_sample(&comp, &hold, &state, 0.0, &mut trace);
    if !state_ok(&state) {
        return Err(SimError::NonFinite { time: 0.0, partial: Box::new(trace) });
    }

    let mut buf = Buffers::new(&comp);

    let ratio = sc.horizon / sc.step;
    let full = (ratio + 1e-9).floor() as usize;
    let rem = sc.horizon - full as f64 * sc.step;
    let partial = rem > 1e-9 * sc.step;
    let total = full + usize::from(partial);

    let mut t_cur = 0.0;
    for k in 0..total {
        let t_b = if k < full { (k + 1) as f64 * sc.step } else { sc.horizon };
        while t_b - t_cur > 1e-13 * t_b.max(1.0) {
            let h = t_b - t_cur;
            buf.s0.copy_from_slice(&state);
            rk4_step(&comp, &hold, t_cur, h, &mut buf);
            {
                let Buffers { s1, f_end, .. } = &mut buf;
                trigger_all(&comp, &hold, t_b, s1, f_end);
            }
            let flagged: Vec<usize> =
                (0..n).filter(|&i| buf.f_end[i] >= 0.0).collect();
            if flagged.is_empty() {
                state.copy_from_slice(&buf.s1);
                break;
            }
            {
                let Buffers { s1, kend, scr, .. } = &mut buf;
                deriv(&comp, &hold, t_b, s1, kend, scr);
            }
            buf.t0 = t_cur;
            buf.h = h;
            let mut t_star = f64::INFINITY;
            let mut argmin = usize::MAX;
            for &i in &flagged {
                let tau = bisect_crossing(&comp, &hold, &mut buf, i);
                if tau < t_star {
                    t_star = tau;
                    argmin = i;
                }
            }
            buf.interp_at(t_star);
            state.copy_from_slice(&buf.interp);
            // Everything flagged that is already at (or within tolerance of)
            // its crossing fires at the same instant, ascending agent index.
            let round: Vec<(usize, f64)> = flagged
                .iter()
                .filter_map(|&i| {
                    let f = f_one(&comp, &hold, t_star, &state, i);
                    (f >= -comp.tol || i == argmin).then_some((i, f))
                })
                .collect();
            match process_instant(&comp, &mut hold, &mut state, t_star, round, &mut counts, cap, &mut trace)
            {
                Ok(()) => {}
                Err(InstantAbort::Storm { agent }) => {
                    return Err(SimError::EventStorm {
                        agent,
                        cap,
                        time: t_star,
                        partial: Box::new(trace),
                    });
                }
                Err(InstantAbort::Singular) => {
                    return Err(SimError::SingularEventSolve { time: t_star });
                }
            }
            t_cur = t_star;
            if !state_ok(&state) {
                record_sample(&comp, &hold, &state, t_cur, &mut trace);
                return Err(SimError::NonFinite { time: t_cur, partial: Box::new(trace) });
            }
        }
        t_cur = t_b;
        record_sample(&comp, &hold, &state, t_b, &mut trace);
        if !state_ok(&state) {
            return Err(SimError::NonFinite { time: t_b, partial: Box::new(trace) });
        }
    }
    Ok(trace)
}

/// Integrates the nominal flow with perfect communication (estimates pinned
/// to the true states, no events). Test hook: with e = 0 the mean of x is
/// exactly conserved, which has no event-triggered counterpart.
pub fn simulate_ideal_communication(sc: &Scenario) -> Result<SimulationTrace, SimError> {
    sc.validate().map_err(SimError::InvalidScenario)?;
    if sc.variant != Variant::Nominal {
        return Err(SimError::InvalidScenario(
            "ideal-communication integration is defined for the nominal variant".to_string(),
        ));
    }
    let comp = Compiled::new(sc);
    let n = comp.n;
    let deriv_ideal = |x: &[f64], out: &mut [f64]| {
        for i in 0..n {
            let mut flow = 0.0;
            for &(j, w) in &comp.adj[i] {
                flow += w * (x[i] - x[j]);
            }
            out[i] = -comp.beta * flow;
        }
    };
    let mut trace = SimulationTrace {
        variant: Variant::Nominal,
        times: Vec::new(),
        x: Vec::new(),
        estimates: Vec::new(),
        sampling_error: Vec::new(),
        d: None,
        y: None,
        w: None,
        events: Vec::new(),
        holder_updates: Vec::new(),
        theta: None,
    };
    let mut x = sc.x0.clone();
    let push = |trace: &mut SimulationTrace, t: f64, x: &[f64]| {
        trace.times.push(t);
        trace.x.push(x.to_vec());
        trace.estimates.push(x.to_vec());
        trace.sampling_error.push(vec![0.0; x.len()]);
    };
    push(&mut trace, 0.0, &x);
    let ratio = sc.horizon / sc.step;
    let full = (ratio + 1e-9).floor() as usize;
    let rem = sc.horizon - full as f64 * sc.step;
    let partial = rem > 1e-9 * sc.step;
    let total = full + usize::from(partial);
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut t = 0.0;
    for k in 0..total {
        let t_b = if k < full { (k + 1) as f64 * sc.step } else { sc.horizon };
        let h = t_b - t;
        deriv_ideal(&x, &mut k1);
        for c in 0..n {
            stage[c] = x[c] + 0.5 * h * k1[c];
        }
        deriv_ideal(&stage, &mut k2);
        for c in 0..n {
            stage[c] = x[c] + 0.5 * h * k2[c];
        }
        deriv_ideal(&stage, &mut k3);
        for c in 0..n {
            stage[c] = x[c] + h * k3[c];
        }
        deriv_ideal(&stage, &mut k4);
        for c in 0..n {
            x[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        t = t_b;
        push(&mut trace, t, &x);
        if !state_ok(&x) {
            return Err(SimError::NonFinite { time: t, partial: Box::new(trace) });
        }
    }
    Ok(trace)
}
