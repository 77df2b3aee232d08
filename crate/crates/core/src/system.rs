//! Delayed interconnected systems: topology, agent descriptions, delay
//! buffers, one global simulation step, closed-loop rollouts and disturbance
//! signals.
//!
//! Global ordering everywhere: agents ascending by index, coordinates in the
//! order the agent declares them.

use std::fmt;
use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Incoming edge of agent `i`: agent `i` reads the state of `from` delayed by
/// `delay` steps. `bound` is the declared delay bound of the edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub delay: usize,
    pub bound: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterconnectionGraph {
    agent_count: usize,
    /// Per agent, incoming edges sorted by source index.
    incoming: Vec<Vec<Edge>>,
    tau_max: usize,
}

impl InterconnectionGraph {
    /// `edges` are `(to, Edge)` pairs.
    pub fn new(agent_count: usize, edges: &[(usize, Edge)]) -> Result<Self> {
        if agent_count == 0 {
            return Err(Error::Config("a system needs at least one agent".into()));
        }
        let mut incoming = vec![Vec::new(); agent_count];
        for &(to, e) in edges {
            if to >= agent_count || e.from >= agent_count {
                return Err(Error::Config(format!(
                    "edge {} -> {to} references an agent outside 0..{agent_count}",
                    e.from
                )));
            }
            if to == e.from {
                return Err(Error::Config(format!("self-loop on agent {to}")));
            }
            if e.bound == 0 || e.delay == 0 || e.delay > e.bound {
                return Err(Error::Config(format!(
                    "edge {} -> {to}: delay {} must lie in 1..={} and the bound must be positive",
                    e.from, e.delay, e.bound
                )));
            }
            if incoming[to].iter().any(|x: &Edge| x.from == e.from) {
                return Err(Error::Config(format!("duplicate edge {} -> {to}", e.from)));
            }
            incoming[to].push(e);
        }
        for list in &mut incoming {
            list.sort_by_key(|e| e.from);
        }
        let tau_max = edges.iter().map(|(_, e)| e.bound).max().unwrap_or(0);
        Ok(Self {
            agent_count,
            incoming,
            tau_max,
        })
    }

    /// Agent `i` reads agent `i - 1` (a predecessor chain, as in a platoon).
    pub fn chain(n: usize, delay: usize, bound: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n)
            .map(|i| (i, Edge { from: i - 1, delay, bound }))
            .collect();
        Self::new(n, &edges)
    }

    /// Path where every agent reads both path neighbours.
    pub fn bichain(n: usize, delay: usize, bound: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 1..n {
            edges.push((i, Edge { from: i - 1, delay, bound }));
            edges.push((i - 1, Edge { from: i, delay, bound }));
        }
        Self::new(n, &edges)
    }

    /// Cycle where every agent reads both cycle neighbours.
    pub fn ring(n: usize, delay: usize, bound: usize) -> Result<Self> {
        if n < 3 {
            return Self::bichain(n, delay, bound);
        }
        let mut edges = Vec::new();
        for i in 0..n {
            edges.push((i, Edge { from: (i + n - 1) % n, delay, bound }));
            edges.push((i, Edge { from: (i + 1) % n, delay, bound }));
        }
        Self::new(n, &edges)
    }

    /// Hub 0 reads every leaf; every leaf reads the hub.
    pub fn star(leaves: usize, delay: usize, bound: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for l in 1..=leaves {
            edges.push((0, Edge { from: l, delay, bound }));
            edges.push((l, Edge { from: 0, delay, bound }));
        }
        Self::new(leaves + 1, &edges)
    }

    pub fn agent_count(&self) -> usize {
        self.agent_count
    }

    pub fn tau_max(&self) -> usize {
        self.tau_max
    }

    pub fn neighbors(&self, i: usize) -> &[Edge] {
        &self.incoming[i]
    }

    pub fn neighbor_ids(&self, i: usize) -> Vec<usize> {
        self.incoming[i].iter().map(|e| e.from).collect()
    }

    /// Agents reading agent `j`, with the delay of each such edge.
    pub fn dependents(&self, j: usize) -> Vec<(usize, usize)> {
        (0..self.agent_count)
            .filter_map(|i| {
                self.incoming[i]
                    .iter()
                    .find(|e| e.from == j)
                    .map(|e| (i, e.delay))
            })
            .collect()
    }

    /// `G[i][j] = 1` iff agent `i` reads agent `j`.
    pub fn adjacency(&self) -> Vec<Vec<u8>> {
        let mut g = vec![vec![0u8; self.agent_count]; self.agent_count];
        for (i, list) in self.incoming.iter().enumerate() {
            for e in list {
                g[i][e.from] = 1;
            }
        }
        g
    }

    pub fn edge(&self, i: usize, j: usize) -> Option<&Edge> {
        self.incoming[i].iter().find(|e| e.from == j)
    }

    /// `[i]` followed by the neighbours of `i` ascending.
    pub fn closed_neighborhood(&self, i: usize) -> Vec<usize> {
        let mut v = vec![i];
        v.extend(self.incoming[i].iter().map(|e| e.from));
        v
    }
}

/// Local step map `f_i(x, u, delayed neighbour states, d)`. Neighbour states
/// arrive in ascending neighbour order, each at its edge delay.
pub trait AgentDynamics: Send + Sync + fmt::Debug {
    fn step(&self, x: &[f64], u: &[f64], neighbors: &[&[f64]], d: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub state_dim: usize,
    pub input_dim: usize,
    /// Per-coordinate closed disturbance intervals.
    pub disturbance_box: Vec<(f64, f64)>,
    pub label: String,
    pub lipschitz_f: f64,
    pub equilibrium: Vec<f64>,
    pub dynamics: Arc<dyn AgentDynamics>,
}

impl AgentSpec {
    pub fn disturbance_dim(&self) -> usize {
        self.disturbance_box.len()
    }

    /// Largest Euclidean norm over the disturbance box.
    pub fn disturbance_bound(&self) -> f64 {
        self.disturbance_box
            .iter()
            .map(|(lo, hi)| lo.abs().max(hi.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn clip_disturbance(&self, d: &[f64]) -> (Vec<f64>, bool) {
        let mut clipped = false;
        let out = d
            .iter()
            .zip(&self.disturbance_box)
            .map(|(v, (lo, hi))| {
                let c = v.clamp(*lo, *hi);
                clipped |= c != *v;
                c
            })
            .collect();
        (out, clipped)
    }
}

#[derive(Debug, Clone)]
pub struct InterconnectedSystem {
    pub graph: InterconnectionGraph,
    pub agents: Vec<AgentSpec>,
}

impl InterconnectedSystem {
    pub fn new(graph: InterconnectionGraph, agents: Vec<AgentSpec>) -> Result<Self> {
        if agents.len() != graph.agent_count() {
            return Err(Error::Config(format!(
                "{} agent specs for a graph of {} agents",
                agents.len(),
                graph.agent_count()
            )));
        }
        for (i, a) in agents.iter().enumerate() {
            if a.state_dim == 0 {
                return Err(Error::Config(format!("agent {i} has an empty state")));
            }
            if a.equilibrium.len() != a.state_dim {
                return Err(Error::Dimension {
                    agent: i,
                    field: "equilibrium",
                    expected: a.state_dim,
                    got: a.equilibrium.len(),
                });
            }
            if !(a.lipschitz_f >= 0.0) {
                return Err(Error::Config(format!("agent {i} has a negative Lipschitz constant")));
            }
            if a
                .disturbance_box
                .iter()
                .any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi))
            {
                return Err(Error::Config(format!("agent {i} has an unbounded or empty disturbance box")));
            }
        }
        Ok(Self { graph, agents })
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn tau_max(&self) -> usize {
        self.graph.tau_max()
    }

    pub fn global_dim(&self) -> usize {
        self.agents.iter().map(|a| a.state_dim).sum()
    }

    /// Offset of each agent's block inside one global state vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.agents
            .iter()
            .map(|a| {
                let o = acc;
                acc += a.state_dim;
                o
            })
            .collect()
    }

    pub fn equilibrium(&self) -> Vec<Vec<f64>> {
        self.agents.iter().map(|a| a.equilibrium.clone()).collect()
    }

    /// Largest disturbance norm over all agents.
    pub fn disturbance_bound(&self) -> f64 {
        self.agents
            .iter()
            .map(AgentSpec::disturbance_bound)
            .fold(0.0, f64::max)
    }

    pub fn zero_disturbance(&self) -> Vec<Vec<f64>> {
        self.agents.iter().map(|a| vec![0.0; a.disturbance_dim()]).collect()
    }
}

/// Per agent, the states at lags `0..=tau_max` (lag 0 is current).
#[derive(Debug, Clone, PartialEq)]
pub struct DelayHistory {
    lags: Vec<Vec<Vec<f64>>>,
}

impl DelayHistory {
    /// `lags[i][s]` is agent `i` at lag `s`. Every agent must carry the same
    /// depth.
    pub fn from_lags(system: &InterconnectedSystem, lags: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let depth = system.tau_max() + 1;
        if lags.len() != system.agent_count() {
            return Err(Error::Dimension {
                agent: 0,
                field: "history agent count",
                expected: system.agent_count(),
                got: lags.len(),
            });
        }
        for (i, (h, a)) in lags.iter().zip(&system.agents).enumerate() {
            if h.len() != depth {
                return Err(Error::Dimension {
                    agent: i,
                    field: "history depth",
                    expected: depth,
                    got: h.len(),
                });
            }
            if let Some(bad) = h.iter().find(|x| x.len() != a.state_dim) {
                return Err(Error::Dimension {
                    agent: i,
                    field: "history state",
                    expected: a.state_dim,
                    got: bad.len(),
                });
            }
        }
        Ok(Self { lags })
    }

    pub fn state(&self, agent: usize, lag: usize) -> &[f64] {
        &self.lags[agent][lag]
    }

    pub fn agent(&self, agent: usize) -> &[Vec<f64>] {
        &self.lags[agent]
    }

    pub fn depth(&self) -> usize {
        self.lags.first().map(Vec::len).unwrap_or(0)
    }

    pub fn current(&self) -> Vec<Vec<f64>> {
        self.lags.iter().map(|h| h[0].clone()).collect()
    }

    /// Stacked delay-history vector, lag-major: all agents at lag 0, then all
    /// agents at lag 1, and so on.
    pub fn stacked(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in 0..self.depth() {
            for h in &self.lags {
                out.extend_from_slice(&h[s]);
            }
        }
        out
    }

    pub fn from_stacked(system: &InterconnectedSystem, flat: &[f64]) -> Result<Self> {
        let depth = system.tau_max() + 1;
        let gd = system.global_dim();
        if flat.len() != depth * gd {
            return Err(Error::Dimension {
                agent: 0,
                field: "stacked history",
                expected: depth * gd,
                got: flat.len(),
            });
        }
        let offsets = system.offsets();
        let lags = system
            .agents
            .iter()
            .zip(&offsets)
            .map(|(a, o)| {
                (0..depth)
                    .map(|s| flat[s * gd + o..s * gd + o + a.state_dim].to_vec())
                    .collect()
            })
            .collect();
        Ok(Self { lags })
    }
}

/// Canonical local coordinates of agent `i`: the closed neighbourhood
/// (self first, neighbours ascending), each at lags `0..=tau_max`, then the
/// disturbance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalLayout {
    pub agent: usize,
    /// Agent id of each slot.
    pub slots: Vec<usize>,
    pub dims: Vec<usize>,
    /// Delay at which the dynamics read each slot (0 for self).
    pub delays: Vec<usize>,
    pub depth: usize,
    offsets: Vec<usize>,
    pub disturbance_dim: usize,
}

impl LocalLayout {
    pub fn new(system: &InterconnectedSystem, i: usize) -> Self {
        let depth = system.tau_max() + 1;
        let mut slots = vec![i];
        let mut delays = vec![0];
        for e in system.graph.neighbors(i) {
            slots.push(e.from);
            delays.push(e.delay);
        }
        let dims: Vec<usize> = slots.iter().map(|j| system.agents[*j].state_dim).collect();
        let mut offsets = Vec::with_capacity(slots.len());
        let mut acc = 0;
        for d in &dims {
            offsets.push(acc);
            acc += d * depth;
        }
        Self {
            agent: i,
            slots,
            dims,
            delays,
            depth,
            offsets,
            disturbance_dim: system.agents[i].disturbance_dim(),
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Length of the history part (everything but the disturbance).
    pub fn history_len(&self) -> usize {
        self.dims.iter().sum::<usize>() * self.depth
    }

    /// Full local dimension including the disturbance.
    pub fn dim(&self) -> usize {
        self.history_len() + self.disturbance_dim
    }

    pub fn block(&self, slot: usize, lag: usize) -> std::ops::Range<usize> {
        let start = self.offsets[slot] + lag * self.dims[slot];
        start..start + self.dims[slot]
    }

    pub fn disturbance_range(&self) -> std::ops::Range<usize> {
        self.history_len()..self.dim()
    }

    /// Local history vector of this agent read from a global history.
    pub fn extract(&self, history: &DelayHistory) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.history_len());
        for &j in &self.slots {
            for s in 0..self.depth {
                out.extend_from_slice(history.state(j, s));
            }
        }
        out
    }

    /// Own lag-0 state and the neighbour states the dynamics read.
    pub fn dynamics_inputs<'a>(&self, z: &'a [f64]) -> (&'a [f64], Vec<&'a [f64]>) {
        let own = &z[self.block(0, 0)];
        let nbrs = (1..self.slot_count())
            .map(|s| &z[self.block(s, self.delays[s])])
            .collect();
        (own, nbrs)
    }
}

/// Lag 0 holds `initial_state`; every older lag holds the equilibrium.
pub fn pad_history(system: &InterconnectedSystem, initial_state: &[Vec<f64>]) -> Result<DelayHistory> {
    if initial_state.len() != system.agent_count() {
        return Err(Error::Dimension {
            agent: 0,
            field: "initial state agent count",
            expected: system.agent_count(),
            got: initial_state.len(),
        });
    }
    let depth = system.tau_max() + 1;
    let mut lags = Vec::with_capacity(system.agent_count());
    for (i, (x0, a)) in initial_state.iter().zip(&system.agents).enumerate() {
        if x0.len() != a.state_dim {
            return Err(Error::Dimension {
                agent: i,
                field: "initial state",
                expected: a.state_dim,
                got: x0.len(),
            });
        }
        let mut h = Vec::with_capacity(depth);
        h.push(x0.clone());
        for _ in 1..depth {
            h.push(a.equilibrium.clone());
        }
        lags.push(h);
    }
    Ok(DelayHistory { lags })
}

/// Delayed neighbour states of agent `i`, in ascending neighbour order.
pub fn delayed_neighbors<'a>(
    system: &InterconnectedSystem,
    history: &'a DelayHistory,
    i: usize,
) -> Result<Vec<&'a [f64]>> {
    system
        .graph
        .neighbors(i)
        .iter()
        .map(|e| {
            if e.delay >= history.depth() {
                Err(Error::Config(format!(
                    "edge {} -> {i} has delay {} beyond the history depth {}",
                    e.from,
                    e.delay,
                    history.depth() - 1
                )))
            } else {
                Ok(history.state(e.from, e.delay))
            }
        })
        .collect()
}

/// One synchronous step of every agent. Returns the shifted history.
pub fn step_system(
    system: &InterconnectedSystem,
    history: &DelayHistory,
    controls: &[Vec<f64>],
    disturbance: &[Vec<f64>],
) -> Result<DelayHistory> {
    let n = system.agent_count();
    if history.lags.len() != n || history.depth() != system.tau_max() + 1 {
        return Err(Error::Dimension {
            agent: 0,
            field: "history",
            expected: system.tau_max() + 1,
            got: history.depth(),
        });
    }
    if controls.len() != n {
        return Err(Error::Dimension {
            agent: 0,
            field: "controls agent count",
            expected: n,
            got: controls.len(),
        });
    }
    if disturbance.len() != n {
        return Err(Error::Dimension {
            agent: 0,
            field: "disturbance agent count",
            expected: n,
            got: disturbance.len(),
        });
    }
    let mut lags = Vec::with_capacity(n);
    for (i, a) in system.agents.iter().enumerate() {
        if controls[i].len() != a.input_dim {
            return Err(Error::Dimension {
                agent: i,
                field: "control",
                expected: a.input_dim,
                got: controls[i].len(),
            });
        }
        if disturbance[i].len() != a.disturbance_dim() {
            return Err(Error::Dimension {
                agent: i,
                field: "disturbance",
                expected: a.disturbance_dim(),
                got: disturbance[i].len(),
            });
        }
        let nbrs = delayed_neighbors(system, history, i)?;
        let next = a
            .dynamics
            .step(history.state(i, 0), &controls[i], &nbrs, &disturbance[i]);
        if next.len() != a.state_dim {
            return Err(Error::Dimension {
                agent: i,
                field: "next state",
                expected: a.state_dim,
                got: next.len(),
            });
        }
        let mut h = Vec::with_capacity(history.depth());
        h.push(next);
        h.extend(history.lags[i][..history.depth() - 1].iter().cloned());
        lags.push(h);
    }
    Ok(DelayHistory { lags })
}

/// Feedback law `u_i = pi_i(x_i, delayed neighbour states)`.
pub trait Controller: Sync {
    fn control(&self, agent: usize, own: &[f64], neighbors: &[&[f64]]) -> Vec<f64>;
}

impl<F> Controller for F
where
    F: Fn(usize, &[f64], &[&[f64]]) -> Vec<f64> + Sync,
{
    fn control(&self, agent: usize, own: &[f64], neighbors: &[&[f64]]) -> Vec<f64> {
        self(agent, own, neighbors)
    }
}

/// Applies the zero input to every agent.
pub struct ZeroController<'a>(pub &'a InterconnectedSystem);

impl Controller for ZeroController<'_> {
    fn control(&self, agent: usize, _own: &[f64], _neighbors: &[&[f64]]) -> Vec<f64> {
        vec![0.0; self.0.agents[agent].input_dim]
    }
}

pub fn controls_for(
    system: &InterconnectedSystem,
    controller: &dyn Controller,
    history: &DelayHistory,
) -> Result<Vec<Vec<f64>>> {
    (0..system.agent_count())
        .map(|i| {
            let nbrs = delayed_neighbors(system, history, i)?;
            let u = controller.control(i, history.state(i, 0), &nbrs);
            if u.len() != system.agents[i].input_dim {
                return Err(Error::Dimension {
                    agent: i,
                    field: "controller output",
                    expected: system.agents[i].input_dim,
                    got: u.len(),
                });
            }
            Ok(u)
        })
        .collect()
}

/// One closed-loop step.
pub fn closed_loop_step(
    system: &InterconnectedSystem,
    controller: &dyn Controller,
    history: &DelayHistory,
    disturbance: &[Vec<f64>],
) -> Result<(DelayHistory, Vec<Vec<f64>>)> {
    let u = controls_for(system, controller, history)?;
    let next = step_system(system, history, &u, disturbance)?;
    Ok((next, u))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `states[k][i]` for `k = 0..=T`.
    pub states: Vec<Vec<Vec<f64>>>,
    /// `controls[k][i]` applied between step `k` and `k + 1`.
    pub controls: Vec<Vec<Vec<f64>>>,
    pub disturbances: Vec<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "agent", "coord", "value", "control_flag"])?;
        for (k, xs) in self.states.iter().enumerate() {
            for (i, x) in xs.iter().enumerate() {
                for (c, v) in x.iter().enumerate() {
                    w.write_record([k.to_string(), i.to_string(), c.to_string(), fmt_f64(*v), "0".into()])?;
                }
            }
            if let Some(us) = self.controls.get(k) {
                for (i, u) in us.iter().enumerate() {
                    for (c, v) in u.iter().enumerate() {
                        w.write_record([k.to_string(), i.to_string(), c.to_string(), fmt_f64(*v), "1".into()])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest round-trip decimal representation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Closed-loop rollout of `horizon` steps from `history0`.
pub fn rollout(
    system: &InterconnectedSystem,
    controller: &dyn Controller,
    history0: &DelayHistory,
    disturbance: &DisturbanceSignal,
    horizon: usize,
) -> Result<Trajectory> {
    let mut history = history0.clone();
    let mut states = vec![history.current()];
    let mut controls = Vec::with_capacity(horizon);
    let mut disturbances = Vec::with_capacity(horizon);
    let mut sampler = disturbance.sampler(system);
    for k in 0..horizon {
        let d = sampler.sample(k);
        let (next, u) = closed_loop_step(system, controller, &history, &d)?;
        history = next;
        states.push(history.current());
        controls.push(u);
        disturbances.push(d);
    }
    Ok(Trajectory {
        states,
        controls,
        disturbances,
    })
}

/// Which agents a disturbance signal acts on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Targets {
    #[default]
    All,
    Agents(Vec<usize>),
}

impl Targets {
    pub fn contains(&self, i: usize) -> bool {
        match self {
            Targets::All => true,
            Targets::Agents(v) => v.contains(&i),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DisturbanceSignal {
    Zero,
    /// `amplitude * sin(2 pi freq_hz k dt)` on every disturbance coordinate.
    Sinusoidal {
        freq_hz: f64,
        amplitude: f64,
        dt: f64,
        #[serde(default)]
        targets: Targets,
    },
    /// `magnitude` on every disturbance coordinate at step 0 only.
    InitialImpulse {
        magnitude: f64,
        #[serde(default)]
        targets: Targets,
    },
    /// `values[k][i]`; steps past the end are zero.
    Custom { values: Vec<Vec<Vec<f64>>> },
    /// Independent uniform samples from each agent's box.
    Uniform { seed: u64 },
}

impl DisturbanceSignal {
    pub fn sampler<'a>(&'a self, system: &'a InterconnectedSystem) -> DisturbanceSampler<'a> {
        DisturbanceSampler {
            signal: self,
            system,
            rng: match self {
                DisturbanceSignal::Uniform { seed } => Some(rng::stream(*seed, "disturbance", 0)),
                _ => None,
            },
        }
    }
}

pub struct DisturbanceSampler<'a> {
    signal: &'a DisturbanceSignal,
    system: &'a InterconnectedSystem,
    rng: Option<rand_chacha::ChaCha8Rng>,
}

static CLIP_WARNED: AtomicBool = AtomicBool::new(false);

impl DisturbanceSampler<'_> {
    /// Samples every agent at step `k`, clipped into its box.
    pub fn sample(&mut self, k: usize) -> Vec<Vec<f64>> {
        let mut clipped_any = false;
        let out = self
            .system
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let nd = a.disturbance_dim();
                let raw: Vec<f64> = match self.signal {
                    DisturbanceSignal::Zero => vec![0.0; nd],
                    DisturbanceSignal::Sinusoidal {
                        freq_hz,
                        amplitude,
                        dt,
                        targets,
                    } => {
                        let v = if targets.contains(i) {
                            amplitude * (2.0 * std::f64::consts::PI * freq_hz * k as f64 * dt).sin()
                        } else {
                            0.0
                        };
                        vec![v; nd]
                    }
                    DisturbanceSignal::InitialImpulse { magnitude, targets } => {
                        let v = if k == 0 && targets.contains(i) { *magnitude } else { 0.0 };
                        vec![v; nd]
                    }
                    DisturbanceSignal::Custom { values } => values
                        .get(k)
                        .and_then(|row| row.get(i))
                        .cloned()
                        .unwrap_or_else(|| vec![0.0; nd]),
                    DisturbanceSignal::Uniform { .. } => {
                        let r = self.rng.as_mut().expect("uniform sampler has a stream");
                        a.disturbance_box
                            .iter()
                            .map(|(lo, hi)| if lo < hi { r.gen_range(*lo..=*hi) } else { *lo })
                            .collect()
                    }
                };
                let mut raw = raw;
                raw.resize(nd, 0.0);
                let (d, clipped) = a.clip_disturbance(&raw);
                clipped_any |= clipped;
                d
            })
            .collect();
        if clipped_any && !CLIP_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("disturbance samples outside the declared boxes were clipped");
        }
        out
    }
}
