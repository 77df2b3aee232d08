//! Benchmark environments (vehicle platoon, drone formation, inverter
//! microgrid, scalar/linear toy systems) and their nominal linear feedback
//! laws.
//!
//! Every constructor returns the interconnected system together with a
//! nominal controller expressed on tracking errors `x - x*`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::spectral_norm_upper;
use crate::system::{AgentDynamics, AgentSpec, Controller, Edge, InterconnectedSystem, InterconnectionGraph};

/// Spectral-norm bound of an entrywise absolute Jacobian bound. For any two
/// points, `|f(z) - f(z')| <= J |z - z'|` componentwise, so this norm is a
/// Lipschitz constant for `f`.
pub fn jacobian_bound_norm(rows: &[Vec<f64>]) -> f64 {
    let r = rows.len();
    let c = rows.first().map(Vec::len).unwrap_or(0);
    let flat: Vec<f64> = rows.iter().flat_map(|row| row.iter().map(|v| v.abs())).collect();
    spectral_norm_upper(r, c, &flat)
}

/// Linear feedback on tracking errors:
/// `u = K_self (x_i - x_i*) + sum_j K_j (x_j - x_j*)`, neighbour slots in
/// ascending neighbour order. Gains are row-major `p x n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFeedback {
    pub input_dim: usize,
    pub self_gain: Vec<f64>,
    pub neighbor_gains: Vec<Vec<f64>>,
}

impl LinearFeedback {
    pub fn zero(input_dim: usize, state_dim: usize, neighbor_dims: &[usize]) -> Self {
        Self {
            input_dim,
            self_gain: vec![0.0; input_dim * state_dim],
            neighbor_gains: neighbor_dims.iter().map(|n| vec![0.0; input_dim * n]).collect(),
        }
    }

    /// Evaluates the law on error coordinates.
    pub fn apply(&self, own_err: &[f64], neighbor_errs: &[&[f64]]) -> Vec<f64> {
        let p = self.input_dim;
        let mut u = vec![0.0; p];
        let mut acc = |gain: &[f64], e: &[f64]| {
            let n = e.len();
            for (r, ur) in u.iter_mut().enumerate() {
                *ur += gain[r * n..(r + 1) * n].iter().zip(e).map(|(g, x)| g * x).sum::<f64>();
            }
        };
        acc(&self.self_gain, own_err);
        for (g, e) in self.neighbor_gains.iter().zip(neighbor_errs) {
            acc(g, e);
        }
        u
    }

    /// Operator norm bound of the map (errors) -> u.
    pub fn lipschitz(&self, state_dim: usize, neighbor_dims: &[usize]) -> f64 {
        let p = self.input_dim;
        let cols = state_dim + neighbor_dims.iter().sum::<usize>();
        let mut m = vec![0.0; p * cols];
        for r in 0..p {
            let mut at = 0;
            for (c, g) in self.self_gain[r * state_dim..(r + 1) * state_dim].iter().enumerate() {
                m[r * cols + c] = *g;
            }
            at += state_dim;
            for (g, n) in self.neighbor_gains.iter().zip(neighbor_dims) {
                for c in 0..*n {
                    m[r * cols + at + c] = g[r * n + c];
                }
                at += n;
            }
        }
        spectral_norm_upper(p, cols, &m)
    }
}

/// Per-agent nominal laws bound to a system's equilibria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalPolicy {
    pub laws: Vec<LinearFeedback>,
    pub equilibria: Vec<Vec<f64>>,
    /// Equilibrium of each neighbour slot, per agent.
    pub neighbor_equilibria: Vec<Vec<Vec<f64>>>,
}

impl NominalPolicy {
    pub fn new(system: &InterconnectedSystem, laws: Vec<LinearFeedback>) -> Result<Self> {
        if laws.len() != system.agent_count() {
            return Err(Error::Config(format!(
                "{} nominal laws for {} agents",
                laws.len(),
                system.agent_count()
            )));
        }
        for (i, (l, a)) in laws.iter().zip(&system.agents).enumerate() {
            let nbrs = system.graph.neighbors(i);
            if l.input_dim != a.input_dim
                || l.self_gain.len() != a.input_dim * a.state_dim
                || l.neighbor_gains.len() != nbrs.len()
                || l.neighbor_gains
                    .iter()
                    .zip(nbrs)
                    .any(|(g, e)| g.len() != a.input_dim * system.agents[e.from].state_dim)
            {
                return Err(Error::Config(format!("nominal gains of agent {i} have the wrong shape")));
            }
        }
        let equilibria = system.equilibrium();
        let neighbor_equilibria = (0..system.agent_count())
            .map(|i| {
                system
                    .graph
                    .neighbors(i)
                    .iter()
                    .map(|e| equilibria[e.from].clone())
                    .collect()
            })
            .collect();
        Ok(Self {
            laws,
            equilibria,
            neighbor_equilibria,
        })
    }

    /// Nominal input of agent `i` from absolute states.
    pub fn control_abs(&self, i: usize, own: &[f64], neighbors: &[&[f64]]) -> Vec<f64> {
        let e: Vec<f64> = own.iter().zip(&self.equilibria[i]).map(|(x, s)| x - s).collect();
        let ne: Vec<Vec<f64>> = neighbors
            .iter()
            .zip(&self.neighbor_equilibria[i])
            .map(|(x, s)| x.iter().zip(s).map(|(a, b)| a - b).collect())
            .collect();
        let refs: Vec<&[f64]> = ne.iter().map(Vec::as_slice).collect();
        self.laws[i].apply(&e, &refs)
    }
}

impl Controller for NominalPolicy {
    fn control(&self, agent: usize, own: &[f64], neighbors: &[&[f64]]) -> Vec<f64> {
        self.control_abs(agent, own, neighbors)
    }
}

// ---------------------------------------------------------------------------
// Linear toy systems

/// `x' = A x + sum_j C x_j + B u + d` with `d` entering every coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAgent {
    pub n: usize,
    pub p: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl LinearAgent {
    pub fn scalar(a: f64, c: f64, b: f64) -> Self {
        Self {
            n: 1,
            p: 1,
            a: vec![a],
            b: vec![b],
            c: vec![c],
        }
    }

    /// Lipschitz bound of the step map with `neighbors` neighbour slots.
    pub fn lipschitz(&self, neighbors: usize) -> f64 {
        let (n, p) = (self.n, self.p);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let mut row = self.a[r * n..(r + 1) * n].to_vec();
                row.extend_from_slice(&self.b[r * p..(r + 1) * p]);
                for _ in 0..neighbors {
                    row.extend_from_slice(&self.c[r * n..(r + 1) * n]);
                }
                row.extend((0..n).map(|c| if c == r { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        // Linear maps: the signed matrix norm is exact, no need for |J|.
        let flat: Vec<f64> = rows.concat();
        spectral_norm_upper(n, rows[0].len(), &flat)
    }
}

impl AgentDynamics for LinearAgent {
    fn step(&self, x: &[f64], u: &[f64], neighbors: &[&[f64]], d: &[f64]) -> Vec<f64> {
        let (n, p) = (self.n, self.p);
        (0..n)
            .map(|r| {
                let mut v = self.a[r * n..(r + 1) * n].iter().zip(x).map(|(a, x)| a * x).sum::<f64>();
                v += self.b[r * p..(r + 1) * p].iter().zip(u).map(|(b, u)| b * u).sum::<f64>();
                for nb in neighbors {
                    v += self.c[r * n..(r + 1) * n].iter().zip(*nb).map(|(c, x)| c * x).sum::<f64>();
                }
                v + d.get(r).copied().unwrap_or(0.0)
            })
            .collect()
    }
}

/// Scalar toy agents on `graph`: `x' = a x + c sum x_j + b u + d`,
/// `d in [-w, w]`, equilibrium 0, nominal `u = -k x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyParams {
    pub a: f64,
    pub c: f64,
    pub b: f64,
    pub k: f64,
    pub w: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            a: 0.6,
            c: 0.1,
            b: 1.0,
            k: 0.2,
            w: 0.02,
        }
    }
}

pub fn toy_system(graph: InterconnectionGraph, params: &ToyParams) -> Result<(InterconnectedSystem, NominalPolicy)> {
    let n = graph.agent_count();
    let dynamics = LinearAgent::scalar(params.a, params.c, params.b);
    let agents = (0..n)
        .map(|i| {
            let deg = graph.neighbors(i).len();
            AgentSpec {
                state_dim: 1,
                input_dim: 1,
                disturbance_box: vec![(-params.w, params.w)],
                label: "toy".into(),
                lipschitz_f: dynamics.lipschitz(deg),
                equilibrium: vec![0.0],
                dynamics: Arc::new(dynamics.clone()) as Arc<dyn AgentDynamics>,
            }
        })
        .collect();
    let laws = (0..n)
        .map(|i| {
            let mut l = LinearFeedback::zero(1, 1, &vec![1; graph.neighbors(i).len()]);
            l.self_gain[0] = -params.k;
            l
        })
        .collect();
    let system = InterconnectedSystem::new(graph, agents)?;
    let nominal = NominalPolicy::new(&system, laws)?;
    Ok((system, nominal))
}

// ---------------------------------------------------------------------------
// Platoon

/// Optimal-velocity human driver model `F = alpha (V(s) - v)` with
/// `V(s) = v_max / 2 (tanh((s - s_c) / w) + tanh(s_c / w))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ovm {
    pub alpha: f64,
    pub v_max: f64,
    pub s_c: f64,
    pub w: f64,
}

impl Default for Ovm {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            v_max: 20.0,
            s_c: 20.0,
            w: 5.0,
        }
    }
}

impl Ovm {
    pub fn desired_speed(&self, s: f64) -> f64 {
        0.5 * self.v_max * (((s - self.s_c) / self.w).tanh() + (self.s_c / self.w).tanh())
    }

    pub fn acceleration(&self, s: f64, v: f64) -> f64 {
        self.alpha * (self.desired_speed(s) - v)
    }

    /// Largest slope of the desired-speed profile.
    pub fn max_slope(&self) -> f64 {
        0.5 * self.v_max / self.w
    }

    /// Spacing `s` with `V(s) = v`, by bisection on the monotone profile.
    pub fn equilibrium_spacing(&self, v: f64) -> Result<f64> {
        let lo_v = self.desired_speed(0.0);
        let sup = 0.5 * self.v_max * (1.0 + (self.s_c / self.w).tanh());
        if !(v > lo_v && v < sup) {
            return Err(Error::Config(format!(
                "equilibrium velocity {v} outside the optimal-velocity range ({lo_v}, {sup})"
            )));
        }
        let (mut lo, mut hi) = (0.0, self.s_c);
        while self.desired_speed(hi) < v {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.desired_speed(mid) < v {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VehicleKind {
    Cav,
    Hdv(Ovm),
}

/// State `(s, v)`: gap to the predecessor and own speed. The neighbour slot,
/// when present, carries the predecessor's delayed `(s, v)`; the lead vehicle
/// follows a virtual leader at constant speed `v_lead`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatoonAgent {
    pub t: f64,
    pub kind: VehicleKind,
    pub v_lead: f64,
}

impl PlatoonAgent {
    pub fn jacobian_bound(&self, has_predecessor: bool) -> Vec<Vec<f64>> {
        let t = self.t;
        let nb = |v: [f64; 2]| if has_predecessor { v.to_vec() } else { Vec::new() };
        let mut s_row = vec![1.0, t, 0.0];
        s_row.extend(nb([0.0, t]));
        s_row.push(0.0);
        let mut v_row = match self.kind {
            VehicleKind::Cav => vec![0.0, 1.0, t],
            VehicleKind::Hdv(ovm) => vec![t * ovm.alpha * ovm.max_slope(), (1.0 - t * ovm.alpha).abs(), 0.0],
        };
        v_row.extend(nb([0.0, 0.0]));
        v_row.push(1.0);
        vec![s_row, v_row]
    }
}

impl AgentDynamics for PlatoonAgent {
    fn step(&self, x: &[f64], u: &[f64], neighbors: &[&[f64]], d: &[f64]) -> Vec<f64> {
        let (s, v) = (x[0], x[1]);
        let v_prev = neighbors.first().map(|p| p[1]).unwrap_or(self.v_lead);
        let accel = match self.kind {
            VehicleKind::Cav => u[0],
            VehicleKind::Hdv(ovm) => ovm.acceleration(s, v),
        };
        let s_next = s + self.t * (v_prev - v);
        if s_next < 0.0 {
            log::debug!("negative spacing {s_next}");
        }
        vec![s_next, v + self.t * accel + d.first().copied().unwrap_or(0.0)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatoonGains {
    pub k_s: f64,
    pub k_v: f64,
    pub k_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlatoonParams {
    pub t: f64,
    pub vehicles: usize,
    /// Human-driven vehicle indices; every other vehicle is automated.
    pub hdv: Vec<usize>,
    pub ovm: Ovm,
    pub v_star: f64,
    pub gains: Option<PlatoonGains>,
    pub disturbance: f64,
}

impl Default for PlatoonParams {
    fn default() -> Self {
        Self {
            t: 0.1,
            vehicles: 5,
            hdv: vec![2],
            ovm: Ovm::default(),
            v_star: 10.0,
            gains: Some(PlatoonGains {
                k_s: 0.1,
                k_v: 0.5,
                k_p: 0.2,
            }),
            disturbance: 0.05,
        }
    }
}

impl PlatoonParams {
    pub fn cav_set(&self) -> Vec<usize> {
        (0..self.vehicles).filter(|i| !self.hdv.contains(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0) {
            return Err(Error::Config("platoon sampling period must be positive".into()));
        }
        if let Some(bad) = self.hdv.iter().find(|i| **i >= self.vehicles) {
            return Err(Error::Config(format!("human-driven vehicle {bad} outside the platoon")));
        }
        Ok(())
    }
}

/// Nominal CAV law `u = -k_s (s - s*) - k_v (v - v*) + k_p (v_pred - v)`
/// written on errors.
pub fn platoon_law(gains: &PlatoonGains, has_predecessor: bool) -> LinearFeedback {
    LinearFeedback {
        input_dim: 1,
        self_gain: vec![-gains.k_s, -(gains.k_v + gains.k_p)],
        neighbor_gains: if has_predecessor {
            vec![vec![0.0, gains.k_p]]
        } else {
            Vec::new()
        },
    }
}

/// Platoon on a predecessor chain with the given delay.
pub fn platoon_system(params: &PlatoonParams, delay: usize, bound: usize) -> Result<(InterconnectedSystem, NominalPolicy)> {
    params.validate()?;
    let gains = params
        .gains
        .ok_or_else(|| Error::Config("platoon nominal gains are missing".into()))?;
    let s_star = params.ovm.equilibrium_spacing(params.v_star)?;
    let graph = InterconnectionGraph::chain(params.vehicles, delay, bound)?;
    let mut agents = Vec::new();
    let mut laws = Vec::new();
    for i in 0..params.vehicles {
        let hdv = params.hdv.contains(&i);
        let dynamics = PlatoonAgent {
            t: params.t,
            kind: if hdv { VehicleKind::Hdv(params.ovm) } else { VehicleKind::Cav },
            v_lead: params.v_star,
        };
        let has_pred = i > 0;
        agents.push(AgentSpec {
            state_dim: 2,
            input_dim: 1,
            disturbance_box: vec![(-params.disturbance, params.disturbance)],
            label: if hdv { "platoon-hdv" } else { "platoon-cav" }.into(),
            lipschitz_f: jacobian_bound_norm(&dynamics.jacobian_bound(has_pred)),
            equilibrium: vec![s_star, params.v_star],
            dynamics: Arc::new(dynamics),
        });
        laws.push(if hdv {
            LinearFeedback::zero(1, 2, if has_pred { &[2] } else { &[] })
        } else {
            platoon_law(&gains, has_pred)
        });
    }
    let system = InterconnectedSystem::new(graph, agents)?;
    let nominal = NominalPolicy::new(&system, laws)?;
    Ok((system, nominal))
}

// ---------------------------------------------------------------------------
// Drone formation

/// Discrete double integrator in R^3, state `(p, v)`, `p' = p + T v`,
/// `v' = v + T u + d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleIntegrator {
    pub t: f64,
}

impl DoubleIntegrator {
    pub fn jacobian_bound(&self, neighbors: usize) -> Vec<Vec<f64>> {
        let t = self.t;
        (0..6)
            .map(|r| {
                let mut row = vec![0.0; 6 + 3 + 6 * neighbors + 3];
                row[r] = 1.0;
                if r < 3 {
                    row[r + 3] = t;
                } else {
                    row[6 + (r - 3)] = t;
                    row[6 + 3 + 6 * neighbors + (r - 3)] = 1.0;
                }
                row
            })
            .collect()
    }
}

impl AgentDynamics for DoubleIntegrator {
    fn step(&self, x: &[f64], u: &[f64], _neighbors: &[&[f64]], d: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; 6];
        for a in 0..3 {
            out[a] = x[a] + self.t * x[a + 3];
            out[a + 3] = x[a + 3] + self.t * u[a] + d.get(a).copied().unwrap_or(0.0);
        }
        out
    }
}

/// Leader input that rotates the leader velocity about the vertical axis by
/// `omega * T` each step, so the speed is preserved exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircularReference {
    pub omega: f64,
    pub t: f64,
}

impl CircularReference {
    pub fn control(&self, v: &[f64]) -> Vec<f64> {
        let (s, c) = (self.omega * self.t).sin_cos();
        let rx = c * v[0] - s * v[1];
        let ry = s * v[0] + c * v[1];
        vec![(rx - v[0]) / self.t, (ry - v[1]) / self.t, 0.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DroneTopology {
    #[default]
    Predecessor,
    LeaderToAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroneGains {
    pub k_p: f64,
    pub k_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DroneParams {
    pub t: f64,
    pub followers: usize,
    /// Formation offset of each follower relative to the leader (m). Empty
    /// means a line along -x spaced `spacing` apart.
    pub offsets: Vec<[f64; 3]>,
    pub spacing: f64,
    pub topology: DroneTopology,
    pub gains: Option<DroneGains>,
    pub disturbance: f64,
}

impl Default for DroneParams {
    fn default() -> Self {
        Self {
            t: 0.1,
            followers: 4,
            offsets: Vec::new(),
            spacing: 2.0,
            topology: DroneTopology::Predecessor,
            gains: Some(DroneGains { k_p: 1.0, k_d: 1.5 }),
            disturbance: 0.05,
        }
    }
}

impl DroneParams {
    pub fn resolved_offsets(&self) -> Result<Vec<[f64; 3]>> {
        let offs = if self.offsets.is_empty() {
            (1..=self.followers)
                .map(|i| [-(i as f64) * self.spacing, 0.0, 0.0])
                .collect()
        } else {
            self.offsets.clone()
        };
        if offs.len() != self.followers {
            return Err(Error::Config(format!(
                "{} formation offsets for {} followers",
                offs.len(),
                self.followers
            )));
        }
        for a in 0..offs.len() {
            for b in a + 1..offs.len() {
                if offs[a] == offs[b] {
                    return Err(Error::Config(format!("followers {} and {} share an offset", a + 1, b + 1)));
                }
            }
        }
        if !(self.t > 0.0) {
            return Err(Error::Config("drone sampling period must be positive".into()));
        }
        Ok(offs)
    }
}

fn pd_block(k_p: f64, k_d: f64, sign: f64) -> Vec<f64> {
    let mut g = vec![0.0; 18];
    for a in 0..3 {
        g[a * 6 + a] = sign * k_p;
        g[a * 6 + a + 3] = sign * k_d;
    }
    g
}

/// Agent 0 is the leader hovering at the origin; follower `i` tracks its
/// reference agent shifted by the offset difference.
pub fn drone_system(params: &DroneParams, delay: usize, bound: usize) -> Result<(InterconnectedSystem, NominalPolicy)> {
    let offsets = params.resolved_offsets()?;
    let gains = params
        .gains
        .ok_or_else(|| Error::Config("drone nominal gains are missing".into()))?;
    let n = params.followers + 1;
    let edges: Vec<(usize, Edge)> = (1..n)
        .map(|i| {
            let from = match params.topology {
                DroneTopology::Predecessor => i - 1,
                DroneTopology::LeaderToAll => 0,
            };
            (i, Edge { from, delay, bound })
        })
        .collect();
    let graph = InterconnectionGraph::new(n, &edges)?;
    let dynamics = DoubleIntegrator { t: params.t };
    let mut agents = Vec::new();
    let mut laws = Vec::new();
    for i in 0..n {
        let deg = graph.neighbors(i).len();
        let eq = if i == 0 {
            vec![0.0; 6]
        } else {
            let o = offsets[i - 1];
            vec![o[0], o[1], o[2], 0.0, 0.0, 0.0]
        };
        agents.push(AgentSpec {
            state_dim: 6,
            input_dim: 3,
            disturbance_box: vec![(-params.disturbance, params.disturbance); 3],
            label: "drone".into(),
            lipschitz_f: jacobian_bound_norm(&dynamics.jacobian_bound(deg)),
            equilibrium: eq,
            dynamics: Arc::new(dynamics),
        });
        laws.push(LinearFeedback {
            input_dim: 3,
            self_gain: pd_block(gains.k_p, gains.k_d, -1.0),
            neighbor_gains: (0..deg).map(|_| pd_block(gains.k_p, gains.k_d, 1.0)).collect(),
        });
    }
    let system = InterconnectedSystem::new(graph, agents)?;
    let nominal = NominalPolicy::new(&system, laws)?;
    Ok((system, nominal))
}

// ---------------------------------------------------------------------------
// Microgrid

/// Active power injected at node `i`:
/// `P_L,i + sum_j |B_ij| U_i U_j sin(delta_i - delta_j)`.
pub fn microgrid_power(params: &MicrogridParams, angles: &[f64], voltages: &[f64], i: usize) -> f64 {
    let mut p = params.loads[i];
    for (j, b) in params.susceptance[i].iter().enumerate() {
        if *b != 0.0 && j != i {
            p += b.abs() * voltages[i] * voltages[j] * (angles[i] - angles[j]).sin();
        }
    }
    p
}

/// Droop-controlled inverter, state `(delta, omega, xi)` in deviation
/// coordinates (`omega* = 0`). Neighbour slots carry delayed neighbour states;
/// only their angles enter the power flow.
#[derive(Debug, Clone, PartialEq)]
pub struct InverterAgent {
    pub t: f64,
    pub tau: f64,
    pub eta: f64,
    pub load: f64,
    pub setpoint: f64,
    pub omega_star: f64,
    /// `|B_ij| U_i U_j` per neighbour slot.
    pub line_gains: Vec<f64>,
}

impl InverterAgent {
    pub fn power(&self, delta: f64, neighbors: &[&[f64]]) -> f64 {
        self.load
            + self
                .line_gains
                .iter()
                .zip(neighbors)
                .map(|(g, x)| g * (delta - x[0]).sin())
                .sum::<f64>()
    }

    pub fn jacobian_bound(&self) -> Vec<Vec<f64>> {
        let k = self.t / self.tau;
        let deg = self.line_gains.len();
        let total: f64 = self.line_gains.iter().sum();
        let width = 3 + 1 + 3 * deg + 1;
        let mut d_row = vec![0.0; width];
        d_row[0] = 1.0;
        d_row[1] = self.t;
        let mut w_row = vec![0.0; width];
        w_row[0] = k * self.eta * total;
        w_row[1] = (1.0 - k).abs();
        w_row[2] = k;
        for (s, g) in self.line_gains.iter().enumerate() {
            w_row[4 + 3 * s] = k * self.eta * g;
        }
        w_row[width - 1] = 1.0;
        let mut x_row = vec![0.0; width];
        x_row[2] = 1.0;
        x_row[3] = self.t;
        vec![d_row, w_row, x_row]
    }
}

impl AgentDynamics for InverterAgent {
    fn step(&self, x: &[f64], u: &[f64], neighbors: &[&[f64]], d: &[f64]) -> Vec<f64> {
        let (delta, omega, xi) = (x[0], x[1], x[2]);
        let p = self.power(delta, neighbors);
        let k = self.t / self.tau;
        vec![
            delta + self.t * omega,
            omega + k * (-(omega - self.omega_star) - self.eta * (p - self.setpoint) + xi) + d.first().copied().unwrap_or(0.0),
            xi + self.t * u[0],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrogridGains {
    pub k_omega: f64,
    pub k_xi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicrogridParams {
    pub t: f64,
    /// Symmetric susceptance matrix; its nonzero pattern must be a tree.
    pub susceptance: Vec<Vec<f64>>,
    pub loads: Vec<f64>,
    pub eta: Vec<f64>,
    pub tau: Vec<f64>,
    pub gains: Option<MicrogridGains>,
    pub disturbance: f64,
}

impl Default for MicrogridParams {
    fn default() -> Self {
        Self::radial_line(4, 1.0, 0.2)
    }
}

impl MicrogridParams {
    /// Inverters on a line with identical line susceptance and loads.
    pub fn radial_line(n: usize, b: f64, load: f64) -> Self {
        let mut susceptance = vec![vec![0.0; n]; n];
        for i in 1..n {
            susceptance[i][i - 1] = b;
            susceptance[i - 1][i] = b;
        }
        Self {
            t: 0.01,
            susceptance,
            loads: vec![load; n],
            eta: vec![0.5; n],
            tau: vec![0.1; n],
            gains: Some(MicrogridGains { k_omega: 1.0, k_xi: 0.2 }),
            disturbance: 0.05,
        }
    }

    pub fn inverter_count(&self) -> usize {
        self.loads.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inverter_count();
        if n == 0 || self.susceptance.len() != n || self.eta.len() != n || self.tau.len() != n {
            return Err(Error::Config("microgrid parameter vectors disagree in length".into()));
        }
        if self.susceptance.iter().any(|r| r.len() != n) {
            return Err(Error::Config("susceptance matrix must be square".into()));
        }
        if self.tau.iter().any(|t| !(*t > 0.0)) || self.eta.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("microgrid time constants and droop gains must be positive".into()));
        }
        if !(self.t > 0.0) {
            return Err(Error::Config("microgrid sampling period must be positive".into()));
        }
        let mut edges = 0;
        for i in 0..n {
            for j in 0..n {
                if self.susceptance[i][j] != self.susceptance[j][i] {
                    return Err(Error::Config("susceptance matrix must be symmetric".into()));
                }
                if j > i && self.susceptance[i][j] != 0.0 {
                    edges += 1;
                }
            }
        }
        // A connected graph with n - 1 edges is a tree.
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if self.susceptance[i][j] != 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if edges + 1 != n || seen.iter().any(|s| !s) {
            return Err(Error::Config("microgrid topology must be radial (a tree)".into()));
        }
        Ok(())
    }
}

pub fn microgrid_system(params: &MicrogridParams, delay: usize, bound: usize) -> Result<(InterconnectedSystem, NominalPolicy)> {
    params.validate()?;
    let gains = params
        .gains
        .ok_or_else(|| Error::Config("microgrid nominal gains are missing".into()))?;
    let n = params.inverter_count();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && params.susceptance[i][j] != 0.0 {
                edges.push((i, Edge { from: j, delay, bound }));
            }
        }
    }
    let graph = InterconnectionGraph::new(n, &edges)?;
    let mut agents = Vec::new();
    let mut laws = Vec::new();
    for i in 0..n {
        let nbrs = graph.neighbor_ids(i);
        let dynamics = InverterAgent {
            t: params.t,
            tau: params.tau[i],
            eta: params.eta[i],
            load: params.loads[i],
            setpoint: params.loads[i],
            omega_star: 0.0,
            line_gains: nbrs.iter().map(|j| params.susceptance[i][*j].abs()).collect(),
        };
        let mut law = LinearFeedback::zero(1, 3, &vec![3; nbrs.len()]);
        law.self_gain[1] = -gains.k_omega;
        law.self_gain[2] = -gains.k_xi;
        laws.push(law);
        agents.push(AgentSpec {
            state_dim: 3,
            input_dim: 1,
            disturbance_box: vec![(-params.disturbance, params.disturbance)],
            label: format!(
                "inverter(tau={},eta={},load={},b={:?})",
                params.tau[i],
                params.eta[i],
                params.loads[i],
                {
                    let mut b: Vec<f64> = dynamics.line_gains.clone();
                    b.sort_by(f64::total_cmp);
                    b
                }
            ),
            lipschitz_f: jacobian_bound_norm(&dynamics.jacobian_bound()),
            equilibrium: vec![0.0; 3],
            dynamics: Arc::new(dynamics),
        });
    }
    let system = InterconnectedSystem::new(graph, agents)?;
    let nominal = NominalPolicy::new(&system, laws)?;
    Ok((system, nominal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{pad_history, step_system};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn platoon_spacing_update() {
        let cav = PlatoonAgent {
            t: 0.1,
            kind: VehicleKind::Cav,
            v_lead: 10.0,
        };
        let next = cav.step(&[20.0, 10.0], &[0.0], &[&[0.0, 12.0]], &[0.0]);
        assert!(close(next[0], 20.2, 1e-12));
        assert!(close(next[1], 10.0, 1e-12));
        let same = cav.step(&[20.0, 10.0], &[0.3], &[&[5.0, 10.0]], &[0.0]);
        assert_eq!(same[0], 20.0);
    }

    #[test]
    fn ovm_fixed_point() {
        let ovm = Ovm::default();
        let s = ovm.equilibrium_spacing(10.0).unwrap();
        assert!(close(ovm.desired_speed(s), 10.0, 1e-12));
        let hdv = PlatoonAgent {
            t: 0.1,
            kind: VehicleKind::Hdv(ovm),
            v_lead: 10.0,
        };
        let next = hdv.step(&[s, 10.0], &[123.0], &[&[s, 10.0]], &[0.0]);
        assert!(close(next[1], 10.0, 1e-12));
        assert!(ovm.equilibrium_spacing(25.0).is_err());
    }

    #[test]
    fn microgrid_power_examples() {
        let mut p = MicrogridParams::radial_line(2, 1.0, 0.2);
        let pw = microgrid_power(&p, &[0.1, 0.0], &[1.0, 1.0], 0);
        assert!(close(pw, 0.2 + 0.1f64.sin(), 1e-15));
        assert!(close(pw, 0.29983, 1e-5));
        assert_eq!(microgrid_power(&p, &[0.3, 0.3], &[1.0, 1.0], 1), 0.2);
        let flipped = microgrid_power(&p, &[0.0, 0.1], &[1.0, 1.0], 0);
        assert!(close(flipped - 0.2, -(pw - 0.2), 1e-15));
        p.loads = vec![0.35, 0.35];
        let total = microgrid_power(&p, &[0.7, 0.7], &[1.0, 1.0], 0) + microgrid_power(&p, &[0.7, 0.7], &[1.0, 1.0], 1);
        assert_eq!(total, 0.7);
    }

    #[test]
    fn microgrid_step_examples() {
        let inv = InverterAgent {
            t: 0.01,
            tau: 0.1,
            eta: 0.5,
            load: 1.2,
            setpoint: 0.2,
            omega_star: 0.0,
            line_gains: Vec::new(),
        };
        let next = inv.step(&[0.0, 0.0, 0.0], &[0.0], &[], &[0.0]);
        assert!(close(next[1], -0.05, 1e-15));
        let at_eq = InverterAgent { load: 0.2, ..inv.clone() };
        let next = at_eq.step(&[0.0, 0.0, 0.0], &[0.0], &[], &[0.0]);
        assert_eq!(next, vec![0.0, 0.0, 0.0]);
        let next = at_eq.step(&[0.4, 0.0, 0.7], &[2.0], &[], &[0.0]);
        assert!(close(next[2], 0.72, 1e-15));
    }

    #[test]
    fn double_integrator_examples() {
        let di = DoubleIntegrator { t: 0.1 };
        let x = [1.0, 2.0, 3.0, 0.0, 0.0, 0.0];
        assert_eq!(&di.step(&x, &[0.0; 3], &[], &[0.0; 3])[..3], &x[..3]);
        let next = di.step(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[0.0; 3], &[], &[0.0; 3]);
        assert!(close(next[0], 0.1, 1e-15));
        assert_eq!(&next[1..3], &[0.0, 0.0]);
    }

    #[test]
    fn circular_reference_keeps_speed() {
        let gen = CircularReference { omega: 0.3, t: 0.1 };
        let di = DoubleIntegrator { t: 0.1 };
        let mut x: Vec<f64> = vec![0.0, 0.0, 0.0, 2.0, 0.5, 0.0];
        let speed0 = (x[3] * x[3] + x[4] * x[4]).sqrt();
        for _ in 0..100 {
            let u = gen.control(&x[3..]);
            x = di.step(&x, &u, &[], &[0.0; 3]);
            let speed = (x[3] * x[3] + x[4] * x[4] + x[5] * x[5]).sqrt();
            assert!(close(speed, speed0, 1e-9));
        }
    }

    #[test]
    fn nominal_policy_examples() {
        let law = platoon_law(
            &PlatoonGains {
                k_s: 0.1,
                k_v: 0.5,
                k_p: 0.2,
            },
            true,
        );
        // Spacing error 2, own speed error -1, predecessor 1 faster than us:
        // predecessor speed error is therefore 0.
        let u = law.apply(&[2.0, -1.0], &[&[0.0, 0.0]]);
        assert!(close(u[0], 0.5, 1e-15));
        assert_eq!(law.apply(&[0.0, 0.0], &[&[0.0, 0.0]]), vec![0.0]);

        let (sys, nominal) = microgrid_system(&MicrogridParams::default(), 1, 1).unwrap();
        let u = nominal.control(1, &[0.0, 0.5, 0.0], &[&[0.0; 3], &[0.0; 3]]);
        assert!(close(u[0], -0.5, 1e-15));
        assert_eq!(sys.agent_count(), 4);
    }

    #[test]
    fn missing_gains_are_configuration_errors() {
        let p = PlatoonParams {
            gains: None,
            ..Default::default()
        };
        assert!(matches!(platoon_system(&p, 1, 1), Err(Error::Config(_))));
        let d = DroneParams {
            gains: None,
            ..Default::default()
        };
        assert!(matches!(drone_system(&d, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn microgrid_rejects_cycles() {
        let mut p = MicrogridParams::radial_line(3, 1.0, 0.2);
        p.susceptance[0][2] = 1.0;
        p.susceptance[2][0] = 1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn platoon_initial_history_padding() {
        let (sys, _) = platoon_system(&PlatoonParams::default(), 1, 2).unwrap();
        let mut x0 = sys.equilibrium();
        x0[1][0] = 22.0;
        let h = pad_history(&sys, &x0).unwrap();
        assert_eq!(h.state(1, 0)[0], 22.0);
        assert_eq!(h.state(1, 1), sys.agents[1].equilibrium.as_slice());
        assert_eq!(h.state(1, 2), sys.agents[1].equilibrium.as_slice());
        let _ = step_system(&sys, &h, &vec![vec![0.0]; 5], &sys.zero_disturbance()).unwrap();
    }
}
