//! Two-stage grid verification of certificates.
//!
//! Stage 1 checks the Razumikhin disjunction on grid points of each agent's
//! reachability-constrained delay domain outside `{V_max <= R}`. Stage 2
//! checks the inside set. Both lift from grid centres to the continuous
//! domain through Lipschitz margins.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::{norm, Certificate, LyapunovNet, PolicyNet};
use crate::error::{Error, Result};
use crate::reachability::{build_envelope, local_domain, Interval, ReachEnvelope, ReachOptions};
use crate::synthesis::{check_boxes, AgentBoxes, CertificateConstants};
use crate::system::{InterconnectedSystem, LocalLayout};

/// Tolerance on `|V(0)|` for the class-K check on the degenerate box `{0}`.
pub const ORIGIN_TOLERANCE: f64 = 1e-6;

/// Returns `(rho, c)` with `rho = max{exp(-ln p / (tau_max + 1)), 1 - eps}`
/// and `c = p`.
pub fn compute_rho_c(p: f64, epsilon: f64, tau_max: usize) -> Result<(f64, f64)> {
    if !(p > 1.0 && p.is_finite() && epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Constants(format!("need p > 1 and 0 < epsilon < 1, got p = {p}, epsilon = {epsilon}")));
    }
    let rho = (-p.ln() / (tau_max as f64 + 1.0)).exp().max(1.0 - epsilon);
    Ok((rho, p))
}

/// Steps after which every `V_i` is below `R`:
/// `ceil(ln(R / (c Vmax0)) / ln rho)`, or 0 when already inside.
pub fn compute_tr(r: f64, c: f64, vmax0: f64, rho: f64) -> usize {
    if r >= c * vmax0 {
        return 0;
    }
    let t = ((r / (c * vmax0)).ln() / rho.ln()).ceil();
    if t.is_finite() && t > 0.0 {
        t as usize
    } else {
        0
    }
}

/// Smallest admissible radius `psi * d_bar / epsilon`.
pub fn min_radius(constants: &CertificateConstants, system: &InterconnectedSystem) -> f64 {
    constants.psi * system.disturbance_bound() / constants.epsilon
}

/// Lipschitz margins of one agent (or verification group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMargins {
    pub agent: usize,
    /// `p L_Vi + max_j L_Vj`.
    pub l_h: f64,
    /// `L_Vi L_fi + sum_j |gamma_ij| L_Vj + psi`.
    pub l_r: f64,
    pub l_vi: f64,
    pub l_fi: f64,
    /// Half grid diagonal per step `k`.
    pub eps_out: Vec<f64>,
    pub eps_in: f64,
    pub delta_out: Vec<f64>,
    pub delta_in: f64,
}

impl AgentMargins {
    /// Margin for the inside invariance check: `L_Vi L_fi eps_in`.
    pub fn invariance_margin(&self) -> f64 {
        self.l_vi * self.l_fi * self.eps_in
    }
}

/// `coupling` lists `(gamma_ij, L_Vj)` over `E_i` and `i` itself; `l_fi` is
/// the Lipschitz bound of the closed-loop step map. Margins are the lower
/// bounds times `slack >= 1`.
pub fn compute_margins(
    agent: usize,
    constants: &CertificateConstants,
    coupling: &[(f64, f64)],
    l_vi: f64,
    l_fi: f64,
    eps_out: &[f64],
    eps_in: f64,
    slack: f64,
) -> Result<AgentMargins> {
    if !(slack >= 1.0) {
        return Err(Error::Config(format!("margin slack must be at least 1, got {slack}")));
    }
    let max_lv = coupling.iter().map(|c| c.1).fold(l_vi, f64::max);
    let l_h = constants.p * l_vi + max_lv;
    let l_r = l_vi * l_fi + coupling.iter().map(|(g, l)| g.abs() * l).sum::<f64>() + constants.psi;
    Ok(AgentMargins {
        agent,
        l_h,
        l_r,
        l_vi,
        l_fi,
        eps_out: eps_out.to_vec(),
        eps_in,
        delta_out: eps_out.iter().map(|e| slack * l_r * e).collect(),
        delta_in: slack * l_r * eps_in,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridOptions {
    pub delta_out: f64,
    pub delta_in: f64,
    /// Largest number of grid points per task.
    pub point_cap: u64,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            delta_out: 0.05,
            delta_in: 0.01,
            point_cap: 100_000_000,
        }
    }
}

impl GridOptions {
    pub fn validate(&self) -> Result<()> {
        if self.delta_out > 0.0 && self.delta_in > 0.0 && self.point_cap > 0 {
            Ok(())
        } else {
            Err(Error::Config("grid steps and the point cap must be positive".into()))
        }
    }
}

/// Cell-centre grid on one interval: `count = ceil(width / delta)` cells of
/// equal width, so the actual step never exceeds `delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub step: f64,
    pub count: u64,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, delta: f64) -> Self {
        let width = hi - lo;
        if !(width > 0.0) {
            return Self { lo, step: 0.0, count: 1 };
        }
        let count = (width / delta).ceil().max(1.0) as u64;
        Self {
            lo,
            step: width / count as f64,
            count,
        }
    }

    pub fn point(&self, idx: u64) -> f64 {
        self.lo + (idx as f64 + 0.5) * self.step
    }
}

/// Lazily enumerated product grid over a box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxGrid {
    pub axes: Vec<Axis>,
}

impl BoxGrid {
    pub fn new(intervals: &[Interval], delta: f64) -> Self {
        Self {
            axes: intervals.iter().map(|(lo, hi)| Axis::new(*lo, *hi, delta)).collect(),
        }
    }

    /// Number of points, saturating.
    pub fn count(&self) -> u128 {
        self.axes.iter().fold(1u128, |acc, a| acc.saturating_mul(a.count as u128))
    }

    pub fn point(&self, mut idx: u64) -> Vec<f64> {
        let mut out = vec![0.0; self.axes.len()];
        for (o, a) in out.iter_mut().zip(&self.axes).rev() {
            *o = a.point(idx % a.count);
            idx /= a.count;
        }
        out
    }

    /// Squared half steps, summed.
    fn half_sq(&self) -> f64 {
        self.axes.iter().map(|a| (a.step / 2.0).powi(2)).sum()
    }

    /// `1/2 ||Delta||_2`: distance from any box point to its cell centre.
    pub fn half_diagonal(&self) -> f64 {
        self.half_sq().sqrt()
    }
}

/// Half diagonal of several grids taken together.
fn joint_half_diagonal<'a>(grids: impl IntoIterator<Item = &'a BoxGrid>) -> f64 {
    grids.into_iter().map(BoxGrid::half_sq).sum::<f64>().sqrt()
}

fn hull(acc: &mut [Interval], other: &[Interval]) {
    for (a, b) in acc.iter_mut().zip(other) {
        a.0 = a.0.min(b.0);
        a.1 = a.1.max(b.1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Verified,
    Refuted,
    InconclusiveCap,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Verified => 0,
            Verdict::Refuted => 1,
            Verdict::InconclusiveCap => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Stage1,
    Stage2Decrement,
    Stage2Invariance,
    ClassKLower,
    ClassKUpper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskStatus {
    Pass,
    Fail,
    Cap,
}

/// A grid point violating a condition. `z` is in absolute coordinates: for
/// stage checks it follows the agent's [`LocalLayout`] with the disturbance
/// appended, for class-K checks it is a single agent state (error coordinates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub agent: usize,
    /// Step of the outside check; `None` for the inside and class-K checks.
    pub k: Option<usize>,
    pub condition: Condition,
    pub z: Vec<f64>,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub agent: usize,
    pub k: Option<usize>,
    pub status: TaskStatus,
    /// Size of the grid.
    pub points: u64,
    /// Grid points the condition was actually evaluated on.
    pub checked: u64,
    /// Largest residual seen; positive means violated.
    pub worst_residual: Option<f64>,
    pub counterexamples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub stats: TaskStats,
    pub counterexamples: Vec<Counterexample>,
}

impl TaskOutcome {
    fn capped(agent: usize, k: Option<usize>, points: u128) -> Self {
        Self {
            stats: TaskStats {
                agent,
                k,
                status: TaskStatus::Cap,
                points: sat(points),
                checked: 0,
                worst_residual: None,
                counterexamples: 0,
            },
            counterexamples: Vec::new(),
        }
    }

    fn finish(agent: usize, k: Option<usize>, points: u128, checked: u128, worst: f64, cex: Vec<Counterexample>) -> Self {
        Self {
            stats: TaskStats {
                agent,
                k,
                status: if cex.is_empty() { TaskStatus::Pass } else { TaskStatus::Fail },
                points: sat(points),
                checked: sat(checked),
                worst_residual: worst.is_finite().then_some(worst),
                counterexamples: cex.len(),
            },
            counterexamples: cex,
        }
    }
}

fn sat(v: u128) -> u64 {
    v.min(u64::MAX as u128) as u64
}

// ---------------------------------------------------------------------------
// Class-K bounds and sublevel boxes

/// Checks `a1 ||e|| <= V(e) <= a2 ||e||` on a box in error coordinates.
///
/// The lower bound holds everywhere when the candidate's norm floor is at
/// least `a1`, and the upper bound when `L_V <= a2` (as `V(0) = 0`).
/// Otherwise grid centres are checked with margin
/// `m = (L_V + max(a1, a2)) * 1/2 ||Delta||`.
pub fn classk_check(
    agent: usize,
    net: &LyapunovNet,
    domain: &[Interval],
    a1: f64,
    a2: f64,
    delta: f64,
    l_v: f64,
    cap: u64,
    cex_cap: usize,
) -> TaskOutcome {
    let phi0 = net.phi0();
    if domain.iter().all(|(lo, hi)| *lo == 0.0 && *hi == 0.0) {
        let v0 = net.value_with(&vec![0.0; domain.len()], phi0);
        let cex = if v0.abs() <= ORIGIN_TOLERANCE {
            Vec::new()
        } else {
            vec![Counterexample {
                agent,
                k: None,
                condition: Condition::ClassKLower,
                z: vec![0.0; domain.len()],
                residuals: vec![v0.abs()],
            }]
        };
        return TaskOutcome::finish(agent, None, 1, 1, v0.abs() - ORIGIN_TOLERANCE, cex);
    }
    let check_lower = net.floor < a1;
    let check_upper = l_v > a2;
    let grid = BoxGrid::new(domain, delta);
    let points = grid.count();
    if !check_lower && !check_upper {
        return TaskOutcome::finish(agent, None, points, 0, f64::NEG_INFINITY, Vec::new());
    }
    if points > cap as u128 {
        return TaskOutcome::capped(agent, None, points);
    }
    let m = (l_v + a1.max(a2)) * grid.half_diagonal();
    let results: Vec<(f64, Vec<Counterexample>)> = chunks(points as u64)
        .into_par_iter()
        .map(|(start, end)| {
            let mut worst = f64::NEG_INFINITY;
            let mut cex = Vec::new();
            for idx in start..end {
                let e = grid.point(idx);
                let v = net.value_with(&e, phi0);
                let n = norm(&e);
                let mut push = |cond, res: f64| {
                    worst = worst.max(res);
                    if res > 0.0 && cex.len() < cex_cap {
                        cex.push(Counterexample {
                            agent,
                            k: None,
                            condition: cond,
                            z: e.clone(),
                            residuals: vec![res],
                        });
                    }
                };
                if check_lower {
                    push(Condition::ClassKLower, a1 * n + m - v);
                }
                if check_upper {
                    push(Condition::ClassKUpper, v - a2 * n + m);
                }
            }
            (worst, cex)
        })
        .collect();
    let (worst, cex) = merge(results, cex_cap);
    TaskOutcome::finish(agent, None, points, points, worst, cex)
}

const CHUNK: u64 = 4096;

fn chunks(total: u64) -> Vec<(u64, u64)> {
    (0..total.div_ceil(CHUNK))
        .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(total)))
        .collect()
}

fn merge(parts: Vec<(f64, Vec<Counterexample>)>, cap: usize) -> (f64, Vec<Counterexample>) {
    let mut worst = f64::NEG_INFINITY;
    let mut all = Vec::new();
    for (w, c) in parts {
        worst = worst.max(w);
        all.extend(c);
    }
    all.truncate(cap);
    (worst, all)
}

/// Outer box of `{e : V(e) <= r}` in error coordinates.
///
/// Starts from `[-r/floor, r/floor]^n` (valid because `V >= floor ||e||`)
/// and refines by bisection, discarding boxes with
/// `V(centre) - L_V * half_diagonal > r`. Stops after `budget` evaluations;
/// the hull of all surviving boxes is returned, so the result is an outer
/// bound at any budget.
pub fn sublevel_box(net: &LyapunovNet, r: f64, l_v: f64, budget: usize) -> Vec<Interval> {
    let n = net.state_dim();
    let half = r / net.floor;
    let root: Vec<Interval> = vec![(-half, half); n];
    let min_half_diag = half * 1e-3;
    let phi0 = net.phi0();
    let mut queue = VecDeque::from([root]);
    let mut kept: Vec<Vec<Interval>> = Vec::new();
    let mut evals = 0;
    while let Some(b) = queue.pop_front() {
        let centre: Vec<f64> = b.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
        let hd = 0.5 * b.iter().map(|(lo, hi)| (hi - lo).powi(2)).sum::<f64>().sqrt();
        evals += 1;
        if net.value_with(&centre, phi0) - l_v * hd > r {
            continue;
        }
        if hd <= min_half_diag || evals + queue.len() >= budget {
            kept.push(b);
            continue;
        }
        let (axis, _) = b
            .iter()
            .enumerate()
            .map(|(k, (lo, hi))| (k, hi - lo))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        let mid = centre[axis];
        let mut left = b.clone();
        left[axis].1 = mid;
        let mut right = b;
        right[axis].0 = mid;
        queue.push_back(left);
        queue.push_back(right);
    }
    let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); n];
    for b in &kept {
        hull(&mut out, b);
    }
    if kept.is_empty() {
        // Only reachable when V(0) > r, which V(0) = 0 rules out.
        out = vec![(0.0, 0.0); n];
    }
    out
}

/// Upper bound on `max_i V_i` over the initial boxes: grid maximum plus the
/// Lipschitz margin of the cell.
pub fn vmax_initial(cert: &Certificate, initial: &AgentBoxes, delta: f64, cap: u64) -> Result<f64> {
    let lv = cert.v_lipschitz();
    let mut best: f64 = 0.0;
    for (i, b) in initial.iter().enumerate() {
        let eq = &cert.equilibria[i];
        let local: Vec<Interval> = b.iter().zip(eq).map(|((lo, hi), e)| (lo - e, hi - e)).collect();
        let grid = BoxGrid::new(&local, delta);
        if grid.count() > cap as u128 {
            return Err(Error::Config(format!(
                "initial box of agent {i} needs {} grid points, above the cap {cap}",
                grid.count()
            )));
        }
        let net = cert.v_net(i);
        let phi0 = net.phi0();
        let m = chunks(grid.count() as u64)
            .into_par_iter()
            .map(|(s, e)| (s..e).map(|idx| net.value_with(&grid.point(idx), phi0)).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max);
        best = best.max(m + lv[cert.v_classes[i]] * grid.half_diagonal());
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Local closed loop

/// Frozen view of one agent's local closed loop in error coordinates, with
/// per-slot Lyapunov candidates and coupling gains.
pub struct LocalProblem<'a> {
    pub agent: usize,
    pub layout: LocalLayout,
    system: &'a InterconnectedSystem,
    policy: &'a PolicyNet,
    nets: Vec<&'a LyapunovNet>,
    phi0: Vec<f64>,
    /// Lipschitz bound of each slot's candidate.
    pub l_v: Vec<f64>,
    /// `gamma_{i, slot}`.
    pub gammas: Vec<f64>,
    eqs: Vec<&'a [f64]>,
    r0: Vec<f64>,
    p: f64,
    psi: f64,
}

impl<'a> LocalProblem<'a> {
    pub fn new(cert: &'a Certificate, system: &'a InterconnectedSystem, i: usize) -> Self {
        let layout = LocalLayout::new(system, i);
        let lv = cert.v_lipschitz();
        let nets: Vec<&LyapunovNet> = layout.slots.iter().map(|j| cert.v_net(*j)).collect();
        Self {
            agent: i,
            system,
            policy: cert.policy(i),
            phi0: nets.iter().map(|n| n.phi0()).collect(),
            nets,
            l_v: layout.slots.iter().map(|j| lv[cert.v_classes[*j]]).collect(),
            gammas: layout.slots.iter().map(|j| cert.gamma_at(i, *j)).collect(),
            eqs: layout.slots.iter().map(|j| cert.equilibria[*j].as_slice()).collect(),
            r0: cert.policy(i).residual0(),
            p: cert.constants.p,
            psi: cert.constants.psi,
            layout,
        }
    }

    pub fn v(&self, slot: usize, e: &[f64]) -> f64 {
        self.nets[slot].value_with(e, self.phi0[slot])
    }

    /// `V_i` at the closed-loop successor; `nbrs` are the delayed neighbour
    /// errors in slot order.
    pub fn v_next(&self, own: &[f64], nbrs: &[&[f64]], d: &[f64]) -> f64 {
        let u = self.policy.eval_with(&PolicyNet::stack(own, nbrs), &self.r0);
        let abs = |e: &[f64], eq: &[f64]| -> Vec<f64> { e.iter().zip(eq).map(|(a, b)| a + b).collect() };
        let x = abs(own, self.eqs[0]);
        let nb: Vec<Vec<f64>> = nbrs.iter().enumerate().map(|(s, e)| abs(e, self.eqs[s + 1])).collect();
        let nb_refs: Vec<&[f64]> = nb.iter().map(Vec::as_slice).collect();
        let next = self.system.agents[self.agent].dynamics.step(&x, &u, &nb_refs, d);
        let e: Vec<f64> = next.iter().zip(self.eqs[0]).map(|(a, b)| a - b).collect();
        self.v(0, &e)
    }

    /// Lipschitz bound of the closed-loop step `L_f sqrt(1 + L_pi^2)`.
    pub fn closed_loop_lipschitz(&self) -> f64 {
        self.system.agents[self.agent].lipschitz_f * (1.0 + self.policy.lipschitz().powi(2)).sqrt()
    }

    /// `(gamma_ij, L_Vj)` over the closed neighbourhood.
    pub fn coupling(&self) -> Vec<(f64, f64)> {
        self.gammas.iter().copied().zip(self.l_v.iter().copied()).collect()
    }

    /// Converts a local error vector (history then disturbance) to absolute
    /// coordinates.
    pub fn to_absolute(&self, mut z: Vec<f64>) -> Vec<f64> {
        for s in 0..self.layout.slot_count() {
            for lag in 0..self.layout.depth {
                for (v, e) in z[self.layout.block(s, lag)].iter_mut().zip(self.eqs[s]) {
                    *v += e;
                }
            }
        }
        z
    }

    /// Converts an absolute local domain to error coordinates.
    pub fn error_domain(&self, intervals: &[Interval]) -> Vec<Interval> {
        let mut out = intervals.to_vec();
        for s in 0..self.layout.slot_count() {
            for lag in 0..self.layout.depth {
                for (v, e) in out[self.layout.block(s, lag)].iter_mut().zip(self.eqs[s]) {
                    *v = (v.0 - e, v.1 - e);
                }
            }
        }
        out
    }

    fn block_id(&self, slot: usize, lag: usize) -> usize {
        slot * self.layout.depth + lag
    }
}

/// Grids of every `(slot, lag)` block and of the disturbance.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGrid {
    pub blocks: Vec<BoxGrid>,
    pub disturbance: BoxGrid,
}

impl LocalGrid {
    pub fn new(layout: &LocalLayout, domain: &[Interval], delta: f64) -> Self {
        let mut blocks = Vec::with_capacity(layout.slot_count() * layout.depth);
        for s in 0..layout.slot_count() {
            for lag in 0..layout.depth {
                blocks.push(BoxGrid::new(&domain[layout.block(s, lag)], delta));
            }
        }
        Self {
            blocks,
            disturbance: BoxGrid::new(&domain[layout.disturbance_range()], delta),
        }
    }

    pub fn count(&self) -> u128 {
        self.blocks
            .iter()
            .fold(self.disturbance.count(), |acc, b| acc.saturating_mul(b.count()))
    }

    pub fn half_diagonal(&self) -> f64 {
        joint_half_diagonal(self.blocks.iter().chain(std::iter::once(&self.disturbance)))
    }
}

fn block_values(p: &LocalProblem, slot: usize, grid: &BoxGrid) -> Vec<f64> {
    let n = grid.count() as u64;
    chunks(n)
        .into_par_iter()
        .flat_map_iter(|(s, e)| (s..e).map(move |idx| p.v(slot, &grid.point(idx))))
        .collect()
}

fn argmin(vals: &[f64], keep: impl Fn(f64) -> bool) -> Option<(f64, u64)> {
    let mut best: Option<(f64, u64)> = None;
    for (i, v) in vals.iter().enumerate() {
        if keep(*v) && best.is_none_or(|b| *v < b.0) {
            best = Some((*v, i as u64));
        }
    }
    best
}

/// Mixed-radix decomposition, last radix fastest.
fn decode(mut idx: u64, radices: &[u64], out: &mut [u64]) {
    for (o, r) in out.iter_mut().zip(radices).rev() {
        *o = idx % r;
        idx /= r;
    }
}

/// Sampled Razumikhin disjunction at one grid point: passes iff
/// `p V_i - max_lagged < -lh_eps` or `V_next <= coupled + psi_d - delta`.
/// Returns the pass flag and `min(a, b)` where `a`, `b` are the two
/// violation measures.
pub fn stage1_condition(p: f64, v_i: f64, max_lagged: f64, lh_eps: f64, v_next: f64, coupled: f64, psi_d: f64, delta: f64) -> (bool, f64) {
    let a = if max_lagged == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        p * v_i - max_lagged + lh_eps
    };
    let b = v_next - coupled - psi_d + delta;
    (a < 0.0 || b <= 0.0, a.min(b))
}

/// Outside check on one step's domain grid.
///
/// Enumeration is factored: the successor only depends on the own lag-0
/// block, the neighbour blocks at their delays and the disturbance. Blocks
/// outside that set enter the disjunction monotonically, so for each
/// combination the worst case over them is taken in closed form (minimum `V`
/// for free lagged blocks, minimum coupling sum subject to the point lying
/// outside `{V_max <= R}` for neighbour lag-0 blocks). The verdict equals
/// that of the full grid.
pub fn stage1_verify(
    p: &LocalProblem,
    grid: &LocalGrid,
    k: usize,
    margins: &AgentMargins,
    r: f64,
    cap: u64,
    cex_cap: usize,
) -> TaskOutcome {
    let agent = p.agent;
    let total = grid.count();
    if total > cap as u128 {
        return TaskOutcome::capped(agent, Some(k), total);
    }
    let lay = &p.layout;
    let slots = lay.slot_count();
    let depth = lay.depth;
    let vals: Vec<Vec<f64>> = (0..slots * depth)
        .map(|b| block_values(p, b / depth, &grid.blocks[b]))
        .collect();
    let is_dyn = |s: usize, lag: usize| if s == 0 { lag == 0 } else { lag == lay.delays[s] };

    // Free lagged blocks: minimum V and where it is attained.
    let mut free_lagged = Vec::new();
    for s in 0..slots {
        for lag in 1..depth {
            if !is_dyn(s, lag) {
                let b = p.block_id(s, lag);
                free_lagged.push((b, argmin(&vals[b], |_| true).expect("grids are nonempty")));
            }
        }
    }
    let lagged_floor = free_lagged.iter().map(|(_, (v, _))| *v).fold(f64::NEG_INFINITY, f64::max);
    let mut free_total: u128 = free_lagged.iter().map(|(b, _)| grid.blocks[*b].count()).product();
    let mut inside_total = free_total;

    // Neighbour lag-0 blocks: smallest V overall and above R.
    struct Zero {
        block: usize,
        min_all: (f64, u64),
        min_above: Option<(f64, u64)>,
    }
    let mut zeros = Vec::new();
    for s in 1..slots {
        let b = p.block_id(s, 0);
        zeros.push(Zero {
            block: b,
            min_all: argmin(&vals[b], |_| true).expect("grids are nonempty"),
            min_above: argmin(&vals[b], |v| v > r),
        });
        free_total *= grid.blocks[b].count();
        inside_total *= vals[b].iter().filter(|v| **v <= r).count() as u128;
    }

    let mut radices = vec![grid.blocks[p.block_id(0, 0)].count() as u64];
    for s in 1..slots {
        radices.push(grid.blocks[p.block_id(s, lay.delays[s])].count() as u64);
    }
    radices.push(grid.disturbance.count() as u64);
    let combos: u64 = radices.iter().product();
    let dgrid = &grid.disturbance;
    let (lh_eps, delta) = (margins.l_h * margins.eps_out[k], margins.delta_out[k]);

    let parts: Vec<(f64, u128, Vec<Counterexample>)> = chunks(combos)
        .into_par_iter()
        .map(|(start, end)| {
            let mut digits = vec![0u64; radices.len()];
            let mut worst = f64::NEG_INFINITY;
            let mut checked = 0u128;
            let mut cex = Vec::new();
            for idx in start..end {
                decode(idx, &radices, &mut digits);
                let v_i = vals[p.block_id(0, 0)][digits[0] as usize];
                // Pick neighbour lag-0 values minimizing the coupling sum.
                let choice: Vec<(f64, u64)> = if v_i > r || zeros.is_empty() {
                    if v_i <= r {
                        continue;
                    }
                    zeros.iter().map(|z| z.min_all).collect()
                } else {
                    let base: f64 = zeros.iter().zip(&p.gammas[1..]).map(|(z, g)| g * z.min_all.0).sum();
                    let best = zeros
                        .iter()
                        .enumerate()
                        .filter_map(|(t, z)| z.min_above.map(|a| (t, base + p.gammas[t + 1] * (a.0 - z.min_all.0))))
                        .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                            Some(a) if a.1 <= x.1 => Some(a),
                            _ => Some(x),
                        });
                    let Some((t, _)) = best else { continue };
                    zeros
                        .iter()
                        .enumerate()
                        .map(|(u, z)| if u == t { z.min_above.expect("chosen above R") } else { z.min_all })
                        .collect()
                };
                checked += if v_i > r { free_total } else { free_total - inside_total };
                let coupled: f64 =
                    p.gammas[0] * v_i + choice.iter().zip(&p.gammas[1..]).map(|(c, g)| g * c.0).sum::<f64>();
                let own = grid.blocks[p.block_id(0, 0)].point(digits[0]);
                let nbr_pts: Vec<Vec<f64>> = (1..slots)
                    .map(|s| grid.blocks[p.block_id(s, lay.delays[s])].point(digits[s]))
                    .collect();
                let mut max_lagged = lagged_floor;
                for s in 1..slots {
                    if lay.delays[s] >= 1 {
                        max_lagged = max_lagged.max(vals[p.block_id(s, lay.delays[s])][digits[s] as usize]);
                    }
                }
                let d = dgrid.point(digits[slots]);
                let nbr_refs: Vec<&[f64]> = nbr_pts.iter().map(Vec::as_slice).collect();
                let v_next = p.v_next(&own, &nbr_refs, &d);
                let (ok, res) = stage1_condition(p.p, v_i, max_lagged, lh_eps, v_next, coupled, p.psi * norm(&d), delta);
                worst = worst.max(res);
                if !ok && cex.len() < cex_cap {
                    let mut z = vec![0.0; lay.dim()];
                    z[lay.block(0, 0)].copy_from_slice(&own);
                    for s in 1..slots {
                        z[lay.block(s, lay.delays[s])].copy_from_slice(&nbr_pts[s - 1]);
                    }
                    for (b, (_, at)) in &free_lagged {
                        let (s, lag) = (b / depth, b % depth);
                        z[lay.block(s, lag)].copy_from_slice(&grid.blocks[*b].point(*at));
                    }
                    for (zr, c) in zeros.iter().zip(&choice) {
                        let (s, lag) = (zr.block / depth, zr.block % depth);
                        z[lay.block(s, lag)].copy_from_slice(&grid.blocks[zr.block].point(c.1));
                    }
                    z[lay.disturbance_range()].copy_from_slice(&d);
                    let a = p.p * v_i - max_lagged + lh_eps;
                    cex.push(Counterexample {
                        agent,
                        k: Some(k),
                        condition: Condition::Stage1,
                        z: p.to_absolute(z),
                        residuals: vec![a, v_next - coupled - p.psi * norm(&d) + delta],
                    });
                }
            }
            (worst, checked, cex)
        })
        .collect();
    let checked = parts.iter().map(|p| p.1).sum();
    let (worst, cex) = merge(parts.into_iter().map(|(w, _, c)| (w, c)).collect(), cex_cap);
    TaskOutcome::finish(agent, Some(k), total, checked, worst, cex)
}

/// Which inside condition Stage 2 enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage2Condition {
    /// `V_i(next) <= R - L_Vi L_fi eps_in` whenever the agent and the
    /// neighbour states it reads lie in `{V <= R}`.
    #[default]
    Invariance,
    /// `V_i(next) <= sum_j gamma_ij V_j + psi ||d|| - delta_in` on the whole
    /// inside box.
    Decrement,
}

/// Inside grids: one box per slot (in error coordinates) and the
/// disturbance box.
#[derive(Debug, Clone, PartialEq)]
pub struct InsideGrid {
    pub slots: Vec<BoxGrid>,
    pub disturbance: BoxGrid,
    pub condition: Stage2Condition,
}

impl InsideGrid {
    pub fn new(boxes: &[Vec<Interval>], disturbance: &[Interval], delta: f64, condition: Stage2Condition) -> Self {
        Self {
            slots: boxes.iter().map(|b| BoxGrid::new(b, delta)).collect(),
            disturbance: BoxGrid::new(disturbance, delta),
            condition,
        }
    }

    /// Neighbour slots appear twice in decrement mode (delayed and lag 0).
    fn neighbour_multiplicity(&self) -> u32 {
        match self.condition {
            Stage2Condition::Invariance => 1,
            Stage2Condition::Decrement => 2,
        }
    }

    pub fn count(&self) -> u128 {
        let m = self.neighbour_multiplicity();
        self.slots
            .iter()
            .skip(1)
            .fold(self.slots[0].count().saturating_mul(self.disturbance.count()), |acc, g| {
                acc.saturating_mul(g.count().saturating_pow(m))
            })
    }

    pub fn half_diagonal(&self) -> f64 {
        let m = self.neighbour_multiplicity() as f64;
        (self.slots[0].half_sq() + self.disturbance.half_sq() + m * self.slots.iter().skip(1).map(BoxGrid::half_sq).sum::<f64>())
            .sqrt()
    }
}

/// Inside check, once per agent.
pub fn stage2_verify(p: &LocalProblem, grid: &InsideGrid, margins: &AgentMargins, r: f64, cap: u64, cex_cap: usize) -> TaskOutcome {
    let agent = p.agent;
    let total = grid.count();
    if total > cap as u128 {
        return TaskOutcome::capped(agent, None, total);
    }
    let lay = &p.layout;
    let slots = lay.slot_count();
    let vals: Vec<Vec<f64>> = (0..slots).map(|s| block_values(p, s, &grid.slots[s])).collect();
    let invariance = grid.condition == Stage2Condition::Invariance;
    // Candidate indices per slot: for invariance only cells that can meet
    // `{V <= R}`.
    let lists: Vec<Vec<u64>> = (0..slots)
        .map(|s| {
            let bound = r + p.l_v[s] * grid.slots[s].half_diagonal();
            (0..vals[s].len() as u64)
                .filter(|i| !invariance || vals[s][*i as usize] <= bound)
                .collect()
        })
        .collect();
    let lag0_min: Vec<(f64, u64)> = vals.iter().map(|v| argmin(v, |_| true).expect("grids are nonempty")).collect();
    let mut radices: Vec<u64> = lists.iter().map(|l| l.len() as u64).collect();
    radices.push(grid.disturbance.count() as u64);
    let combos: u64 = radices.iter().product();
    let lag0_factor: u128 = if invariance {
        1
    } else {
        grid.slots.iter().skip(1).map(BoxGrid::count).product()
    };
    let parts: Vec<(f64, Vec<Counterexample>)> = chunks(combos)
        .into_par_iter()
        .map(|(start, end)| {
            let mut digits = vec![0u64; radices.len()];
            let mut worst = f64::NEG_INFINITY;
            let mut cex = Vec::new();
            for idx in start..end {
                decode(idx, &radices, &mut digits);
                let pts: Vec<Vec<f64>> = (0..slots).map(|s| grid.slots[s].point(lists[s][digits[s] as usize])).collect();
                let d = grid.disturbance.point(digits[slots]);
                let refs: Vec<&[f64]> = pts[1..].iter().map(Vec::as_slice).collect();
                let v_next = p.v_next(&pts[0], &refs, &d);
                let (res, cond) = if invariance {
                    (v_next - r + margins.invariance_margin(), Condition::Stage2Invariance)
                } else {
                    let v_i = vals[0][lists[0][digits[0] as usize] as usize];
                    let coupled = p.gammas[0] * v_i
                        + (1..slots).map(|s| p.gammas[s] * lag0_min[s].0).sum::<f64>();
                    (v_next - coupled - p.psi * norm(&d) + margins.delta_in, Condition::Stage2Decrement)
                };
                worst = worst.max(res);
                if res > 0.0 && cex.len() < cex_cap {
                    let mut z = vec![0.0; lay.dim()];
                    for (s, pt) in pts.iter().enumerate() {
                        for lag in 0..lay.depth {
                            z[lay.block(s, lag)].copy_from_slice(pt);
                        }
                        if !invariance && s > 0 && lay.delays[s] != 0 {
                            z[lay.block(s, 0)].copy_from_slice(&grid.slots[s].point(lag0_min[s].1));
                        }
                    }
                    z[lay.disturbance_range()].copy_from_slice(&d);
                    cex.push(Counterexample {
                        agent,
                        k: None,
                        condition: cond,
                        z: p.to_absolute(z),
                        residuals: vec![res],
                    });
                }
            }
            (worst, cex)
        })
        .collect();
    let checked = combos as u128 * lag0_factor;
    let (worst, cex) = merge(parts, cex_cap);
    TaskOutcome::finish(agent, None, total, checked, worst, cex)
}

// ---------------------------------------------------------------------------
// Verification groups and the full pipeline

/// Agents whose local checks are identical up to their domains: same
/// dynamics label, candidate, policy, equilibrium, disturbance box and
/// self-gain, and the same `(candidate, delay, gain, equilibrium)` sequence
/// over their neighbours. With `reduce = false` every agent is its own group.
pub fn verification_groups(cert: &Certificate, system: &InterconnectedSystem, reduce: bool) -> Vec<Vec<usize>> {
    let n = system.agent_count();
    if !reduce {
        return (0..n).map(|i| vec![i]).collect();
    }
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    let key = |i: usize| {
        let a = &system.agents[i];
        let nbrs: Vec<_> = system
            .graph
            .neighbors(i)
            .iter()
            .map(|e| {
                (
                    cert.v_classes[e.from],
                    e.delay,
                    cert.gamma_at(i, e.from).to_bits(),
                    bits(&cert.equilibria[e.from]),
                )
            })
            .collect();
        let w: Vec<f64> = a.disturbance_box.iter().flat_map(|(lo, hi)| [*lo, *hi]).collect();
        format!(
            "{}|{}|{}|{:?}|{}|{:?}|{}|{:?}",
            a.label,
            cert.v_classes[i],
            cert.policy_classes[i],
            bits(&cert.equilibria[i]),
            a.lipschitz_f.to_bits(),
            bits(&w),
            cert.gamma_at(i, i).to_bits(),
            nbrs
        )
    };
    let mut keys: Vec<String> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let k = key(i);
        match keys.iter().position(|x| *x == k) {
            Some(g) => groups[g].push(i),
            None => {
                keys.push(k);
                groups.push(vec![i]);
            }
        }
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyOptions {
    /// Radius `R` of the target sublevel set.
    pub radius: f64,
    /// Replaces the computed decay rate.
    pub rho_override: Option<f64>,
    /// Replaces the computed horizon.
    pub t_r_override: Option<usize>,
    pub grids: GridOptions,
    pub reach: ReachOptions,
    /// Multiplier (at least 1) on the minimal margins.
    pub slack: f64,
    /// Counterexamples kept per task and in the report.
    pub cex_cap: usize,
    pub stage2: Stage2Condition,
    /// Check one representative per verification group.
    pub reduce: bool,
    /// Evaluation budget of the sublevel box refinement.
    pub sublevel_budget: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            radius: 0.15,
            rho_override: None,
            t_r_override: None,
            grids: GridOptions::default(),
            reach: ReachOptions::default(),
            slack: 1.0,
            cex_cap: 1024,
            stage2: Stage2Condition::default(),
            reduce: true,
            sublevel_budget: 1 << 16,
        }
    }
}

pub const ENVELOPE_CAVEAT: &str = "outside checks cover a sampled and inflated reachability envelope; \
     the verdict is sound relative to that envelope, not to a guaranteed reach set";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub verdict: Verdict,
    pub radius: f64,
    pub min_radius: f64,
    pub rho: f64,
    pub c: f64,
    pub vmax0: f64,
    pub t_r: usize,
    pub constants: CertificateConstants,
    pub grids: GridOptions,
    pub stage2_condition: Stage2Condition,
    pub envelope_caveat: bool,
    pub caveat: String,
    /// Verification groups; the first member is the representative.
    pub groups: Vec<Vec<usize>>,
    pub margins: Vec<AgentMargins>,
    /// Per candidate class.
    pub classk: Vec<TaskStats>,
    pub stage1: Vec<TaskStats>,
    pub stage2: Vec<TaskStats>,
    pub counterexamples: Vec<Counterexample>,
}

impl VerificationReport {
    pub fn total_counterexamples(&self) -> usize {
        self.classk
            .iter()
            .chain(&self.stage1)
            .chain(&self.stage2)
            .map(|t| t.counterexamples)
            .sum()
    }

    pub fn write_json<W: std::io::Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Decay rate, overshoot constant, initial bound and horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub rho: f64,
    pub c: f64,
    pub vmax0: f64,
    pub t_r: usize,
}

pub fn schedule(cert: &Certificate, system: &InterconnectedSystem, initial: &AgentBoxes, opts: &VerifyOptions) -> Result<Schedule> {
    let (mut rho, c) = compute_rho_c(cert.constants.p, cert.constants.epsilon, system.tau_max())?;
    if let Some(r) = opts.rho_override {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!("rho override must lie in (0, 1), got {r}")));
        }
        rho = r;
    }
    let vmax0 = vmax_initial(cert, initial, opts.grids.delta_out, opts.grids.point_cap)?;
    let t_r = opts.t_r_override.unwrap_or_else(|| compute_tr(opts.radius, c, vmax0, rho));
    Ok(Schedule { rho, c, vmax0, t_r })
}

/// Full two-stage verification; see [`verify_with_envelope`].
pub fn verify_certificate(
    cert: &Certificate,
    system: &InterconnectedSystem,
    initial: &AgentBoxes,
    opts: &VerifyOptions,
    seed: u64,
) -> Result<VerificationReport> {
    verify_with_envelope(cert, system, initial, opts, seed).map(|(r, _)| r)
}

/// Runs the class-K checks, builds the reachability envelope over
/// `0..=T_R`, runs Stage 1 for every group and step and Stage 2 once per
/// group. Returns the report and the envelope it was checked against.
pub fn verify_with_envelope(
    cert: &Certificate,
    system: &InterconnectedSystem,
    initial: &AgentBoxes,
    opts: &VerifyOptions,
    seed: u64,
) -> Result<(VerificationReport, ReachEnvelope)> {
    cert.constants.validate()?;
    cert.check_against(system)?;
    check_boxes(system, initial)?;
    opts.grids.validate()?;
    let r = opts.radius;
    let min_r = min_radius(&cert.constants, system);
    if !(r > 0.0) || r < min_r {
        return Err(Error::RadiusTooSmall { r, min_r });
    }
    let sched = schedule(cert, system, initial, opts)?;
    let env = build_envelope(system, cert, initial, sched.t_r, &opts.reach, seed)?;
    let report = verify_on_envelope(cert, system, &env, sched, opts)?;
    Ok((report, env))
}

/// Verification against a given envelope and schedule.
pub fn verify_on_envelope(
    cert: &Certificate,
    system: &InterconnectedSystem,
    env: &ReachEnvelope,
    sched: Schedule,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let r = opts.radius;
    let cap = opts.grids.point_cap;
    let lv = cert.v_lipschitz();
    let groups = verification_groups(cert, system, opts.reduce);
    let horizon = sched.t_r.min(env.horizon());

    // Sublevel boxes per candidate class.
    let inside: Vec<Vec<Interval>> = cert
        .v_nets
        .iter()
        .zip(&lv)
        .map(|(net, l)| sublevel_box(net, r, *l, opts.sublevel_budget))
        .collect();

    // Class-K checks on the hull of every agent's envelope and the inside box.
    let mut classk = Vec::new();
    let mut cex = Vec::new();
    for (class, net) in cert.v_nets.iter().enumerate() {
        let mut dom: Option<Vec<Interval>> = None;
        for i in (0..system.agent_count()).filter(|i| cert.v_classes[*i] == class) {
            let h: Vec<Interval> = env
                .agent_hull(i)
                .iter()
                .zip(&cert.equilibria[i])
                .map(|((lo, hi), e)| (lo - e, hi - e))
                .collect();
            match dom.as_mut() {
                Some(d) => hull(d, &h),
                None => dom = Some(h),
            }
        }
        let mut dom = dom.unwrap_or_else(|| inside[class].clone());
        hull(&mut dom, &inside[class]);
        let rep = cert.v_classes.iter().position(|c| *c == class).unwrap_or(0);
        let out = classk_check(
            rep,
            net,
            &dom,
            cert.constants.a1,
            cert.constants.a2,
            opts.grids.delta_out,
            lv[class],
            cap,
            opts.cex_cap,
        );
        classk.push(out.stats);
        cex.extend(out.counterexamples);
    }

    let mut stage1 = Vec::new();
    let mut stage2 = Vec::new();
    let mut margins = Vec::new();
    for members in &groups {
        let rep = members[0];
        let problem = LocalProblem::new(cert, system, rep);
        let lay = &problem.layout;
        let mut grids = Vec::with_capacity(horizon + 1);
        for k in 0..=horizon {
            let mut dom: Option<Vec<Interval>> = None;
            for &m in members {
                let abs = local_domain(env, system, m, k)?;
                let err = LocalProblem::new(cert, system, m).error_domain(&abs.intervals);
                match dom.as_mut() {
                    Some(d) => hull(d, &err),
                    None => dom = Some(err),
                }
            }
            grids.push(LocalGrid::new(lay, &dom.expect("groups are nonempty"), opts.grids.delta_out));
        }
        let boxes: Vec<Vec<Interval>> = lay.slots.iter().map(|j| inside[cert.v_classes[*j]].clone()).collect();
        let w = &system.agents[rep].disturbance_box;
        let inner = InsideGrid::new(&boxes, w, opts.grids.delta_in, opts.stage2);
        let eps_out: Vec<f64> = grids.iter().map(LocalGrid::half_diagonal).collect();
        let m = compute_margins(
            rep,
            &cert.constants,
            &problem.coupling(),
            problem.l_v[0],
            problem.closed_loop_lipschitz(),
            &eps_out,
            inner.half_diagonal(),
            opts.slack,
        )?;
        for (k, g) in grids.iter().enumerate() {
            let out = stage1_verify(&problem, g, k, &m, r, cap, opts.cex_cap);
            stage1.push(out.stats);
            cex.extend(out.counterexamples);
        }
        let out = stage2_verify(&problem, &inner, &m, r, cap, opts.cex_cap);
        stage2.push(out.stats);
        cex.extend(out.counterexamples);
        margins.push(m);
    }

    let all = classk.iter().chain(&stage1).chain(&stage2);
    let verdict = if all.clone().any(|t| t.status == TaskStatus::Fail) {
        Verdict::Refuted
    } else if all.clone().any(|t| t.status == TaskStatus::Cap) {
        Verdict::InconclusiveCap
    } else {
        Verdict::Verified
    };
    cex.truncate(opts.cex_cap);
    Ok(VerificationReport {
        verdict,
        radius: r,
        min_radius: min_radius(&cert.constants, system),
        rho: sched.rho,
        c: sched.c,
        vmax0: sched.vmax0,
        t_r: sched.t_r,
        constants: cert.constants,
        grids: opts.grids,
        stage2_condition: opts.stage2,
        envelope_caveat: true,
        caveat: ENVELOPE_CAVEAT.into(),
        groups,
        margins,
        classk,
        stage1,
        stage2,
        counterexamples: cex,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{toy_system, ToyParams};
    use crate::certificate::CertificateLayout;
    use crate::neural::Mlp;
    use crate::system::InterconnectionGraph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_v(c: f64) -> LyapunovNet {
        LyapunovNet {
            floor: c,
            phi: Mlp::zeros(&[1, 1]),
        }
    }

    fn toy_cert(graph: InterconnectionGraph, params: ToyParams, hidden: &[usize], seed: u64) -> (InterconnectedSystem, Certificate) {
        let (sys, nominal) = toy_system(graph, &params).unwrap();
        let n = sys.agent_count();
        let layout = CertificateLayout {
            v_classes: vec![0; n],
            policy_classes: (0..n).map(|i| sys.graph.neighbors(i).len()).collect::<Vec<_>>(),
            v_hidden: hidden.to_vec(),
            pi_hidden: hidden.to_vec(),
        };
        // Policy classes must be dense: map neighbour counts to ids.
        let mut ids: Vec<usize> = layout.policy_classes.clone();
        ids.sort();
        ids.dedup();
        let layout = CertificateLayout {
            policy_classes: layout.policy_classes.iter().map(|c| ids.iter().position(|x| x == c).unwrap()).collect(),
            ..layout
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cert = Certificate::init(&sys, &nominal, CertificateConstants::default(), &layout, &mut rng).unwrap();
        (sys, cert)
    }

    #[test]
    fn rho_examples() {
        let (rho, c) = compute_rho_c(1.01, 0.05, 5).unwrap();
        assert!((rho - 0.998343).abs() < 1e-6);
        assert_eq!(c, 1.01);
        assert!((compute_rho_c(2.0, 0.5, 0).unwrap().0 - 0.5).abs() < 1e-15);
        assert!(compute_rho_c(1.0, 0.05, 5).is_err());
        assert!(compute_rho_c(1.01, 1.0, 5).is_err());
    }

    #[test]
    fn horizon_examples() {
        assert_eq!(compute_tr(0.15, 1.01, 1.0, 0.95), 38);
        assert_eq!(compute_tr(2.0, 1.01, 1.0, 0.95), 0);
    }

    #[test]
    fn margin_examples() {
        let k = CertificateConstants::default();
        let m = compute_margins(0, &k, &[(0.4, 2.0), (0.0, 3.0)], 2.0, 1.0, &[0.1], 0.0, 1.0).unwrap();
        assert!((m.l_h - 5.02).abs() < 1e-12);
        let m = compute_margins(0, &k, &[(0.4, 2.0), (0.3, 3.0)], 2.0, 1.5, &[0.1], 0.05, 1.0).unwrap();
        assert!((m.l_r - 4.8).abs() < 1e-12);
        assert!((m.delta_out[0] - 0.48).abs() < 1e-12);
        let zero = compute_margins(0, &k, &[(0.4, 0.0)], 0.0, 0.0, &[0.1], 0.1, 1.0).unwrap();
        assert_eq!(zero.l_h, 0.0);
        assert!((zero.l_r - k.psi).abs() < 1e-15);
        assert!(compute_margins(0, &k, &[], 1.0, 1.0, &[], 0.0, 0.5).is_err());
    }

    #[test]
    fn radius_precondition() {
        let params = ToyParams {
            w: 0.05,
            ..ToyParams::default()
        };
        let (sys, _) = toy_system(InterconnectionGraph::new(1, &[]).unwrap(), &params).unwrap();
        let k = CertificateConstants::default();
        assert!((min_radius(&k, &sys) - 0.1).abs() < 1e-12);
        let k0 = CertificateConstants { psi: 0.0, ..k };
        assert_eq!(min_radius(&k0, &sys), 0.0);
    }

    #[test]
    fn axis_uses_cell_centres() {
        let a = Axis::new(0.0, 1.0, 0.3);
        assert_eq!(a.count, 4);
        assert!((a.point(0) - 0.125).abs() < 1e-15 && (a.point(3) - 0.875).abs() < 1e-15);
        let d = Axis::new(0.5, 0.5, 0.1);
        assert_eq!((d.count, d.point(0)), (1, 0.5));
    }

    #[test]
    fn classk_examples() {
        let v = linear_v(5.0);
        let out = classk_check(0, &v, &[(-1.0, 1.0)], 0.01, 10.0, 0.01, 5.0, 1_000_000, 16);
        assert_eq!(out.stats.status, TaskStatus::Pass);
        let zero = linear_v(0.0);
        let out = classk_check(0, &zero, &[(-1.0, 1.0)], 0.01, 10.0, 0.01, 0.0, 1_000_000, 16);
        assert_eq!(out.stats.status, TaskStatus::Fail);
        assert_eq!(out.counterexamples[0].condition, Condition::ClassKLower);
        let origin = classk_check(0, &zero, &[(0.0, 0.0)], 0.01, 10.0, 0.01, 0.0, 1_000_000, 16);
        assert_eq!(origin.stats.status, TaskStatus::Pass);
        let steep = linear_v(20.0);
        let out = classk_check(0, &steep, &[(-1.0, 1.0)], 0.01, 10.0, 0.01, 20.0, 1_000_000, 16);
        assert_eq!(out.counterexamples[0].condition, Condition::ClassKUpper);
        let capped = classk_check(0, &zero, &[(-1.0, 1.0)], 0.01, 10.0, 0.01, 0.0, 10, 16);
        assert_eq!(capped.stats.status, TaskStatus::Cap);
    }

    #[test]
    fn stage1_condition_examples() {
        // First disjunct dominates.
        assert!(stage1_condition(1.01, 0.0, 10.0, 0.1255, 100.0, 0.0, 0.0, 1.0).0);
        // Constant candidate v = 1 with row sum 0.95: decrement residual 0.05.
        let (ok, _) = stage1_condition(1.01, 1.0, 1.0, 0.0, 1.0, 0.95, 0.0, 0.0);
        assert!(!ok);
        // No lagged states: only the decrement counts.
        assert!(stage1_condition(1.01, 1.0, f64::NEG_INFINITY, 0.0, 0.5, 0.95, 0.0, 0.0).0);
    }

    #[test]
    fn sublevel_box_of_scaled_norm() {
        let b = sublevel_box(&linear_v(2.0), 1.0, 2.0, 1 << 12);
        assert!(b[0].0 <= -0.5 && b[0].1 >= 0.5);
        assert!(b[0].0 > -0.51 && b[0].1 < 0.51, "{b:?}");
    }

    #[test]
    fn stage2_decrement_example() {
        let params = ToyParams {
            a: 0.5,
            c: 0.0,
            b: 0.0,
            k: 0.0,
            w: 0.0,
        };
        let (sys, mut cert) = toy_cert(InterconnectionGraph::new(1, &[]).unwrap(), params, &[4], 1);
        cert.v_nets[0] = linear_v(1.0);
        cert.gamma = vec![0.6];
        let p = LocalProblem::new(&cert, &sys, 0);
        let mut m = compute_margins(0, &cert.constants, &p.coupling(), 1.0, 0.5, &[], 0.005, 1.0).unwrap();
        m.delta_in = 0.05;
        let far = InsideGrid::new(&[vec![(0.5, 2.0)]], &[(0.0, 0.0)], 0.01, Stage2Condition::Decrement);
        let out = stage2_verify(&p, &far, &m, 0.15, 1_000_000, 8);
        assert_eq!(out.stats.status, TaskStatus::Pass);
        let near = InsideGrid::new(&[vec![(-2.0, 2.0)]], &[(0.0, 0.0)], 0.01, Stage2Condition::Decrement);
        let out = stage2_verify(&p, &near, &m, 0.15, 1_000_000, 8);
        assert_eq!(out.stats.status, TaskStatus::Fail);
        assert!(out.counterexamples.iter().all(|c| c.z[0].abs() < 0.5));
    }

    /// Full-product sweep of the outside check, for comparison with the
    /// factored enumeration.
    fn brute_stage1(p: &LocalProblem, grid: &LocalGrid, lh_eps: f64, delta: f64, r: f64) -> (f64, bool, u128) {
        let lay = &p.layout;
        let mut radices: Vec<u64> = grid.blocks.iter().map(|b| b.count() as u64).collect();
        radices.push(grid.disturbance.count() as u64);
        let total: u64 = radices.iter().product();
        let mut digits = vec![0; radices.len()];
        let (mut worst, mut fail, mut checked) = (f64::NEG_INFINITY, false, 0u128);
        for idx in 0..total {
            decode(idx, &radices, &mut digits);
            let pt = |s: usize, lag: usize| grid.blocks[s * lay.depth + lag].point(digits[s * lay.depth + lag]);
            let lag0: Vec<f64> = (0..lay.slot_count()).map(|s| p.v(s, &pt(s, 0))).collect();
            if lag0.iter().all(|v| *v <= r) {
                continue;
            }
            checked += 1;
            let mut lagged = f64::NEG_INFINITY;
            for s in 0..lay.slot_count() {
                for lag in 1..lay.depth {
                    lagged = lagged.max(p.v(s, &pt(s, lag)));
                }
            }
            let nbrs: Vec<Vec<f64>> = (1..lay.slot_count()).map(|s| pt(s, lay.delays[s])).collect();
            let refs: Vec<&[f64]> = nbrs.iter().map(Vec::as_slice).collect();
            let d = grid.disturbance.point(digits[radices.len() - 1]);
            let v_next = p.v_next(&pt(0, 0), &refs, &d);
            let coupled: f64 = lag0.iter().zip(&p.gammas).map(|(v, g)| v * g).sum();
            let (ok, res) = stage1_condition(p.p, lag0[0], lagged, lh_eps, v_next, coupled, p.psi * norm(&d), delta);
            worst = worst.max(res);
            fail |= !ok;
        }
        (worst, fail, checked)
    }

    #[test]
    fn factored_outside_check_matches_full_sweep() {
        let mut outcomes = (0, 0);
        for seed in 0..6 {
            let tau = 1 + seed as usize % 2;
            let graph = InterconnectionGraph::bichain(2, tau, tau).unwrap();
            let params = ToyParams {
                w: 0.05,
                ..ToyParams::default()
            };
            let (sys, mut cert) = toy_cert(graph, params, &[6], 100 + seed);
            // Undo the small output init so the candidates are visibly nonlinear.
            for net in &mut cert.v_nets {
                if let Some(last) = net.phi.layers_mut().last_mut() {
                    last.weight.iter_mut().for_each(|w| *w /= crate::certificate::PHI_OUTPUT_INIT_SCALE);
                }
            }
            let p = LocalProblem::new(&cert, &sys, 1);
            let lay = &p.layout;
            let mut dom = vec![(-0.6, 0.9); lay.dim()];
            dom[lay.disturbance_range()][0] = (-0.05, 0.05);
            let grid = LocalGrid::new(lay, &dom, 0.3);
            let (lh_eps, delta, r) = (0.01 * seed as f64, 0.02, 0.02 + 0.03 * seed as f64);
            let m = AgentMargins {
                agent: 1,
                l_h: lh_eps,
                l_r: 0.0,
                l_vi: 0.0,
                l_fi: 0.0,
                eps_out: vec![1.0],
                eps_in: 0.0,
                delta_out: vec![delta],
                delta_in: 0.0,
            };
            let fast = stage1_verify(&p, &grid, 0, &m, r, u64::MAX, 4);
            let (worst, fail, checked) = brute_stage1(&p, &grid, lh_eps, delta, r);
            if fail {
                outcomes.0 += 1;
            } else {
                outcomes.1 += 1;
            }
            assert_eq!(fast.stats.status == TaskStatus::Fail, fail, "seed {seed}");
            assert_eq!(fast.stats.checked as u128, checked, "seed {seed}");
            let w = fast.stats.worst_residual.unwrap_or(f64::NEG_INFINITY);
            assert!((w - worst).abs() < 1e-9 || (w == worst), "seed {seed}: {w} vs {worst}");
            for c in &fast.counterexamples {
                assert_eq!(c.z.len(), lay.dim());
                assert!(c.residuals[0] >= 0.0 && c.residuals[1] > 0.0);
            }
        }
        assert!(outcomes.0 > 0 && outcomes.1 > 0, "{outcomes:?}");
    }

    #[test]
    fn groups_follow_topology() {
        let (sys, cert) = toy_cert(InterconnectionGraph::bichain(5, 1, 1).unwrap(), ToyParams::default(), &[4], 3);
        let g = verification_groups(&cert, &sys, true);
        // Ends share a key only if their single neighbour gains agree; they
        // do under uniform initial gains.
        assert_eq!(g.iter().map(Vec::len).sum::<usize>(), 5);
        assert_eq!(g.len(), 2);
        assert_eq!(verification_groups(&cert, &sys, false).len(), 5);
    }

    #[test]
    fn too_small_radius_is_rejected() {
        let (sys, cert) = toy_cert(InterconnectionGraph::bichain(2, 1, 1).unwrap(), ToyParams::default(), &[4], 3);
        let opts = VerifyOptions {
            radius: 0.01,
            ..VerifyOptions::default()
        };
        let init = vec![vec![(-0.5, 0.5)]; 2];
        assert!(matches!(
            verify_certificate(&cert, &sys, &init, &opts, 0),
            Err(Error::RadiusTooSmall { .. })
        ));
    }
}
