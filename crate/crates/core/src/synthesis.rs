//! Training data, coupling-gain parameterization, the three-term synthesis
//! loss with exact gradients, and the mini-batch SGD trainer.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::{norm, Certificate, LyapunovEval};
use crate::error::{Error, Result};
use crate::neural::{step_decay, GradientBuffer};
use crate::rng;
use crate::system::{
    closed_loop_step, pad_history, Controller, DelayHistory, InterconnectedSystem, InterconnectionGraph, LocalLayout,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateConstants {
    pub p: f64,
    pub epsilon: f64,
    pub psi: f64,
    pub a1: f64,
    pub a2: f64,
    pub eps_p: f64,
    pub eps_d: f64,
}

impl Default for CertificateConstants {
    fn default() -> Self {
        Self {
            p: 1.01,
            epsilon: 0.05,
            psi: 0.1,
            a1: 0.01,
            a2: 10.0,
            eps_p: 1e-3,
            eps_d: 1e-6,
        }
    }
}

impl CertificateConstants {
    pub fn validate(&self) -> Result<()> {
        let ok = self.p > 1.0
            && self.epsilon > 0.0
            && self.epsilon < 1.0
            && self.psi >= 0.0
            && self.a1 > 0.0
            && self.a2 > self.a1
            && self.eps_p >= 0.0
            && self.eps_d >= 0.0
            && [self.p, self.epsilon, self.psi, self.a1, self.a2, self.eps_p, self.eps_d]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Constants(format!(
                "need p > 1, 0 < epsilon < 1, psi >= 0, 0 < a1 < a2 and nonnegative margins; got {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_imi: f64,
    pub w_p: f64,
    pub w_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_imi: 1.0,
            w_p: 4000.0,
            w_d: 2000.0,
        }
    }
}

/// Learnable coupling gains. `mask[i][j]` marks `j in E_i` plus the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingGains {
    pub n: usize,
    pub gamma_pure: Vec<f64>,
    pub mask: Vec<bool>,
    pub epsilon: f64,
}

impl CouplingGains {
    /// Every admissible entry of row `i` starts at `0.9 (1 - epsilon) / (|E_i| + 1)`.
    pub fn uniform(graph: &InterconnectionGraph, epsilon: f64) -> Self {
        let n = graph.agent_count();
        let mut mask = vec![false; n * n];
        let mut gamma_pure = vec![0.0; n * n];
        for i in 0..n {
            let row = graph.closed_neighborhood(i);
            let v = 0.9 * (1.0 - epsilon) / row.len() as f64;
            for j in row {
                mask[i * n + j] = true;
                gamma_pure[i * n + j] = v;
            }
        }
        Self {
            n,
            gamma_pure,
            mask,
            epsilon,
        }
    }

    pub fn mask_for(graph: &InterconnectionGraph) -> Vec<bool> {
        Self::uniform(graph, 0.5).mask
    }

    pub fn project(&self) -> Vec<f64> {
        project_gains(&self.gamma_pure, &self.mask, self.n, self.epsilon)
    }

    /// Pulls a gradient with respect to the projected matrix back to
    /// `gamma_pure`. The row scale is differentiated on its active branch.
    pub fn backward(&self, d_gamma: &[f64]) -> Vec<f64> {
        let n = self.n;
        let cap = 1.0 - self.epsilon;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = i * n..(i + 1) * n;
            let a: Vec<f64> = row
                .clone()
                .map(|k| if self.mask[k] { self.gamma_pure[k].max(0.0) } else { 0.0 })
                .collect();
            let s: f64 = a.iter().sum();
            let g = &d_gamma[row.clone()];
            let da: Vec<f64> = if s > cap {
                let dot: f64 = g.iter().zip(&a).map(|(x, y)| x * y).sum();
                g.iter().map(|gk| cap / s * (gk - dot / s)).collect()
            } else {
                g.to_vec()
            };
            for (c, k) in row.enumerate() {
                if self.mask[k] && self.gamma_pure[k] > 0.0 {
                    out[k] = da[c];
                }
            }
        }
        out
    }
}

/// `Gamma = Q(ReLU(gamma_pure) o mask)`: each row is scaled by
/// `min(1, (1 - epsilon) / row_sum)`.
pub fn project_gains(gamma_pure: &[f64], mask: &[bool], n: usize, epsilon: f64) -> Vec<f64> {
    let cap = 1.0 - epsilon;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = i * n..(i + 1) * n;
        let mut s = 0.0;
        for k in row.clone() {
            if mask[k] {
                out[k] = gamma_pure[k].max(0.0);
                s += out[k];
            }
        }
        if s > cap {
            let scale = cap / s;
            for k in row {
                out[k] *= scale;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Rollout,
    Counterexample,
}

/// One agent-level transition. `history` follows the agent's
/// [`LocalLayout`] (absolute coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub agent: usize,
    pub history: Vec<f64>,
    pub control: Vec<f64>,
    pub disturbance: Vec<f64>,
    pub next: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub train: Vec<Transition>,
    pub validation: Vec<Transition>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per agent, per coordinate `(lo, hi)` in absolute coordinates.
pub type AgentBoxes = Vec<Vec<(f64, f64)>>;

/// Box of half-width `dev` around every agent's equilibrium.
pub fn boxes_around_equilibrium(system: &InterconnectedSystem, dev: f64) -> AgentBoxes {
    system
        .agents
        .iter()
        .map(|a| a.equilibrium.iter().map(|x| (x - dev, x + dev)).collect())
        .collect()
}

pub fn check_boxes(system: &InterconnectedSystem, boxes: &AgentBoxes) -> Result<()> {
    if boxes.len() != system.agent_count() {
        return Err(Error::Config(format!(
            "initial box lists {} agents, system has {}",
            boxes.len(),
            system.agent_count()
        )));
    }
    for (i, (b, a)) in boxes.iter().zip(&system.agents).enumerate() {
        if b.len() != a.state_dim {
            return Err(Error::Dimension {
                agent: i,
                field: "initial box",
                expected: a.state_dim,
                got: b.len(),
            });
        }
        if b.iter().any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::Config(format!("initial box of agent {i} is empty or unbounded")));
        }
    }
    Ok(())
}

fn sample_box<R: Rng + ?Sized>(boxes: &AgentBoxes, rng: &mut R) -> Vec<Vec<f64>> {
    boxes
        .iter()
        .map(|b| {
            b.iter()
                .map(|(lo, hi)| if lo < hi { rng.gen_range(*lo..=*hi) } else { *lo })
                .collect()
        })
        .collect()
}

/// Agent transitions of one closed-loop step from `history`.
pub fn transitions_from(
    system: &InterconnectedSystem,
    layouts: &[LocalLayout],
    history: &DelayHistory,
    controls: &[Vec<f64>],
    disturbance: &[Vec<f64>],
    next: &DelayHistory,
    provenance: Provenance,
) -> Vec<Transition> {
    (0..system.agent_count())
        .map(|i| Transition {
            agent: i,
            history: layouts[i].extract(history),
            control: controls[i].clone(),
            disturbance: disturbance[i].clone(),
            next: next.state(i, 0).to_vec(),
            provenance,
        })
        .collect()
}

/// Rolls out `count` zero-disturbance trajectories of length `horizon` from
/// initial states drawn uniformly in `initial` (older lags padded with the
/// equilibrium). The first 80% of trajectories train, the rest validate.
pub fn generate_dataset(
    system: &InterconnectedSystem,
    controller: &dyn Controller,
    initial: &AgentBoxes,
    count: usize,
    horizon: usize,
    seed: u64,
) -> Result<TrainingSet> {
    if count == 0 || horizon == 0 {
        return Err(Error::Config("dataset needs at least one trajectory of length one".into()));
    }
    check_boxes(system, initial)?;
    let layouts: Vec<LocalLayout> = (0..system.agent_count()).map(|i| LocalLayout::new(system, i)).collect();
    let zero = system.zero_disturbance();
    let per_traj: Vec<Result<Vec<Transition>>> = (0..count)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, "traj", t as u64);
            let x0 = sample_box(initial, &mut r);
            let mut h = pad_history(system, &x0)?;
            let mut out = Vec::with_capacity(horizon * system.agent_count());
            for _ in 0..horizon {
                let (next, u) = closed_loop_step(system, controller, &h, &zero)?;
                out.extend(transitions_from(system, &layouts, &h, &u, &zero, &next, Provenance::Rollout));
                h = next;
            }
            Ok(out)
        })
        .collect();
    let n_train = if count == 1 { 1 } else { (count * 4).div_ceil(5).min(count - 1) };
    let mut set = TrainingSet::default();
    for (t, r) in per_traj.into_iter().enumerate() {
        let v = r?;
        if t < n_train {
            set.train.extend(v);
        } else {
            set.validation.extend(v);
        }
    }
    Ok(set)
}

/// Razumikhin premise and decrement residuals from already evaluated values.
/// `lagged` holds `V_j(x_{j,k-s})` for `s >= 1`; empty means the premise is
/// vacuous and `con_notA` is `-inf`.
pub fn residuals_from_values(p: f64, v_own: f64, lagged: &[f64], weighted_sum: f64, psi_d: f64, v_next: f64) -> (f64, f64) {
    let con_not_a = lagged
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        - p * v_own;
    let con_b = weighted_sum + psi_d - v_next;
    (con_not_a, con_b)
}

/// Closed-loop next state of the transition's agent under the certificate's
/// current policy.
pub fn closed_loop_next(cert: &Certificate, system: &InterconnectedSystem, layout: &LocalLayout, t: &Transition) -> Vec<f64> {
    let (own, nbrs) = layout.dynamics_inputs(&t.history);
    let u = cert.control_abs(t.agent, own, &nbrs);
    system.agents[t.agent].dynamics.step(own, &u, &nbrs, &t.disturbance)
}

/// `(con_notA, con_B)` of a transition, with the next state recomputed under
/// the current policy.
pub fn razumikhin_residuals(cert: &Certificate, system: &InterconnectedSystem, t: &Transition) -> (f64, f64) {
    let layout = LocalLayout::new(system, t.agent);
    let next = closed_loop_next(cert, system, &layout, t);
    let i = t.agent;
    let mut lagged = Vec::new();
    let mut weighted = 0.0;
    for (slot, &j) in layout.slots.iter().enumerate() {
        weighted += cert.gamma_at(i, j) * cert.v(j, &t.history[layout.block(slot, 0)]);
        for s in 1..layout.depth {
            lagged.push(cert.v(j, &t.history[layout.block(slot, s)]));
        }
    }
    let v_own = cert.v(i, &t.history[layout.block(0, 0)]);
    residuals_from_values(
        cert.constants.p,
        v_own,
        &lagged,
        weighted,
        cert.constants.psi * norm(&t.disturbance),
        cert.v(i, &next),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub imi: f64,
    pub p: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub v: Vec<GradientBuffer>,
    pub pi: Vec<GradientBuffer>,
    pub gamma_pure: Vec<f64>,
}

impl LossGradients {
    pub fn zeros(cert: &Certificate) -> Self {
        Self {
            v: cert.v_nets.iter().map(|v| GradientBuffer::zeros_like(&v.phi)).collect(),
            pi: cert.policies.iter().map(|p| GradientBuffer::zeros_like(&p.residual)).collect(),
            gamma_pure: vec![0.0; cert.gamma.len()],
        }
    }

    fn add(&mut self, other: &LossGradients) {
        for (a, b) in self.v.iter_mut().zip(&other.v) {
            a.add_scaled(b, 1.0);
        }
        for (a, b) in self.pi.iter_mut().zip(&other.pi) {
            a.add_scaled(b, 1.0);
        }
        for (a, b) in self.gamma_pure.iter_mut().zip(&other.gamma_pure) {
            *a += b;
        }
    }

    /// Same order as [`certificate_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.v {
            out.extend(g.flat());
        }
        for g in &self.pi {
            out.extend(g.flat());
        }
        out.extend_from_slice(&self.gamma_pure);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }
}

/// Trainable parameters: Lyapunov nets, policy residuals, `gamma_pure`.
pub fn certificate_params(cert: &Certificate) -> Vec<f64> {
    let mut out = Vec::new();
    for v in &cert.v_nets {
        out.extend(v.phi.params_flat());
    }
    for p in &cert.policies {
        out.extend(p.residual.params_flat());
    }
    out.extend_from_slice(&cert.gains.gamma_pure);
    out
}

pub fn set_certificate_params(cert: &mut Certificate, params: &[f64]) {
    let mut at = 0;
    for v in &mut cert.v_nets {
        let k = v.phi.num_params();
        v.phi.set_params_flat(&params[at..at + k]);
        at += k;
    }
    for p in &mut cert.policies {
        let k = p.residual.num_params();
        p.residual.set_params_flat(&params[at..at + k]);
        at += k;
    }
    let k = cert.gains.gamma_pure.len();
    cert.gains.gamma_pure.copy_from_slice(&params[at..at + k]);
    cert.refresh_gamma();
}

/// Finite-difference Jacobian `df/du` (columns per input coordinate).
fn control_jacobian(system: &InterconnectedSystem, i: usize, own: &[f64], u: &[f64], nbrs: &[&[f64]], d: &[f64]) -> Vec<Vec<f64>> {
    let f = &system.agents[i].dynamics;
    (0..u.len())
        .map(|c| {
            let h = 1e-6 * u[c].abs().max(1.0);
            let mut up = u.to_vec();
            up[c] += h;
            let mut um = u.to_vec();
            um[c] -= h;
            let fp = f.step(own, &up, nbrs, d);
            let fm = f.step(own, &um, nbrs, d);
            fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        })
        .collect()
}

struct SampleOut {
    breakdown: LossBreakdown,
    grads: Option<LossGradients>,
    /// Coefficients of `phi(0)` per Lyapunov class.
    phi0: Vec<f64>,
    /// Coefficients of `r(0)` per policy class.
    r0: Vec<Vec<f64>>,
}

struct BatchContext<'a> {
    cert: &'a Certificate,
    system: &'a InterconnectedSystem,
    layouts: Vec<LocalLayout>,
    weights: LossWeights,
    phi0: Vec<f64>,
    r0: Vec<Vec<f64>>,
    scale: f64,
    with_grads: bool,
    freeze_policy: bool,
}

impl BatchContext<'_> {
    fn sample(&self, t: &Transition) -> SampleOut {
        let cert = self.cert;
        let c = &cert.constants;
        let w = &self.weights;
        let i = t.agent;
        let layout = &self.layouts[i];
        let vc_i = cert.v_classes[i];
        let pc_i = cert.policy_classes[i];
        let mut grads = self.with_grads.then(|| LossGradients::zeros(cert));
        let mut phi0 = vec![0.0; cert.v_nets.len()];
        let mut r0 = vec![Vec::new(); cert.policies.len()];

        // Lyapunov values on every (slot, lag) block.
        let evals: Vec<Vec<(Vec<f64>, LyapunovEval)>> = layout
            .slots
            .iter()
            .enumerate()
            .map(|(slot, &j)| {
                let net = cert.v_net(j);
                (0..layout.depth)
                    .map(|s| {
                        let e = cert.error(j, &t.history[layout.block(slot, s)]);
                        let ev = net.eval(&e, self.phi0[cert.v_classes[j]]);
                        (e, ev)
                    })
                    .collect()
            })
            .collect();

        // Closed-loop next state under the current policy.
        let (own, nbrs) = layout.dynamics_inputs(&t.history);
        let e_own = cert.error(i, own);
        let e_nbrs: Vec<Vec<f64>> = nbrs
            .iter()
            .zip(&layout.slots[1..])
            .map(|(x, j)| cert.error(*j, x))
            .collect();
        let refs: Vec<&[f64]> = e_nbrs.iter().map(Vec::as_slice).collect();
        let pi = cert.policy(i);
        let z = crate::certificate::PolicyNet::stack(&e_own, &refs);
        let rcache = pi.residual.forward_cached(&z);
        let dev: Vec<f64> = rcache.output().iter().zip(&self.r0[pc_i]).map(|(a, b)| a - b).collect();
        let u: Vec<f64> = pi.nominal_part(&z).iter().zip(&dev).map(|(a, b)| a + b).collect();
        let f = &self.system.agents[i].dynamics;
        let next = f.step(own, &u, &nbrs, &t.disturbance);
        let e_next = cert.error(i, &next);
        let v_i = cert.v_net(i);
        let ev_next = v_i.eval(&e_next, self.phi0[vc_i]);

        // Imitation.
        let imi = norm(&dev);
        let mut du = vec![0.0; u.len()];
        let mut d_dev = vec![0.0; dev.len()];
        if imi > 0.0 {
            for (g, x) in d_dev.iter_mut().zip(&dev) {
                *g += w.w_imi * self.scale * x / imi;
            }
        }

        // Class-K bounds at the current own state.
        let own_eval = &evals[0][0].1;
        let en = norm(&evals[0][0].0);
        let lower = c.a1 * en - own_eval.value + c.eps_p;
        let upper = own_eval.value - c.a2 * en + c.eps_p;
        let lp = lower.max(0.0) + upper.max(0.0);
        let mut d_own_v = 0.0;
        if lower > 0.0 {
            d_own_v -= w.w_p * self.scale;
        }
        if upper > 0.0 {
            d_own_v += w.w_p * self.scale;
        }

        // Razumikhin premise (exact max, lowest agent id then lag on ties)
        // and decrement.
        let mut best: Option<(usize, usize, usize, f64)> = None;
        for (slot, &j) in layout.slots.iter().enumerate() {
            for s in 1..layout.depth {
                let v = evals[slot][s].1.value;
                let better = match best {
                    None => true,
                    Some((bj, bs, _, bv)) => v > bv || (v == bv && (j, s) < (bj, bs)),
                };
                if better {
                    best = Some((j, s, slot, v));
                }
            }
        }
        let con_not_a = best.map_or(f64::NEG_INFINITY, |b| b.3) - c.p * own_eval.value;
        let weighted: f64 = layout
            .slots
            .iter()
            .enumerate()
            .map(|(slot, &j)| cert.gamma_at(i, j) * evals[slot][0].1.value)
            .sum();
        let con_b = weighted + c.psi * norm(&t.disturbance) - ev_next.value;
        let hinge = -con_not_a.max(con_b) + c.eps_d;
        let ld = hinge.max(0.0);

        let mut d_next_v = 0.0;
        let mut d_lag: Option<(usize, usize, f64)> = None;
        let mut d_lag0 = vec![0.0; layout.slot_count()];
        if let Some(g) = grads.as_mut() {
            if hinge > 0.0 {
                let k = -w.w_d * self.scale;
                if con_not_a > con_b {
                    let (_, s, slot, _) = best.expect("finite premise has an argmax");
                    d_lag = Some((slot, s, k));
                    d_own_v += -c.p * k;
                } else {
                    for (slot, &j) in layout.slots.iter().enumerate() {
                        d_lag0[slot] += k * cert.gamma_at(i, j);
                        g.gamma_pure[i * cert.agent_count() + j] += k * evals[slot][0].1.value;
                    }
                    d_next_v = -k;
                }
            }
            d_lag0[0] += d_own_v;
            for (slot, &j) in layout.slots.iter().enumerate() {
                let net = cert.v_net(j);
                let vc = cert.v_classes[j];
                phi0[vc] += net.accumulate(&evals[slot][0].1, d_lag0[slot], &mut g.v[vc]);
            }
            if let Some((slot, s, k)) = d_lag {
                let j = layout.slots[slot];
                let vc = cert.v_classes[j];
                phi0[vc] += cert.v_net(j).accumulate(&evals[slot][s].1, k, &mut g.v[vc]);
            }
            if d_next_v != 0.0 {
                phi0[vc_i] += v_i.accumulate(&ev_next, d_next_v, &mut g.v[vc_i]);
                if !self.freeze_policy {
                    let gv = v_i.input_grad(&e_next, &ev_next);
                    let jac = control_jacobian(self.system, i, own, &u, &nbrs, &t.disturbance);
                    for (col, du_c) in du.iter_mut().enumerate() {
                        *du_c += d_next_v * jac[col].iter().zip(&gv).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            if !self.freeze_policy {
                let up: Vec<f64> = d_dev.iter().zip(&du).map(|(a, b)| a + b).collect();
                if up.iter().any(|v| *v != 0.0) {
                    let (pg, _) = pi.residual.backward(&rcache, &up);
                    g.pi[pc_i].add_scaled(&pg, 1.0);
                    r0[pc_i] = up.iter().map(|v| -v).collect();
                }
            }
        }

        SampleOut {
            breakdown: LossBreakdown {
                total: self.scale * (w.w_imi * imi + w.w_p * lp + w.w_d * ld),
                imi: self.scale * imi,
                p: self.scale * lp,
                d: self.scale * ld,
            },
            grads,
            phi0,
            r0,
        }
    }
}

/// Options that shape the gradient but not the loss value.
#[derive(Debug, Clone, Default)]
pub struct GradientOptions {
    pub freeze_policy: bool,
    /// Tie key of each `gamma_pure` entry; entries sharing a key receive
    /// their mean gradient. `None` leaves entries independent.
    pub gamma_ties: Option<Vec<usize>>,
}

const CHUNK: usize = 64;

fn batch_context<'a>(
    cert: &'a Certificate,
    system: &'a InterconnectedSystem,
    weights: LossWeights,
    len: usize,
    with_grads: bool,
    freeze_policy: bool,
) -> BatchContext<'a> {
    BatchContext {
        cert,
        system,
        layouts: (0..system.agent_count()).map(|i| LocalLayout::new(system, i)).collect(),
        weights,
        phi0: cert.v_nets.iter().map(|v| v.phi0()).collect(),
        r0: cert.policies.iter().map(|p| p.residual0()).collect(),
        scale: 1.0 / len as f64,
        with_grads,
        freeze_policy,
    }
}

/// Mean loss over `batch` together with its gradient.
pub fn total_loss(
    batch: &[&Transition],
    cert: &Certificate,
    system: &InterconnectedSystem,
    weights: LossWeights,
    opts: &GradientOptions,
) -> Result<(LossBreakdown, LossGradients)> {
    if batch.is_empty() {
        return Err(Error::Config("loss needs a nonempty batch".into()));
    }
    let ctx = batch_context(cert, system, weights, batch.len(), true, opts.freeze_policy);
    let parts: Vec<SampleOut> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc: Option<SampleOut> = None;
            for t in chunk {
                let s = ctx.sample(t);
                acc = Some(match acc {
                    None => s,
                    Some(a) => merge(a, s),
                });
            }
            acc.expect("chunks are nonempty")
        })
        .collect();
    let mut total = parts.into_iter().reduce(merge).expect("batch is nonempty");
    let mut grads = total.grads.take().expect("gradients requested");
    for (c, coeff) in total.phi0.iter().enumerate() {
        cert.v_nets[c].accumulate_phi0(*coeff, &mut grads.v[c]);
    }
    for (c, coeff) in total.r0.iter().enumerate() {
        if coeff.iter().any(|v| *v != 0.0) {
            let pi = &cert.policies[c];
            let cache = pi.residual.forward_cached(&vec![0.0; pi.input_dim()]);
            let (g, _) = pi.residual.backward(&cache, coeff);
            grads.pi[c].add_scaled(&g, 1.0);
        }
    }
    let dg = std::mem::take(&mut grads.gamma_pure);
    grads.gamma_pure = cert.gains.backward(&dg);
    if let Some(ties) = &opts.gamma_ties {
        tie_average(&mut grads.gamma_pure, ties);
    }
    Ok((total.breakdown, grads))
}

/// Mean loss over `batch` without gradients.
pub fn loss_value(batch: &[&Transition], cert: &Certificate, system: &InterconnectedSystem, weights: LossWeights) -> LossBreakdown {
    if batch.is_empty() {
        return LossBreakdown::default();
    }
    let ctx = batch_context(cert, system, weights, batch.len(), false, true);
    let parts: Vec<LossBreakdown> = batch
        .par_chunks(CHUNK)
        .map(|chunk| chunk.iter().map(|t| ctx.sample(t).breakdown).fold(LossBreakdown::default(), add_breakdown))
        .collect();
    parts.into_iter().fold(LossBreakdown::default(), add_breakdown)
}

fn add_breakdown(a: LossBreakdown, b: LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        total: a.total + b.total,
        imi: a.imi + b.imi,
        p: a.p + b.p,
        d: a.d + b.d,
    }
}

fn merge(mut a: SampleOut, b: SampleOut) -> SampleOut {
    a.breakdown = add_breakdown(a.breakdown, b.breakdown);
    if let (Some(ga), Some(gb)) = (a.grads.as_mut(), b.grads.as_ref()) {
        ga.add(gb);
    }
    for (x, y) in a.phi0.iter_mut().zip(&b.phi0) {
        *x += y;
    }
    for (x, y) in a.r0.iter_mut().zip(b.r0) {
        if x.is_empty() {
            *x = y;
        } else if !y.is_empty() {
            for (p, q) in x.iter_mut().zip(y) {
                *p += q;
            }
        }
    }
    a
}

fn tie_average(g: &mut [f64], ties: &[usize]) {
    let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = std::collections::BTreeMap::new();
    for (v, k) in g.iter().zip(ties) {
        if *k != usize::MAX {
            let e = sums.entry(*k).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    for (v, k) in g.iter_mut().zip(ties) {
        if *k != usize::MAX {
            let (s, c) = sums[k];
            *v = s / c as f64;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub decay_every: usize,
    pub freeze_policy: bool,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            batch: 32,
            decay_every: 30,
            freeze_policy: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: Split,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub certificate: Certificate,
    pub curves: Vec<CurvePoint>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

pub fn write_curves<W: Write>(curves: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "split", "l_total", "l_imi", "l_p", "l_d"])?;
    for c in curves {
        w.write_record([
            c.epoch.to_string(),
            match c.split {
                Split::Train => "train".into(),
                Split::Validation => "validation".into(),
            },
            crate::system::fmt_f64(c.loss.total),
            crate::system::fmt_f64(c.loss.imi),
            crate::system::fmt_f64(c.loss.p),
            crate::system::fmt_f64(c.loss.d),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Applies one SGD step of `grads` to the certificate.
pub fn apply_gradients(cert: &mut Certificate, grads: &LossGradients, lr: f64, freeze_policy: bool) {
    for (net, g) in cert.v_nets.iter_mut().zip(&grads.v) {
        net.phi.apply_sgd(g, lr);
    }
    if !freeze_policy {
        for (pi, g) in cert.policies.iter_mut().zip(&grads.pi) {
            pi.residual.apply_sgd(g, lr);
        }
    }
    for (p, g) in cert.gains.gamma_pure.iter_mut().zip(&grads.gamma_pure) {
        *p -= lr * g;
    }
    cert.refresh_gamma();
}

/// Mini-batch SGD with step decay. Returns the snapshot with the lowest
/// validation loss (training loss when there is no validation split).
pub fn train(
    data: &TrainingSet,
    cert: &Certificate,
    system: &InterconnectedSystem,
    weights: LossWeights,
    opts: &TrainOptions,
    gamma_ties: Option<Vec<usize>>,
) -> Result<TrainOutcome> {
    if opts.epochs == 0 {
        return Err(Error::Config("training needs at least one epoch".into()));
    }
    if opts.batch == 0 || !(opts.lr >= 0.0) {
        return Err(Error::Config("batch size must be positive and the learning rate nonnegative".into()));
    }
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let gopts = GradientOptions {
        freeze_policy: opts.freeze_policy,
        gamma_ties,
    };
    let mut current = cert.clone();
    let val_refs: Vec<&Transition> = data.validation.iter().collect();
    let train_refs: Vec<&Transition> = data.train.iter().collect();
    let score = |c: &Certificate| {
        if val_refs.is_empty() {
            loss_value(&train_refs, c, system, weights)
        } else {
            loss_value(&val_refs, c, system, weights)
        }
    };
    let mut best = current.clone();
    let mut best_loss = score(&current).total;
    let mut best_epoch = 0;
    let mut curves = Vec::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..opts.epochs {
        let lr = step_decay(opts.lr, epoch, opts.decay_every);
        let mut r = rng::stream(opts.seed, "epoch", epoch as u64);
        order.shuffle(&mut r);
        let mut running = LossBreakdown::default();
        let mut batches = 0usize;
        for (b, idx) in order.chunks(opts.batch).enumerate() {
            let batch: Vec<&Transition> = idx.iter().map(|k| &data.train[*k]).collect();
            let (loss, grads) = total_loss(&batch, &current, system, weights, &gopts)?;
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b });
            }
            running = add_breakdown(running, loss);
            batches += 1;
            apply_gradients(&mut current, &grads, lr, opts.freeze_policy);
        }
        let inv = 1.0 / batches as f64;
        curves.push(CurvePoint {
            epoch,
            split: Split::Train,
            loss: LossBreakdown {
                total: running.total * inv,
                imi: running.imi * inv,
                p: running.p * inv,
                d: running.d * inv,
            },
        });
        let val = score(&current);
        if !val_refs.is_empty() {
            curves.push(CurvePoint {
                epoch,
                split: Split::Validation,
                loss: val,
            });
        }
        if val.total < best_loss {
            best_loss = val.total;
            best = current.clone();
            best_epoch = epoch + 1;
        }
        log::debug!("epoch {epoch}: train {:.6e} score {:.6e}", running.total * inv, val.total);
    }
    Ok(TrainOutcome {
        certificate: best,
        curves,
        best_epoch,
        best_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{toy_system, ToyParams};
    use crate::certificate::CertificateLayout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_examples() {
        let mask = vec![true, true, true, true];
        let g = project_gains(&[0.5, 0.6, -1.0, -2.0], &mask, 2, 0.1);
        assert!((g[0] - 0.409091).abs() < 1e-6);
        assert!((g[1] - 0.490909).abs() < 1e-6);
        assert!((g[0] + g[1] - 0.9).abs() < 1e-12);
        assert_eq!(&g[2..], &[0.0, 0.0]);
        let g = project_gains(&[0.1, 0.2, 0.0, 0.0], &mask, 2, 0.1);
        assert_eq!(&g[..2], &[0.1, 0.2]);
        let masked = project_gains(&[0.3, 0.3, 0.3, 0.3], &[true, false, true, true], 2, 0.1);
        assert_eq!(masked[1], 0.0);
    }

    #[test]
    fn projection_backward_matches_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let n = 4;
        let mask: Vec<bool> = (0..n * n).map(|k| k % 5 == 0 || r.gen_bool(0.6)).collect();
        let gains = CouplingGains {
            n,
            gamma_pure: (0..n * n).map(|_| r.gen_range(-0.2..0.8)).collect(),
            mask,
            epsilon: 0.1,
        };
        let up: Vec<f64> = (0..n * n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let obj = |gp: &[f64]| -> f64 {
            project_gains(gp, &gains.mask, n, 0.1).iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let an = gains.backward(&up);
        for k in 0..n * n {
            let h = 1e-7;
            let mut p = gains.gamma_pure.clone();
            p[k] += h;
            let mut m = gains.gamma_pure.clone();
            m[k] -= h;
            let fd = (obj(&p) - obj(&m)) / (2.0 * h);
            assert!((fd - an[k]).abs() < 1e-6, "entry {k}: {fd} vs {}", an[k]);
        }
    }

    #[test]
    fn residual_examples() {
        let (na, b) = residuals_from_values(1.01, 2.0, &[2.0, 2.0], 1.0, 0.0, 0.5);
        assert!((na - (2.0 - 2.02)).abs() < 1e-15);
        assert!((b - 0.5).abs() < 1e-15);
        let (_, b) = residuals_from_values(1.01, 1.0, &[], 0.6, 0.0, 0.5);
        assert!((b - 0.1).abs() < 1e-15);
        let (na, _) = residuals_from_values(1.01, 1.0, &[], 0.6, 0.0, 0.5);
        assert_eq!(na, f64::NEG_INFINITY);
        // The decrement hinge vanishes once either side clears the margin.
        let hinge = -(-0.2f64).max(0.1) + 1e-6;
        assert_eq!(hinge.max(0.0), 0.0);
    }

    fn toy() -> (InterconnectedSystem, crate::benchmarks::NominalPolicy) {
        toy_system(InterconnectionGraph::bichain(2, 1, 1).unwrap(), &ToyParams::default()).unwrap()
    }

    fn fresh(system: &InterconnectedSystem, nominal: &crate::benchmarks::NominalPolicy, seed: u64) -> Certificate {
        let layout = CertificateLayout {
            v_classes: vec![0, 0],
            policy_classes: vec![0, 0],
            v_hidden: vec![8],
            pi_hidden: vec![4],
        };
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Certificate::init(system, nominal, CertificateConstants::default(), &layout, &mut r).unwrap()
    }

    #[test]
    fn dataset_shapes_and_determinism() {
        let (sys, nominal) = toy();
        let boxes = boxes_around_equilibrium(&sys, 0.5);
        let one = generate_dataset(&sys, &nominal, &boxes, 1, 1, 3).unwrap();
        assert_eq!(one.train.len(), 2);
        assert!(one.validation.is_empty());
        let a = generate_dataset(&sys, &nominal, &boxes, 10, 5, 3).unwrap();
        let b = generate_dataset(&sys, &nominal, &boxes, 10, 5, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 8 * 5 * 2);
        assert_eq!(a.validation.len(), 2 * 5 * 2);
        assert!(a.train.iter().all(|t| t.history.len() == 2 * 2));
        let mut bad = boxes.clone();
        bad[0][0] = (1.0, -1.0);
        assert!(generate_dataset(&sys, &nominal, &bad, 1, 1, 0).is_err());
    }

    #[test]
    fn equilibrium_dataset_is_fixed_points() {
        let (sys, nominal) = toy();
        let boxes = boxes_around_equilibrium(&sys, 0.0);
        let data = generate_dataset(&sys, &nominal, &boxes, 3, 4, 1).unwrap();
        assert!(data.train.iter().all(|t| t.next == vec![0.0] && t.history.iter().all(|x| *x == 0.0)));
        let cert = fresh(&sys, &nominal, 0);
        for t in &data.train {
            let (_, b) = razumikhin_residuals(&cert, &sys, t);
            assert_eq!(b, 0.0);
        }
    }

    #[test]
    fn zero_weights_leave_parameters_alone() {
        let (sys, nominal) = toy();
        let data = generate_dataset(&sys, &nominal, &boxes_around_equilibrium(&sys, 0.5), 5, 3, 2).unwrap();
        let cert = fresh(&sys, &nominal, 4);
        let w = LossWeights {
            w_imi: 0.0,
            w_p: 0.0,
            w_d: 0.0,
        };
        let refs: Vec<&Transition> = data.train.iter().collect();
        let (loss, grads) = total_loss(&refs, &cert, &sys, w, &GradientOptions::default()).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(grads.flat().iter().all(|g| *g == 0.0));
        let out = train(
            &data,
            &cert,
            &sys,
            w,
            &TrainOptions {
                epochs: 2,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        assert_eq!(certificate_params(&out.certificate), certificate_params(&cert));
        let zero = TrainOptions {
            epochs: 0,
            ..Default::default()
        };
        assert!(train(&data, &cert, &sys, w, &zero, None).is_err());
    }

    #[test]
    fn fresh_policy_has_zero_imitation_loss() {
        let (sys, nominal) = toy();
        let data = generate_dataset(&sys, &nominal, &boxes_around_equilibrium(&sys, 0.5), 4, 3, 2).unwrap();
        let cert = fresh(&sys, &nominal, 5);
        let refs: Vec<&Transition> = data.train.iter().collect();
        assert_eq!(loss_value(&refs, &cert, &sys, LossWeights::default()).imi, 0.0);
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let (sys, nominal) = toy();
        let data = generate_dataset(&sys, &nominal, &boxes_around_equilibrium(&sys, 0.8), 4, 3, 7).unwrap();
        let mut cert = fresh(&sys, &nominal, 8);
        // Move the policy away from the nominal law so every term is active.
        let mut r = ChaCha8Rng::seed_from_u64(1);
        // Nonzero biases keep every ReLU away from its kink at the origin.
        for l in cert.policies[0].residual.layers_mut() {
            l.weight.iter_mut().for_each(|w| *w = r.gen_range(-0.5..0.5));
            l.bias.iter_mut().for_each(|b| *b = r.gen_range(-0.5..0.5));
        }
        for l in cert.v_nets[0].phi.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = r.gen_range(-0.5..0.5));
        }
        let refs: Vec<&Transition> = data.train.iter().take(8).collect();
        let w = LossWeights {
            w_imi: 1.0,
            w_p: 3.0,
            w_d: 2.0,
        };
        let (_, g) = total_loss(&refs, &cert, &sys, w, &GradientOptions::default()).unwrap();
        let an = g.flat();
        let base = certificate_params(&cert);
        let mut worst: f64 = 0.0;
        for k in 0..base.len() {
            let h = 1e-6;
            let mut p = base.clone();
            p[k] += h;
            let mut cp = cert.clone();
            set_certificate_params(&mut cp, &p);
            let lp = loss_value(&refs, &cp, &sys, w).total;
            p[k] -= 2.0 * h;
            set_certificate_params(&mut cp, &p);
            let lm = loss_value(&refs, &cp, &sys, w).total;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - an[k]).abs() / fd.abs().max(an[k].abs()).max(1e-4);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn training_reduces_a_convex_surrogate() {
        let g = InterconnectionGraph::new(1, &[]).unwrap();
        let (sys, nominal) = toy_system(g, &ToyParams::default()).unwrap();
        let data = generate_dataset(&sys, &nominal, &boxes_around_equilibrium(&sys, 1.0), 20, 1, 5).unwrap();
        let layout = CertificateLayout {
            v_classes: vec![0],
            policy_classes: vec![0],
            v_hidden: vec![],
            pi_hidden: vec![2],
        };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut cert = Certificate::init(&sys, &nominal, CertificateConstants::default(), &layout, &mut r).unwrap();
        // Linear phi far above the upper class-K bound: only the upper hinge
        // is active and the loss is convex in the single weight.
        cert.v_nets[0].phi.layers_mut()[0].weight[0] = 30.0;
        let w = LossWeights {
            w_imi: 0.0,
            w_p: 1.0,
            w_d: 0.0,
        };
        let opts = TrainOptions {
            epochs: 10,
            lr: 0.05,
            batch: 1000,
            decay_every: 0,
            ..Default::default()
        };
        let out = train(
            &TrainingSet {
                train: data.train,
                validation: Vec::new(),
            },
            &cert,
            &sys,
            w,
            &opts,
            None,
        )
        .unwrap();
        let losses: Vec<f64> = out.curves.iter().map(|c| c.loss.total).collect();
        assert!(losses.windows(2).all(|p| p[1] <= p[0] + 1e-12), "{losses:?}");
        assert!(losses.last().unwrap() < &losses[0]);
    }
}
