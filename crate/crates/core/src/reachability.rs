//! Sampled over-approximations of delay-embedded reachable sets.
//!
//! Closed-loop rollouts from an initial box are hulled per time step and
//! inflated. The result is an outer approximation only relative to the
//! sampling: it is a heuristic, not a guaranteed reach set.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synthesis::{check_boxes, AgentBoxes};
use crate::system::{closed_loop_step, fmt_f64, pad_history, Controller, DelayHistory, InterconnectedSystem, LocalLayout};

pub type Interval = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReachOptions {
    pub samples: usize,
    pub eta: f64,
    /// Sample box corners before interior points.
    pub corners: bool,
}

impl Default for ReachOptions {
    fn default() -> Self {
        Self {
            samples: 4096,
            eta: 0.05,
            corners: true,
        }
    }
}

const MIN_WIDENING: f64 = 1e-6;
const MAX_CORNER_BITS: usize = 12;

/// Per step `k = 0..=horizon`, a box over the stacked delay history
/// (lag-major: all agents at lag 0, then all agents at lag 1, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ReachEnvelope {
    pub boxes: Vec<Vec<Interval>>,
    pub eta: f64,
    pub samples: usize,
    pub depth: usize,
    pub global_dim: usize,
    offsets: Vec<usize>,
    dims: Vec<usize>,
}

impl ReachEnvelope {
    pub fn horizon(&self) -> usize {
        self.boxes.len() - 1
    }

    fn index(&self, j: usize, s: usize) -> usize {
        s * self.global_dim + self.offsets[j]
    }

    /// Coordinates of agent `j` at lag `s` in the box at step `k`.
    pub fn project(&self, k: usize, j: usize, s: usize) -> Result<Vec<Interval>> {
        if k >= self.boxes.len() || s >= self.depth || j >= self.dims.len() {
            return Err(Error::Index(format!(
                "projection (k={k}, agent={j}, lag={s}) outside horizon {}, depth {}, {} agents",
                self.horizon(),
                self.depth,
                self.dims.len()
            )));
        }
        let start = self.index(j, s);
        Ok(self.boxes[k][start..start + self.dims[j]].to_vec())
    }

    /// Hull of agent `j` over every step and lag.
    pub fn agent_hull(&self, j: usize) -> Vec<Interval> {
        let mut hull = vec![(f64::INFINITY, f64::NEG_INFINITY); self.dims[j]];
        for b in &self.boxes {
            for s in 0..self.depth {
                let start = self.index(j, s);
                for (h, iv) in hull.iter_mut().zip(&b[start..start + self.dims[j]]) {
                    h.0 = h.0.min(iv.0);
                    h.1 = h.1.max(iv.1);
                }
            }
        }
        hull
    }

    pub fn contains(&self, k: usize, stacked: &[f64]) -> bool {
        self.boxes[k]
            .iter()
            .zip(stacked)
            .all(|((lo, hi), x)| lo <= x && x <= hi)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "coord", "lo", "hi"])?;
        for (k, b) in self.boxes.iter().enumerate() {
            for (c, (lo, hi)) in b.iter().enumerate() {
                w.write_record([k.to_string(), c.to_string(), fmt_f64(*lo), fmt_f64(*hi)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Intervals of agent `i`'s local coordinates at step `k`, in the order of
/// [`LocalLayout`], with the disturbance box appended.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDelayDomain {
    pub agent: usize,
    pub k: usize,
    pub intervals: Vec<Interval>,
}

impl LocalDelayDomain {
    pub fn dim(&self) -> usize {
        self.intervals.len()
    }
}

pub fn local_domain(env: &ReachEnvelope, system: &InterconnectedSystem, i: usize, k: usize) -> Result<LocalDelayDomain> {
    let layout = LocalLayout::new(system, i);
    let mut intervals = Vec::with_capacity(layout.dim());
    for &j in &layout.slots {
        for s in 0..layout.depth {
            intervals.extend(env.project(k, j, s)?);
        }
    }
    intervals.extend(system.agents[i].disturbance_box.iter().copied());
    Ok(LocalDelayDomain { agent: i, k, intervals })
}

/// `(tau_max + 1) * sum_{j in E_i + i} n_j + n_d`.
pub fn local_dim(system: &InterconnectedSystem, i: usize) -> usize {
    let depth = system.tau_max() + 1;
    system
        .graph
        .closed_neighborhood(i)
        .iter()
        .map(|j| system.agents[*j].state_dim)
        .sum::<usize>()
        * depth
        + system.agents[i].disturbance_dim()
}

fn flatten(boxes: &AgentBoxes) -> Vec<Interval> {
    boxes.iter().flatten().copied().collect()
}

/// Initial lag-0 states: box corners first (up to 2^12 of them), the rest
/// uniform in the box.
fn initial_point(flat: &[Interval], idx: usize, corners: usize, rng_seed: u64) -> Vec<f64> {
    if idx < corners {
        let bits = corners.trailing_zeros() as usize;
        flat.iter()
            .enumerate()
            .map(|(c, (lo, hi))| if (idx >> (c % bits.max(1))) & 1 == 1 && bits > 0 { *hi } else { *lo })
            .collect()
    } else {
        let mut r = rng::stream(rng_seed, "reach", idx as u64);
        flat.iter()
            .map(|(lo, hi)| if lo < hi { r.gen_range(*lo..=*hi) } else { *lo })
            .collect()
    }
}

fn unflatten(system: &InterconnectedSystem, flat: &[f64]) -> Vec<Vec<f64>> {
    let offsets = system.offsets();
    system
        .agents
        .iter()
        .zip(offsets)
        .map(|(a, o)| flat[o..o + a.state_dim].to_vec())
        .collect()
}

fn corner_count(dim: usize, corners: bool) -> usize {
    if corners {
        1usize << dim.min(MAX_CORNER_BITS)
    } else {
        0
    }
}

/// Zero-disturbance closed-loop rollouts of `horizon` steps, hulled per step
/// and widened by `eta * width / 2` per side (at least `1e-6`).
pub fn build_envelope(
    system: &InterconnectedSystem,
    controller: &dyn Controller,
    initial: &AgentBoxes,
    horizon: usize,
    opts: &ReachOptions,
    seed: u64,
) -> Result<ReachEnvelope> {
    check_boxes(system, initial)?;
    if opts.samples < 2 || !(opts.eta >= 0.0) {
        return Err(Error::Config("reachability needs at least two samples and a nonnegative inflation".into()));
    }
    let flat = flatten(initial);
    let corners = corner_count(flat.len(), opts.corners);
    if opts.samples < corners {
        return Err(Error::Config(format!(
            "{} reachability samples cannot cover the {corners} box corners",
            opts.samples
        )));
    }
    let depth = system.tau_max() + 1;
    let dim = depth * system.global_dim();
    let zero = system.zero_disturbance();
    let empty = || vec![vec![(f64::INFINITY, f64::NEG_INFINITY); dim]; horizon + 1];
    let chunk = 64;
    let parts: Vec<Result<Vec<Vec<Interval>>>> = (0..opts.samples.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut acc = empty();
            for idx in c * chunk..((c + 1) * chunk).min(opts.samples) {
                let x0 = initial_point(&flat, idx, corners, seed);
                let mut h = pad_history(system, &unflatten(system, &x0))?;
                absorb(&mut acc[0], &h);
                for slot in acc.iter_mut().skip(1) {
                    h = closed_loop_step(system, controller, &h, &zero)?.0;
                    absorb(slot, &h);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut boxes = empty();
    for p in parts {
        for (b, q) in boxes.iter_mut().zip(p?) {
            for (x, y) in b.iter_mut().zip(q) {
                x.0 = x.0.min(y.0);
                x.1 = x.1.max(y.1);
            }
        }
    }
    for b in &mut boxes {
        for iv in b.iter_mut() {
            let widen = (opts.eta * (iv.1 - iv.0) / 2.0).max(MIN_WIDENING);
            *iv = (iv.0 - widen, iv.1 + widen);
        }
    }
    Ok(ReachEnvelope {
        boxes,
        eta: opts.eta,
        samples: opts.samples,
        depth,
        global_dim: system.global_dim(),
        offsets: system.offsets(),
        dims: system.agents.iter().map(|a| a.state_dim).collect(),
    })
}

fn absorb(b: &mut [Interval], h: &DelayHistory) {
    for (iv, x) in b.iter_mut().zip(h.stacked()) {
        iv.0 = iv.0.min(x);
        iv.1 = iv.1.max(x);
    }
}

/// Number of fresh uniform rollouts that leave the envelope at some step.
pub fn containment_violations(
    env: &ReachEnvelope,
    system: &InterconnectedSystem,
    controller: &dyn Controller,
    initial: &AgentBoxes,
    samples: usize,
    seed: u64,
) -> Result<usize> {
    let flat = flatten(initial);
    let zero = system.zero_disturbance();
    let results: Vec<Result<bool>> = (0..samples)
        .into_par_iter()
        .map(|idx| {
            let x0 = initial_point(&flat, idx, 0, seed);
            let mut h = pad_history(system, &unflatten(system, &x0))?;
            if !env.contains(0, &h.stacked()) {
                return Ok(true);
            }
            for k in 1..=env.horizon() {
                h = closed_loop_step(system, controller, &h, &zero)?.0;
                if !env.contains(k, &h.stacked()) {
                    return Ok(true);
                }
            }
            Ok(false)
        })
        .collect();
    let mut count = 0;
    for r in results {
        count += r? as usize;
    }
    Ok(count)
}
