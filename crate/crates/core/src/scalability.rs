//! Structural equivalence of agents and certificate transfer between
//! systems that share local structure.

use serde::{Deserialize, Serialize};

use crate::certificate::Certificate;
use crate::error::{Error, Result};
use crate::synthesis::CouplingGains;
use crate::system::InterconnectedSystem;

/// Local bijection `E_a -> E_b` witnessing that agents `a` and `b` share a
/// class, as `(neighbour of a, neighbour of b)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub a: usize,
    pub b: usize,
    pub mapping: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceClasses {
    /// Members of each class, ascending; the first member represents it.
    pub classes: Vec<Vec<usize>>,
    /// Class id of every agent.
    pub class_of: Vec<usize>,
    /// One witness per non-representative member, against the representative.
    pub witnesses: Vec<Witness>,
}

impl EquivalenceClasses {
    pub fn representatives(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c[0]).collect()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// JSON summary: class id, members and representative.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.classes
                .iter()
                .enumerate()
                .map(|(id, m)| serde_json::json!({"class": id, "members": m, "representative": m[0]}))
                .collect(),
        )
    }
}

fn dense(keys: &[String]) -> Vec<usize> {
    let mut seen: Vec<&String> = Vec::new();
    keys.iter()
        .map(|k| match seen.iter().position(|s| *s == k) {
            Some(c) => c,
            None => {
                seen.push(k);
                seen.len() - 1
            }
        })
        .collect()
}

fn seeds(system: &InterconnectedSystem) -> Vec<usize> {
    let keys: Vec<String> = system
        .agents
        .iter()
        .map(|a| format!("{}|{}|{}|{}", a.label, a.state_dim, a.input_dim, a.disturbance_dim()))
        .collect();
    dense(&keys)
}

/// One refinement round over in-neighbours, optionally also over the agents
/// that read each node.
fn refine(system: &InterconnectedSystem, colour: &[usize], with_dependents: bool) -> Vec<usize> {
    let keys: Vec<String> = (0..system.agent_count())
        .map(|i| {
            let mut nbrs: Vec<(usize, usize)> = system.graph.neighbors(i).iter().map(|e| (colour[e.from], e.delay)).collect();
            nbrs.sort_unstable();
            let mut deps: Vec<(usize, usize)> = if with_dependents {
                system.graph.dependents(i).iter().map(|(j, d)| (colour[*j], *d)).collect()
            } else {
                Vec::new()
            };
            deps.sort_unstable();
            format!("{}|{nbrs:?}|{deps:?}", colour[i])
        })
        .collect();
    dense(&keys)
}

/// Partition from one refinement round seeded by `(dynamics label, state
/// dimension)` over both the neighbours an agent reads and the agents that
/// read it, followed by exact validation of every merge.
///
/// One round resolves the benchmark topologies: a star splits into hub and
/// leaves, a ring stays whole, and a predecessor chain splits into head,
/// interior and tail.
pub fn partition_equivalent(system: &InterconnectedSystem) -> EquivalenceClasses {
    let seed = seeds(system);
    let colour = refine(system, &seed, true);
    validate(system, &colour, &seed)
}

/// Partition from in-neighbour colour refinement run to its fixpoint. Finer
/// than [`partition_equivalent`] on directed topologies (a predecessor chain
/// becomes all singletons) but it is stable under further refinement.
pub fn partition_refined(system: &InterconnectedSystem) -> EquivalenceClasses {
    let mut colour = seeds(system);
    loop {
        let next = refine(system, &colour, false);
        let count = |c: &[usize]| c.iter().max().map_or(0, |m| m + 1);
        if count(&next) == count(&colour) {
            return validate(system, &next, &seeds(system));
        }
        colour = next;
    }
}

/// Splits candidate classes until every member has a local bijection to its
/// representative that preserves dynamics and delays.
fn validate(system: &InterconnectedSystem, colour: &[usize], seed: &[usize]) -> EquivalenceClasses {
    let n = system.agent_count();
    let ncol = colour.iter().max().map_or(0, |m| m + 1);
    let mut classes: Vec<Vec<usize>> = Vec::new();
    let mut witnesses = Vec::new();
    for c in 0..ncol {
        let mut pending: Vec<usize> = (0..n).filter(|i| colour[*i] == c).collect();
        while let Some(&rep) = pending.first() {
            let mut class = vec![rep];
            let mut rest = Vec::new();
            for &m in &pending[1..] {
                match local_bijection(system, seed, rep, m) {
                    Some(mapping) => {
                        class.push(m);
                        witnesses.push(Witness { a: rep, b: m, mapping });
                    }
                    None => rest.push(m),
                }
            }
            classes.push(class);
            pending = rest;
        }
    }
    classes.sort_by_key(|c| c[0]);
    let mut class_of = vec![0; n];
    for (id, c) in classes.iter().enumerate() {
        for &m in c {
            class_of[m] = id;
        }
    }
    witnesses.sort_by_key(|w| (w.a, w.b));
    EquivalenceClasses {
        classes,
        class_of,
        witnesses,
    }
}

fn same_dynamics(system: &InterconnectedSystem, a: usize, b: usize) -> bool {
    let (x, y) = (&system.agents[a], &system.agents[b]);
    x.label == y.label && x.state_dim == y.state_dim && x.input_dim == y.input_dim && x.disturbance_box == y.disturbance_box
}

/// Backtracking search for a bijection `E_a -> E_b` matching dynamics,
/// delays and the given node colours.
pub fn local_bijection(system: &InterconnectedSystem, colour: &[usize], a: usize, b: usize) -> Option<Vec<(usize, usize)>> {
    if !same_dynamics(system, a, b) {
        return None;
    }
    let ea = system.graph.neighbors(a);
    let eb = system.graph.neighbors(b);
    if ea.len() != eb.len() {
        return None;
    }
    let fits = |x: usize, y: usize| {
        ea[x].delay == eb[y].delay && colour[ea[x].from] == colour[eb[y].from] && same_dynamics(system, ea[x].from, eb[y].from)
    };
    let mut used = vec![false; eb.len()];
    let mut chosen = vec![0; ea.len()];
    fn search(x: usize, used: &mut [bool], chosen: &mut [usize], fits: &dyn Fn(usize, usize) -> bool) -> bool {
        if x == chosen.len() {
            return true;
        }
        for y in 0..used.len() {
            if !used[y] && fits(x, y) {
                used[y] = true;
                chosen[x] = y;
                if search(x + 1, used, chosen, fits) {
                    return true;
                }
                used[y] = false;
            }
        }
        false
    }
    search(0, &mut used, &mut chosen, &fits).then(|| (0..ea.len()).map(|x| (ea[x].from, eb[chosen[x]].from)).collect())
}

/// Per target node `j`, the local injection of `{j} + E_j` into the source:
/// `(target node, source node)` pairs with `j` itself first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstructureMap {
    pub maps: Vec<Vec<(usize, usize)>>,
}

impl SubstructureMap {
    pub fn identity(system: &InterconnectedSystem) -> Self {
        Self {
            maps: (0..system.agent_count())
                .map(|j| system.graph.closed_neighborhood(j).into_iter().map(|l| (l, l)).collect())
                .collect(),
        }
    }

    pub fn image(&self, j: usize) -> usize {
        self.maps[j][0].1
    }

    fn lookup(&self, j: usize, l: usize) -> Option<usize> {
        self.maps[j].iter().find(|(t, _)| *t == l).map(|p| p.1)
    }
}

/// Checks the local injections: every target node maps to a source node
/// with the same dynamics; its neighbours map onto the source node's
/// neighbours in the same order with equal delays; and wherever a target
/// node appears in several neighbourhoods its images share a Lyapunov class
/// (`source_classes`, or identical nodes when absent). Returns the first
/// violation found.
pub fn check_substructure_iso(
    source: &InterconnectedSystem,
    target: &InterconnectedSystem,
    map: &SubstructureMap,
    source_classes: Option<&[usize]>,
) -> std::result::Result<(), String> {
    let nt = target.agent_count();
    if map.maps.len() != nt {
        return Err(format!("map covers {} target nodes, target has {nt}", map.maps.len()));
    }
    let class = |s: usize| source_classes.map_or(s, |c| c[s]);
    let mut images: Vec<Option<usize>> = vec![None; nt];
    for j in 0..nt {
        let m = &map.maps[j];
        let hood = target.graph.closed_neighborhood(j);
        let covered: Vec<usize> = m.iter().map(|p| p.0).collect();
        if covered != hood {
            return Err(format!("map of node {j} covers {covered:?}, expected {hood:?}"));
        }
        if m.iter().any(|p| p.1 >= source.agent_count()) {
            return Err(format!("map of node {j} points outside the source"));
        }
        let mut srcs: Vec<usize> = m.iter().map(|p| p.1).collect();
        srcs.sort_unstable();
        srcs.dedup();
        if srcs.len() != m.len() {
            return Err(format!("map of node {j} is not injective"));
        }
        for &(t, s) in m {
            let (a, b) = (&target.agents[t], &source.agents[s]);
            if a.label != b.label || a.state_dim != b.state_dim || a.input_dim != b.input_dim {
                return Err(format!("node {t} (label {}) maps to source node {s} (label {})", a.label, b.label));
            }
        }
        let sj = map.image(j);
        let src_nbrs = source.graph.neighbors(sj);
        let tgt_nbrs = target.graph.neighbors(j);
        if src_nbrs.len() != tgt_nbrs.len() {
            return Err(format!(
                "node {j} has {} neighbours, its image {sj} has {}",
                tgt_nbrs.len(),
                src_nbrs.len()
            ));
        }
        for (te, se) in tgt_nbrs.iter().zip(src_nbrs) {
            let img = map.lookup(j, te.from).expect("covered above");
            if img != se.from {
                return Err(format!(
                    "edge {} -> {j} maps to {img} -> {sj}, which is not the matching source neighbour {}",
                    te.from, se.from
                ));
            }
            if te.delay != se.delay {
                return Err(format!(
                    "edge {} -> {j} has delay {}, source edge {} -> {sj} has delay {}",
                    te.from, te.delay, se.from, se.delay
                ));
            }
        }
        for &(t, s) in m {
            match images[t] {
                None => images[t] = Some(class(s)),
                Some(c) if c != class(s) => {
                    return Err(format!("node {t} maps into inconsistent source classes across neighbourhoods"));
                }
                _ => {}
            }
        }
    }
    // Each node's own image must agree with its images as a neighbour.
    for (j, img) in images.iter().enumerate() {
        if *img != Some(class(map.image(j))) {
            return Err(format!("node {j} maps into inconsistent source classes across neighbourhoods"));
        }
    }
    Ok(())
}

/// Builds a map by sending every target node to the first source node with
/// the same dynamics, delays and neighbour labels, then matching neighbours
/// in order subject to Lyapunov-class consistency.
pub fn build_substructure_map(
    source: &InterconnectedSystem,
    target: &InterconnectedSystem,
    source_classes: &[usize],
) -> Result<SubstructureMap> {
    let sig = |sys: &InterconnectedSystem, i: usize| {
        let a = &sys.agents[i];
        let nbrs: Vec<(String, usize)> = sys
            .graph
            .neighbors(i)
            .iter()
            .map(|e| (sys.agents[e.from].label.clone(), e.delay))
            .collect();
        format!("{}|{}|{nbrs:?}", a.label, a.state_dim)
    };
    let mut maps = Vec::with_capacity(target.agent_count());
    for j in 0..target.agent_count() {
        let key = sig(target, j);
        let candidates = (0..source.agent_count()).filter(|s| sig(source, *s) == key);
        let mut found = None;
        'search: for s in candidates {
            let mut m = vec![(j, s)];
            for (te, se) in target.graph.neighbors(j).iter().zip(source.graph.neighbors(s)) {
                m.push((te.from, se.from));
            }
            // Class consistency against every other node's own image.
            for &(t, img) in &m[1..] {
                let own = (0..source.agent_count()).find(|x| sig(source, *x) == sig(target, t));
                match own {
                    Some(o) if source_classes[o] == source_classes[img] => {}
                    _ => continue 'search,
                }
            }
            found = Some(m);
            break;
        }
        match found {
            Some(m) => maps.push(m),
            None => return Err(Error::Config(format!("no source node matches the neighbourhood of target node {j}"))),
        }
    }
    let map = SubstructureMap { maps };
    check_substructure_iso(source, target, &map, Some(source_classes)).map_err(Error::Config)?;
    Ok(map)
}

/// Copies candidates, policies and coupling gains along a valid map. Row
/// sums of the coupling matrix are preserved entry by entry, so the target
/// inherits the small-gain condition.
pub fn transfer_certificate(
    source: &Certificate,
    source_system: &InterconnectedSystem,
    map: &SubstructureMap,
    target: &InterconnectedSystem,
) -> Result<Certificate> {
    source.check_against(source_system)?;
    check_substructure_iso(source_system, target, map, Some(&source.v_classes)).map_err(Error::Config)?;
    let n = target.agent_count();
    let mut gamma = vec![0.0; n * n];
    for j in 0..n {
        let sj = map.image(j);
        for &(l, sl) in &map.maps[j] {
            gamma[j * n + l] = source.gamma_at(sj, sl);
        }
    }
    let mut gains = CouplingGains::uniform(&target.graph, source.constants.epsilon);
    gains.gamma_pure = gamma.clone();
    let cert = Certificate {
        constants: source.constants,
        gains,
        gamma,
        v_classes: (0..n).map(|j| source.v_classes[map.image(j)]).collect(),
        v_nets: source.v_nets.clone(),
        policy_classes: (0..n).map(|j| source.policy_classes[map.image(j)]).collect(),
        policies: source.policies.clone(),
        equilibria: target.equilibrium(),
        neighbors: (0..n).map(|j| target.graph.neighbor_ids(j)).collect(),
    };
    cert.check_against(target)?;
    Ok(cert)
}
