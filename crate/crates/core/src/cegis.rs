//! Counterexample-guided synthesis: train, verify, add counterexamples to
//! the data, repeat.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::benchmarks::NominalPolicy;
use crate::certificate::{Certificate, CertificateLayout};
use crate::error::{Error, Result};
use crate::neural::DEFAULT_HIDDEN;
use crate::rng;
use crate::scalability::partition_equivalent;
use crate::synthesis::{
    closed_loop_next, generate_dataset, train, AgentBoxes, CertificateConstants, LossWeights, Provenance, TrainOptions,
    TrainingSet, Transition,
};
use crate::system::{InterconnectedSystem, LocalLayout};
use crate::verification::{verify_certificate, Condition, Counterexample, VerificationReport, Verdict, VerifyOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CegisOptions {
    /// Largest number of train-verify rounds.
    pub max_iterations: usize,
    /// Rollouts in the initial dataset.
    pub trajectories: usize,
    /// Steps per rollout.
    pub horizon: usize,
    /// Copies of every counterexample added to the training split.
    pub oversample: usize,
    pub v_hidden: Vec<usize>,
    pub pi_hidden: Vec<usize>,
    pub sharing: Sharing,
}

/// How agents share Lyapunov candidates and policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sharing {
    /// Candidates and policies per structural equivalence class.
    #[default]
    Structural,
    /// One candidate per (label, state dimension); policies per structural
    /// class. Needed to transfer a certificate along a longer chain.
    Label,
    /// Everything per agent.
    None,
}

impl Default for CegisOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            trajectories: 30_000,
            horizon: 50,
            oversample: 8,
            v_hidden: DEFAULT_HIDDEN.to_vec(),
            pi_hidden: DEFAULT_HIDDEN.to_vec(),
            sharing: Sharing::Structural,
        }
    }
}

/// One line of the progress log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Best validation loss of the round (`None` for the verify-only round).
    pub loss: Option<f64>,
    pub cex_count: usize,
    pub verdict: Verdict,
}

#[derive(Debug, Clone)]
pub struct CegisState {
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
    /// Training-split size at the start of every round.
    pub dataset_sizes: Vec<usize>,
    pub dataset: TrainingSet,
}

#[derive(Debug, Clone)]
pub struct CegisOutcome {
    pub certificate: Certificate,
    pub report: VerificationReport,
    pub state: CegisState,
}

/// Structural classes, or one class per agent without sharing.
pub fn policy_classes(system: &InterconnectedSystem, sharing: Sharing) -> Vec<usize> {
    match sharing {
        Sharing::None => (0..system.agent_count()).collect(),
        _ => partition_equivalent(system).class_of,
    }
}

/// Candidate and policy classes for the chosen sharing mode.
pub fn certificate_layout(system: &InterconnectedSystem, opts: &CegisOptions) -> CertificateLayout {
    let policy_classes = policy_classes(system, opts.sharing);
    let v_classes = match opts.sharing {
        Sharing::Label => {
            let mut keys: Vec<(&str, usize)> = Vec::new();
            system
                .agents
                .iter()
                .map(|a| {
                    let key = (a.label.as_str(), a.state_dim);
                    keys.iter().position(|k| *k == key).unwrap_or_else(|| {
                        keys.push(key);
                        keys.len() - 1
                    })
                })
                .collect()
        }
        _ => policy_classes.clone(),
    };
    CertificateLayout {
        v_classes,
        policy_classes,
        v_hidden: opts.v_hidden.clone(),
        pi_hidden: opts.pi_hidden.clone(),
    }
}

/// Tie keys for the coupling parameters: diagonal entries tie by the row's
/// class, off-diagonal entries by `(row class, column class, delay)`.
/// Entries outside the mask get `usize::MAX`.
pub fn gamma_ties(system: &InterconnectedSystem, classes: &[usize]) -> Vec<usize> {
    let n = system.agent_count();
    let mut keys: Vec<(usize, usize, usize)> = Vec::new();
    let mut out = vec![usize::MAX; n * n];
    let mut key_id = |k: (usize, usize, usize)| match keys.iter().position(|x| *x == k) {
        Some(p) => p,
        None => {
            keys.push(k);
            keys.len() - 1
        }
    };
    for i in 0..n {
        out[i * n + i] = key_id((classes[i], usize::MAX, 0));
        for e in system.graph.neighbors(i) {
            out[i * n + e.from] = key_id((classes[i], classes[e.from], e.delay));
        }
    }
    out
}

/// Turns a stage counterexample into a transition by one closed-loop step
/// from its history under its disturbance. Class-K counterexamples carry no
/// history and yield `None`.
pub fn counterexample_transition(cert: &Certificate, system: &InterconnectedSystem, cex: &Counterexample) -> Option<Transition> {
    if matches!(cex.condition, Condition::ClassKLower | Condition::ClassKUpper) {
        return None;
    }
    let layout = LocalLayout::new(system, cex.agent);
    if cex.z.len() != layout.dim() {
        return None;
    }
    let mut t = Transition {
        agent: cex.agent,
        history: cex.z[..layout.history_len()].to_vec(),
        control: Vec::new(),
        disturbance: cex.z[layout.disturbance_range()].to_vec(),
        next: Vec::new(),
        provenance: Provenance::Counterexample,
    };
    let (own, nbrs) = layout.dynamics_inputs(&t.history);
    t.control = cert.control_abs(cex.agent, own, &nbrs);
    t.next = closed_loop_next(cert, system, &layout, &t);
    Some(t)
}

/// Train-verify loop. With `max_iterations = 0` the initial certificate is
/// verified once. Every round warm-starts from the previous parameters.
#[allow(clippy::too_many_arguments)]
pub fn run_cegis(
    system: &InterconnectedSystem,
    nominal: &NominalPolicy,
    initial: &AgentBoxes,
    constants: CertificateConstants,
    weights: LossWeights,
    train_opts: &TrainOptions,
    verify_opts: &VerifyOptions,
    opts: &CegisOptions,
    seed: u64,
    mut progress: Option<&mut dyn Write>,
) -> Result<CegisOutcome> {
    let layout = certificate_layout(system, opts);
    let ties = gamma_ties(system, &layout.policy_classes);
    let mut init_rng = rng::stream(seed, "init", 0);
    let mut cert = Certificate::init(system, nominal, constants, &layout, &mut init_rng)?;
    let mut state = CegisState {
        iteration: 0,
        history: Vec::new(),
        dataset_sizes: Vec::new(),
        dataset: TrainingSet::default(),
    };
    let mut emit = |rec: &IterationRecord| -> Result<()> {
        if let Some(w) = progress.as_deref_mut() {
            serde_json::to_writer(&mut *w, rec)?;
            writeln!(w)?;
        }
        Ok(())
    };
    if opts.max_iterations == 0 {
        let report = verify_certificate(&cert, system, initial, verify_opts, rng::derive_seed(seed, "envelope", 0))?;
        let rec = IterationRecord {
            iter: 0,
            loss: None,
            cex_count: report.total_counterexamples(),
            verdict: report.verdict,
        };
        emit(&rec)?;
        state.history.push(rec);
        return Ok(CegisOutcome {
            certificate: cert,
            report,
            state,
        });
    }
    state.dataset = generate_dataset(
        system,
        &cert,
        initial,
        opts.trajectories,
        opts.horizon,
        rng::derive_seed(seed, "data", 0),
    )?;
    let mut last = None;
    for it in 1..=opts.max_iterations {
        state.iteration = it;
        state.dataset_sizes.push(state.dataset.train.len());
        let round = TrainOptions {
            seed: rng::derive_seed(seed, "train", it as u64),
            ..train_opts.clone()
        };
        let outcome = train(&state.dataset, &cert, system, weights, &round, Some(ties.clone()))?;
        cert = outcome.certificate;
        let report = verify_certificate(&cert, system, initial, verify_opts, rng::derive_seed(seed, "envelope", it as u64))?;
        let rec = IterationRecord {
            iter: it,
            loss: Some(outcome.best_loss),
            cex_count: report.total_counterexamples(),
            verdict: report.verdict,
        };
        log::info!("round {it}: loss {:.4e}, {} counterexamples, {:?}", outcome.best_loss, rec.cex_count, rec.verdict);
        emit(&rec)?;
        state.history.push(rec);
        let done = report.verdict == Verdict::Verified;
        let added: Vec<Transition> = report
            .counterexamples
            .iter()
            .filter_map(|c| counterexample_transition(&cert, system, c))
            .collect();
        last = Some(report);
        if done {
            break;
        }
        if added.is_empty() {
            log::warn!("round {it} produced no usable counterexamples; stopping");
            break;
        }
        for t in added {
            for _ in 0..opts.oversample.max(1) {
                state.dataset.train.push(t.clone());
            }
        }
    }
    let report = last.ok_or_else(|| Error::Config("no synthesis round ran".into()))?;
    Ok(CegisOutcome {
        certificate: cert,
        report,
        state,
    })
}
