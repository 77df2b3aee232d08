//! Run configuration: one TOML document holding the environment, constants,
//! loss weights, training, reachability, grid and verification settings.
//! Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::benchmarks::{
    drone_system, microgrid_system, platoon_system, toy_system, DroneParams, MicrogridParams, NominalPolicy, PlatoonParams,
    ToyParams,
};
use crate::cegis::{CegisOptions, Sharing};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::neural::DEFAULT_HIDDEN;
use crate::reachability::ReachOptions;
use crate::synthesis::{boxes_around_equilibrium, AgentBoxes, CertificateConstants, LossWeights, TrainOptions};
use crate::system::{Edge, InterconnectedSystem, InterconnectionGraph};
use crate::verification::{GridOptions, Stage2Condition, VerifyOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Toy,
    Platoon,
    Drone,
    Microgrid,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Toy => "toy",
            EnvKind::Platoon => "platoon",
            EnvKind::Drone => "drone",
            EnvKind::Microgrid => "microgrid",
        }
    }
}

/// Graph of the toy environment. The benchmark environments fix their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    #[default]
    Bichain,
    Chain,
    Ring,
    /// Hub plus `agents - 1` leaves.
    Star,
}

/// Replaces the delay of the edge `from -> to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDelay {
    pub to: usize,
    pub from: usize,
    pub delay: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Number of agents of the toy environment.
    #[serde(default = "default_agents")]
    pub agents: usize,
    #[serde(default)]
    pub topology: Topology,
    /// Delay of every edge unless overridden.
    #[serde(default = "default_delay")]
    pub delay: usize,
    /// Declared delay bound; defaults to the largest delay in use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edge_delays: Vec<EdgeDelay>,
    /// Half-width of the initial box around every equilibrium.
    #[serde(default = "default_initial")]
    pub initial_deviation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platoon: Option<PlatoonParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drone: Option<DroneParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub microgrid: Option<MicrogridParams>,
}

fn default_agents() -> usize {
    2
}

fn default_delay() -> usize {
    1
}

fn default_initial() -> f64 {
    1.0
}

/// Certificate constants plus the target radius and the optional decay
/// override.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsConfig {
    pub p: f64,
    pub epsilon: f64,
    pub psi: f64,
    pub a1: f64,
    pub a2: f64,
    pub eps_p: f64,
    pub eps_d: f64,
    pub radius: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_override: Option<f64>,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        let c = CertificateConstants::default();
        Self {
            p: c.p,
            epsilon: c.epsilon,
            psi: c.psi,
            a1: c.a1,
            a2: c.a2,
            eps_p: c.eps_p,
            eps_d: c.eps_d,
            radius: VerifyOptions::default().radius,
            rho_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub trajectories: usize,
    pub horizon: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub decay_every: usize,
    pub freeze_policy: bool,
    /// Largest number of synthesis rounds.
    pub cegis_cap: usize,
    pub oversample: usize,
    pub v_hidden: Vec<usize>,
    pub pi_hidden: Vec<usize>,
    pub sharing: Sharing,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        let c = CegisOptions::default();
        Self {
            trajectories: c.trajectories,
            horizon: c.horizon,
            epochs: t.epochs,
            lr: t.lr,
            batch: t.batch,
            decay_every: t.decay_every,
            freeze_policy: t.freeze_policy,
            cegis_cap: c.max_iterations,
            oversample: c.oversample,
            v_hidden: DEFAULT_HIDDEN.to_vec(),
            pi_hidden: DEFAULT_HIDDEN.to_vec(),
            sharing: c.sharing,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReachConfig {
    pub samples: usize,
    pub eta: f64,
    pub corners: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_r_override: Option<usize>,
}

impl Default for ReachConfig {
    fn default() -> Self {
        let r = ReachOptions::default();
        Self {
            samples: r.samples,
            eta: r.eta,
            corners: r.corners,
            t_r_override: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub slack: f64,
    pub cex_cap: usize,
    pub stage2: Stage2Condition,
    pub reduce: bool,
    pub sublevel_budget: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let v = VerifyOptions::default();
        Self {
            slack: v.slack,
            cex_cap: v.cex_cap,
            stage2: v.stage2,
            reduce: v.reduce,
            sublevel_budget: v.sublevel_budget,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub horizon: usize,
    /// Start of evaluation rollouts as a fraction across the initial box
    /// (0 is the lower corner, 1 the upper).
    pub start: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { horizon: 500, start: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub constants: ConstantsConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub reach: ReachConfig,
    #[serde(default)]
    pub grids: GridOptions,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    /// Parses and resolves a TOML document. Errors name the offending key
    /// and its line.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fills the parameter table of the selected environment and the delay
    /// bound, and rejects tables that belong to other environments.
    pub fn resolved(mut self) -> Result<Self> {
        let env = &mut self.env;
        let foreign = [
            (EnvKind::Toy, env.toy.is_some()),
            (EnvKind::Platoon, env.platoon.is_some()),
            (EnvKind::Drone, env.drone.is_some()),
            (EnvKind::Microgrid, env.microgrid.is_some()),
        ]
        .into_iter()
        .find(|(k, set)| *set && *k != env.kind);
        if let Some((k, _)) = foreign {
            return Err(Error::Config(format!(
                "table `env.{}` does not apply to environment `{}`",
                k.name(),
                env.kind.name()
            )));
        }
        match env.kind {
            EnvKind::Toy => {
                env.toy.get_or_insert_with(ToyParams::default);
            }
            EnvKind::Platoon => {
                env.platoon.get_or_insert_with(PlatoonParams::default);
            }
            EnvKind::Drone => {
                env.drone.get_or_insert_with(DroneParams::default);
            }
            EnvKind::Microgrid => {
                env.microgrid.get_or_insert_with(MicrogridParams::default);
            }
        }
        let largest = env.edge_delays.iter().map(|e| e.delay).fold(env.delay, usize::max);
        let bound = *env.tau_max.get_or_insert(largest);
        if bound < largest {
            return Err(Error::Config(format!("`env.tau_max` = {bound} is below the largest delay {largest}")));
        }
        self.constants().validate()?;
        Ok(self)
    }

    /// TOML text that parses back to an equal configuration.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved TOML text.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml_string()?.as_bytes()))
    }

    pub fn tau_max(&self) -> usize {
        self.env.tau_max.unwrap_or(self.env.delay)
    }

    pub fn build_system(&self) -> Result<(InterconnectedSystem, NominalPolicy)> {
        let env = &self.env;
        let bound = self.tau_max();
        let (system, nominal) = match env.kind {
            EnvKind::Toy => {
                let n = env.agents;
                let graph = match env.topology {
                    Topology::Bichain => InterconnectionGraph::bichain(n, env.delay, bound)?,
                    Topology::Chain => InterconnectionGraph::chain(n, env.delay, bound)?,
                    Topology::Ring => InterconnectionGraph::ring(n, env.delay, bound)?,
                    Topology::Star => {
                        if n < 2 {
                            return Err(Error::Config("a star needs at least 2 agents".into()));
                        }
                        InterconnectionGraph::star(n - 1, env.delay, bound)?
                    }
                };
                toy_system(graph, &env.toy.clone().unwrap_or_default())?
            }
            EnvKind::Platoon => platoon_system(&env.platoon.clone().unwrap_or_default(), env.delay, bound)?,
            EnvKind::Drone => drone_system(&env.drone.clone().unwrap_or_default(), env.delay, bound)?,
            EnvKind::Microgrid => microgrid_system(&env.microgrid.clone().unwrap_or_default(), env.delay, bound)?,
        };
        if env.edge_delays.is_empty() {
            return Ok((system, nominal));
        }
        let n = system.agent_count();
        let mut edges = Vec::new();
        for i in 0..n {
            for e in system.graph.neighbors(i) {
                edges.push((i, *e));
            }
        }
        for o in &env.edge_delays {
            let slot = edges
                .iter_mut()
                .find(|(to, e)| *to == o.to && e.from == o.from)
                .ok_or_else(|| Error::Config(format!("`env.edge_delays` names a missing edge {} -> {}", o.from, o.to)))?;
            slot.1 = Edge {
                delay: o.delay,
                ..slot.1
            };
        }
        let graph = InterconnectionGraph::new(n, &edges)?;
        let system = InterconnectedSystem::new(graph, system.agents.clone())?;
        Ok((system, nominal))
    }

    pub fn initial_boxes(&self, system: &InterconnectedSystem) -> Result<AgentBoxes> {
        let dev = self.env.initial_deviation;
        if !(dev.is_finite() && dev >= 0.0) {
            return Err(Error::Config(format!("`env.initial_deviation` must be finite and nonnegative, got {dev}")));
        }
        Ok(boxes_around_equilibrium(system, dev))
    }

    pub fn constants(&self) -> CertificateConstants {
        let c = &self.constants;
        CertificateConstants {
            p: c.p,
            epsilon: c.epsilon,
            psi: c.psi,
            a1: c.a1,
            a2: c.a2,
            eps_p: c.eps_p,
            eps_d: c.eps_d,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        let t = &self.training;
        TrainOptions {
            epochs: t.epochs,
            lr: t.lr,
            batch: t.batch,
            decay_every: t.decay_every,
            freeze_policy: t.freeze_policy,
            seed: t.seed,
        }
    }

    pub fn cegis_options(&self) -> CegisOptions {
        let t = &self.training;
        CegisOptions {
            max_iterations: t.cegis_cap,
            trajectories: t.trajectories,
            horizon: t.horizon,
            oversample: t.oversample,
            v_hidden: t.v_hidden.clone(),
            pi_hidden: t.pi_hidden.clone(),
            sharing: t.sharing,
        }
    }

    pub fn verify_options(&self) -> VerifyOptions {
        VerifyOptions {
            radius: self.constants.radius,
            rho_override: self.constants.rho_override,
            t_r_override: self.reach.t_r_override,
            grids: self.grids,
            reach: ReachOptions {
                samples: self.reach.samples,
                eta: self.reach.eta,
                corners: self.reach.corners,
            },
            slack: self.verify.slack,
            cex_cap: self.verify.cex_cap,
            stage2: self.verify.stage2,
            reduce: self.verify.reduce,
            sublevel_budget: self.verify.sublevel_budget,
        }
    }
}
