//! Certificate networks: Lyapunov candidates, residual policies, and the
//! certificate bundle that ties them to a system's agents.

use rand::Rng;

use crate::benchmarks::{LinearFeedback, NominalPolicy};
use crate::error::{Error, Result};
use crate::neural::{ForwardCache, GradientBuffer, Mlp};
use crate::synthesis::{CertificateConstants, CouplingGains};
use crate::system::{Controller, InterconnectedSystem};

/// `V(e) = floor * ||e|| + |phi(e) - phi(0)|` on error coordinates.
///
/// The norm term makes the lower class-K bound hold by construction whenever
/// `floor >= a1`; subtracting `phi(0)` pins `V(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovNet {
    pub floor: f64,
    pub phi: Mlp,
}

/// Intermediate values of one evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LyapunovEval {
    pub value: f64,
    norm: f64,
    sign: f64,
    cache: ForwardCache,
}

/// Scale applied to the output layer of a fresh `phi`, so a new candidate
/// starts close to `floor * ||e||` with a small Lipschitz bound.
pub const PHI_OUTPUT_INIT_SCALE: f64 = 0.01;

impl LyapunovNet {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hidden: &[usize], floor: f64, rng: &mut R) -> Self {
        let mut dims = vec![state_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut phi = Mlp::new(&dims, rng);
        if let Some(last) = phi.layers_mut().last_mut() {
            last.weight.iter_mut().for_each(|w| *w *= PHI_OUTPUT_INIT_SCALE);
        }
        Self { floor, phi }
    }

    pub fn state_dim(&self) -> usize {
        self.phi.input_dim()
    }

    pub fn phi0(&self) -> f64 {
        self.phi.eval(&vec![0.0; self.state_dim()])[0]
    }

    pub fn value(&self, e: &[f64]) -> f64 {
        self.value_with(e, self.phi0())
    }

    /// Same as [`value`](Self::value) with `phi(0)` supplied by the caller.
    pub fn value_with(&self, e: &[f64], phi0: f64) -> f64 {
        self.floor * norm(e) + (self.phi.eval(e)[0] - phi0).abs()
    }

    pub fn eval(&self, e: &[f64], phi0: f64) -> LyapunovEval {
        let cache = self.phi.forward_cached(e);
        let diff = cache.output()[0] - phi0;
        let n = norm(e);
        LyapunovEval {
            value: self.floor * n + diff.abs(),
            norm: n,
            sign: if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            },
            cache,
        }
    }

    /// Adds `upstream * dV/dtheta(e)` to `grads`, except for the `phi(0)`
    /// term whose coefficient is returned so callers can batch it.
    pub fn accumulate(&self, ev: &LyapunovEval, upstream: f64, grads: &mut GradientBuffer) -> f64 {
        if upstream == 0.0 || ev.sign == 0.0 {
            return 0.0;
        }
        let (g, _) = self.phi.backward(&ev.cache, &[upstream * ev.sign]);
        grads.add_scaled(&g, 1.0);
        -upstream * ev.sign
    }

    /// Adds `coeff * dphi(0)/dtheta` to `grads`.
    pub fn accumulate_phi0(&self, coeff: f64, grads: &mut GradientBuffer) {
        if coeff == 0.0 {
            return;
        }
        let cache = self.phi.forward_cached(&vec![0.0; self.state_dim()]);
        let (g, _) = self.phi.backward(&cache, &[coeff]);
        grads.add_scaled(&g, 1.0);
    }

    /// Gradient of `V` with respect to its input.
    pub fn input_grad(&self, e: &[f64], ev: &LyapunovEval) -> Vec<f64> {
        let (_, gin) = self.phi.backward(&ev.cache, &[ev.sign]);
        gin.iter()
            .zip(e)
            .map(|(g, x)| g + if ev.norm > 0.0 { self.floor * x / ev.norm } else { 0.0 })
            .collect()
    }

    /// Global Lipschitz bound: `floor + L(phi)`.
    pub fn lipschitz(&self) -> f64 {
        self.floor + self.phi.lipschitz_upper().value
    }
}

/// `pi(z) = K z + r(z) - r(0)` where `K z` is the nominal linear law on the
/// stacked errors `z = (e_i, e_j...)` and `r` a residual network.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub nominal: LinearFeedback,
    pub residual: Mlp,
    pub state_dim: usize,
    pub neighbor_dims: Vec<usize>,
}

impl PolicyNet {
    /// Residual output layer starts at zero, so `pi = pi_nom` initially.
    pub fn new<R: Rng + ?Sized>(
        nominal: LinearFeedback,
        state_dim: usize,
        neighbor_dims: Vec<usize>,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let input = state_dim + neighbor_dims.iter().sum::<usize>();
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(nominal.input_dim);
        let mut residual = Mlp::new(&dims, rng);
        if let Some(last) = residual.layers_mut().last_mut() {
            last.weight.iter_mut().for_each(|w| *w = 0.0);
            last.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        Self {
            nominal,
            residual,
            state_dim,
            neighbor_dims,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.residual.input_dim()
    }

    pub fn stack(own_err: &[f64], neighbor_errs: &[&[f64]]) -> Vec<f64> {
        let mut z = own_err.to_vec();
        for e in neighbor_errs {
            z.extend_from_slice(e);
        }
        z
    }

    pub fn nominal_part(&self, z: &[f64]) -> Vec<f64> {
        let (own, rest) = z.split_at(self.state_dim);
        let mut at = 0;
        let nb: Vec<&[f64]> = self
            .neighbor_dims
            .iter()
            .map(|n| {
                let s = &rest[at..at + n];
                at += n;
                s
            })
            .collect();
        self.nominal.apply(own, &nb)
    }

    pub fn residual0(&self) -> Vec<f64> {
        self.residual.eval(&vec![0.0; self.input_dim()])
    }

    /// `r(z) - r(0)`.
    pub fn deviation(&self, z: &[f64], r0: &[f64]) -> Vec<f64> {
        self.residual.eval(z).iter().zip(r0).map(|(a, b)| a - b).collect()
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        self.eval_with(z, &self.residual0())
    }

    pub fn eval_with(&self, z: &[f64], r0: &[f64]) -> Vec<f64> {
        self.nominal_part(z)
            .iter()
            .zip(self.deviation(z, r0))
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Lipschitz bound of `z -> pi(z)`.
    pub fn lipschitz(&self) -> f64 {
        self.nominal.lipschitz(self.state_dim, &self.neighbor_dims) + self.residual.lipschitz_upper().value
    }
}

/// Trained certificate for one interconnected system.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub constants: CertificateConstants,
    pub gains: CouplingGains,
    /// Projected coupling matrix, row-major `N x N`.
    pub gamma: Vec<f64>,
    /// Lyapunov class of every agent.
    pub v_classes: Vec<usize>,
    pub v_nets: Vec<LyapunovNet>,
    /// Policy class of every agent.
    pub policy_classes: Vec<usize>,
    pub policies: Vec<PolicyNet>,
    pub equilibria: Vec<Vec<f64>>,
    pub neighbors: Vec<Vec<usize>>,
}

/// Network shapes and class assignment for a fresh certificate.
#[derive(Debug, Clone)]
pub struct CertificateLayout {
    pub v_classes: Vec<usize>,
    pub policy_classes: Vec<usize>,
    pub v_hidden: Vec<usize>,
    pub pi_hidden: Vec<usize>,
}

impl Certificate {
    /// Fresh certificate: random Lyapunov nets, policies equal to the nominal
    /// laws, uniform coupling gains.
    pub fn init<R: Rng + ?Sized>(
        system: &InterconnectedSystem,
        nominal: &NominalPolicy,
        constants: CertificateConstants,
        layout: &CertificateLayout,
        rng: &mut R,
    ) -> Result<Self> {
        constants.validate()?;
        let n = system.agent_count();
        check_classes(&layout.v_classes, n, "Lyapunov")?;
        check_classes(&layout.policy_classes, n, "policy")?;
        let v_count = layout.v_classes.iter().max().map_or(0, |m| m + 1);
        let pi_count = layout.policy_classes.iter().max().map_or(0, |m| m + 1);
        let mut v_nets = Vec::with_capacity(v_count);
        for c in 0..v_count {
            let rep = layout.v_classes.iter().position(|x| *x == c).expect("class is dense");
            v_nets.push(LyapunovNet::new(
                system.agents[rep].state_dim,
                &layout.v_hidden,
                constants.a1,
                rng,
            ));
        }
        let mut policies = Vec::with_capacity(pi_count);
        for c in 0..pi_count {
            let rep = layout.policy_classes.iter().position(|x| *x == c).expect("class is dense");
            let nd: Vec<usize> = system
                .graph
                .neighbor_ids(rep)
                .iter()
                .map(|j| system.agents[*j].state_dim)
                .collect();
            policies.push(PolicyNet::new(
                nominal.laws[rep].clone(),
                system.agents[rep].state_dim,
                nd,
                &layout.pi_hidden,
                rng,
            ));
        }
        let gains = CouplingGains::uniform(&system.graph, constants.epsilon);
        let gamma = gains.project();
        let cert = Self {
            constants,
            gains,
            gamma,
            v_classes: layout.v_classes.clone(),
            v_nets,
            policy_classes: layout.policy_classes.clone(),
            policies,
            equilibria: system.equilibrium(),
            neighbors: (0..n).map(|i| system.graph.neighbor_ids(i)).collect(),
        };
        cert.check_against(system)?;
        Ok(cert)
    }

    pub fn agent_count(&self) -> usize {
        self.v_classes.len()
    }

    pub fn v_net(&self, i: usize) -> &LyapunovNet {
        &self.v_nets[self.v_classes[i]]
    }

    pub fn policy(&self, i: usize) -> &PolicyNet {
        &self.policies[self.policy_classes[i]]
    }

    pub fn gamma_at(&self, i: usize, j: usize) -> f64 {
        self.gamma[i * self.agent_count() + j]
    }

    pub fn error(&self, i: usize, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.equilibria[i]).map(|(a, b)| a - b).collect()
    }

    /// `V_i` at an absolute state.
    pub fn v(&self, i: usize, x: &[f64]) -> f64 {
        self.v_net(i).value(&self.error(i, x))
    }

    /// Lipschitz bound of every Lyapunov class.
    pub fn v_lipschitz(&self) -> Vec<f64> {
        self.v_nets.iter().map(LyapunovNet::lipschitz).collect()
    }

    pub fn policy_lipschitz(&self) -> Vec<f64> {
        self.policies.iter().map(PolicyNet::lipschitz).collect()
    }

    /// Shapes and topology must match the system the certificate is used on.
    pub fn check_against(&self, system: &InterconnectedSystem) -> Result<()> {
        let n = system.agent_count();
        if self.agent_count() != n || self.gamma.len() != n * n || self.policy_classes.len() != n {
            return Err(Error::Format(format!(
                "certificate covers {} agents, system has {n}",
                self.agent_count()
            )));
        }
        for i in 0..n {
            let a = &system.agents[i];
            if self.v_classes[i] >= self.v_nets.len() || self.policy_classes[i] >= self.policies.len() {
                return Err(Error::Format(format!("agent {i} references a missing network")));
            }
            if self.v_net(i).state_dim() != a.state_dim {
                return Err(Error::Dimension {
                    agent: i,
                    field: "Lyapunov input",
                    expected: a.state_dim,
                    got: self.v_net(i).state_dim(),
                });
            }
            let pi = self.policy(i);
            let expected: usize = a.state_dim
                + system
                    .graph
                    .neighbor_ids(i)
                    .iter()
                    .map(|j| system.agents[*j].state_dim)
                    .sum::<usize>();
            if pi.input_dim() != expected || pi.residual.output_dim() != a.input_dim {
                return Err(Error::Dimension {
                    agent: i,
                    field: "policy input",
                    expected,
                    got: pi.input_dim(),
                });
            }
            if self.neighbors[i] != system.graph.neighbor_ids(i) {
                return Err(Error::Format(format!("agent {i}: certificate topology differs from the system")));
            }
            if self.equilibria[i].len() != a.state_dim {
                return Err(Error::Dimension {
                    agent: i,
                    field: "equilibrium",
                    expected: a.state_dim,
                    got: self.equilibria[i].len(),
                });
            }
        }
        Ok(())
    }

    /// Control input of agent `i` from absolute states.
    pub fn control_abs(&self, i: usize, own: &[f64], neighbors: &[&[f64]]) -> Vec<f64> {
        let e = self.error(i, own);
        let ne: Vec<Vec<f64>> = neighbors
            .iter()
            .zip(&self.neighbors[i])
            .map(|(x, j)| self.error(*j, x))
            .collect();
        let refs: Vec<&[f64]> = ne.iter().map(Vec::as_slice).collect();
        self.policy(i).eval(&PolicyNet::stack(&e, &refs))
    }

    /// Re-project `gamma_pure` into the stored coupling matrix.
    pub fn refresh_gamma(&mut self) {
        self.gamma = self.gains.project();
    }
}

impl Controller for Certificate {
    fn control(&self, agent: usize, own: &[f64], neighbors: &[&[f64]]) -> Vec<f64> {
        self.control_abs(agent, own, neighbors)
    }
}

fn check_classes(classes: &[usize], n: usize, what: &str) -> Result<()> {
    if classes.len() != n {
        return Err(Error::Config(format!("{what} classes list {} agents, expected {n}", classes.len())));
    }
    let count = classes.iter().max().map_or(0, |m| m + 1);
    if (0..count).any(|c| !classes.contains(&c)) {
        return Err(Error::Config(format!("{what} class ids must be dense from 0")));
    }
    Ok(())
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lyapunov_is_zero_at_origin_and_above_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = LyapunovNet::new(3, &[8, 8], 0.01, &mut rng);
        assert_eq!(v.value(&[0.0, 0.0, 0.0]), 0.0);
        for _ in 0..100 {
            let e: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert!(v.value(&e) >= 0.01 * norm(&e));
        }
    }

    #[test]
    fn lyapunov_input_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = LyapunovNet::new(2, &[6], 0.3, &mut rng);
        let e = [0.4, -0.7];
        let ev = v.eval(&e, v.phi0());
        let g = v.input_grad(&e, &ev);
        let h = 1e-6;
        for k in 0..2 {
            let mut p = e;
            p[k] += h;
            let mut m = e;
            m[k] -= h;
            let fd = (v.value(&p) - v.value(&m)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "{fd} vs {}", g[k]);
        }
    }

    #[test]
    fn fresh_policy_equals_nominal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nominal = LinearFeedback {
            input_dim: 1,
            self_gain: vec![-0.5],
            neighbor_gains: vec![vec![0.25]],
        };
        let pi = PolicyNet::new(nominal, 1, vec![1], &[4, 4], &mut rng);
        assert_eq!(pi.eval(&[2.0, 4.0]), vec![0.0]);
        assert!((pi.lipschitz() - (0.5f64.powi(2) + 0.25f64.powi(2)).sqrt()).abs() < 0.02);
    }
}
