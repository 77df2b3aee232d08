//! Closed-loop evaluation: tracking error, Lyapunov traces and the
//! input-to-state envelope.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::certificate::{norm, Certificate};
use crate::error::{Error, Result};
use crate::system::{fmt_f64, rollout, Controller, DelayHistory, DisturbanceSignal, InterconnectedSystem, Targets, Trajectory};

/// A named disturbance profile with its horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub signal: DisturbanceSignal,
    pub horizon: usize,
}

/// Disturbance presets per environment: sinusoids at 1/15 Hz with
/// amplitudes 4 and 7 (platoon) or 0.5 and 3 (drone), initial frequency
/// offsets 0.5 and 1 (microgrid), and zero or uniform noise for the toy
/// system. Samples are clipped to each agent's disturbance box.
pub fn disturbance_presets(env: &str, dt: f64, horizon: usize) -> Result<Vec<Scenario>> {
    let sine = |name: &str, amplitude: f64| Scenario {
        name: name.into(),
        signal: DisturbanceSignal::Sinusoidal {
            freq_hz: 1.0 / 15.0,
            amplitude,
            dt,
            targets: Targets::All,
        },
        horizon,
    };
    let impulse = |name: &str, magnitude: f64| Scenario {
        name: name.into(),
        signal: DisturbanceSignal::InitialImpulse {
            magnitude,
            targets: Targets::All,
        },
        horizon,
    };
    Ok(match env {
        "platoon" => vec![sine("sine-4", 4.0), sine("sine-7", 7.0)],
        "drone" => vec![sine("sine-0.5", 0.5), sine("sine-3", 3.0)],
        "microgrid" => vec![impulse("offset-0.5", 0.5), impulse("offset-1", 1.0)],
        "toy" => vec![
            Scenario {
                name: "zero".into(),
                signal: DisturbanceSignal::Zero,
                horizon,
            },
            Scenario {
                name: "uniform".into(),
                signal: DisturbanceSignal::Uniform { seed: 0 },
                horizon,
            },
        ],
        other => return Err(Error::Config(format!("no disturbance presets for environment `{other}`"))),
    })
}

/// `sqrt(1/(N T) sum_{k=1..T} sum_i ||x_ik - x_i*||^2)`; 0 for an empty
/// horizon.
pub fn rmse(traj: &Trajectory, equilibria: &[Vec<f64>]) -> f64 {
    let t = traj.horizon();
    if t == 0 || equilibria.is_empty() {
        return 0.0;
    }
    let sum: f64 = traj.states[1..]
        .iter()
        .flat_map(|xs| {
            xs.iter()
                .zip(equilibria)
                .map(|(x, e)| x.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        })
        .sum();
    (sum / (equilibria.len() * t) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovTrace {
    /// `values[k][i] = V_i(x_ik)`.
    pub values: Vec<Vec<f64>>,
    pub vmax: Vec<f64>,
}

impl LyapunovTrace {
    /// CSV `step,agent,V`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "agent", "V"])?;
        for (k, row) in self.values.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                w.write_record([k.to_string(), i.to_string(), fmt_f64(*v)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn lyapunov_trace(traj: &Trajectory, cert: &Certificate) -> LyapunovTrace {
    let values: Vec<Vec<f64>> = traj
        .states
        .iter()
        .map(|xs| xs.iter().enumerate().map(|(i, x)| cert.v(i, x)).collect())
        .collect();
    let vmax = values.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).collect();
    LyapunovTrace { values, vmax }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeCheck {
    pub pass: bool,
    /// `min_k (bound_k - V_max(k))`.
    pub min_slack: f64,
    pub vmax: Vec<f64>,
    pub bound: Vec<f64>,
}

impl EnvelopeCheck {
    /// CSV `step,Vmax,bound`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "Vmax", "bound"])?;
        for (k, (v, b)) in self.vmax.iter().zip(&self.bound).enumerate() {
            w.write_record([k.to_string(), fmt_f64(*v), fmt_f64(*b)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Checks `V_max(k) <= c rho^k V_max(0) + (psi/eps) sup_{t<=k} max_i ||d_it||`
/// along a trajectory.
pub fn siss_envelope_check(trace: &LyapunovTrace, traj: &Trajectory, cert: &Certificate, rho: f64, c: f64) -> EnvelopeCheck {
    let gain = cert.constants.psi / cert.constants.epsilon;
    let v0 = trace.vmax.first().copied().unwrap_or(0.0);
    let mut sup_d: f64 = 0.0;
    let mut bound = Vec::with_capacity(trace.vmax.len());
    for k in 0..trace.vmax.len() {
        if let Some(ds) = traj.disturbances.get(k) {
            sup_d = ds.iter().map(|d| norm(d)).fold(sup_d, f64::max);
        }
        bound.push(c * rho.powi(k as i32) * v0 + gain * sup_d);
    }
    let min_slack = bound
        .iter()
        .zip(&trace.vmax)
        .map(|(b, v)| b - v)
        .fold(f64::INFINITY, f64::min);
    EnvelopeCheck {
        pass: min_slack >= 0.0,
        min_slack,
        vmax: trace.vmax.clone(),
        bound,
    }
}

/// Whether `V_max(k) <= r` for every `k >= t_r`.
pub fn settles_within(trace: &LyapunovTrace, r: f64, t_r: usize) -> bool {
    trace.vmax.iter().skip(t_r).all(|v| *v <= r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub scenario: String,
    pub controller: String,
    pub value: f64,
}

/// CSV `scenario,controller,value`.
pub fn write_rmse_csv<W: Write>(rows: &[RmseRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "controller", "value"])?;
    for r in rows {
        w.write_record([r.scenario.clone(), r.controller.clone(), fmt_f64(r.value)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub scenario: String,
    pub rmse: f64,
    pub trajectory: Trajectory,
    pub trace: LyapunovTrace,
    pub envelope: EnvelopeCheck,
}

/// Rolls out `controller` from `h0` under the scenario and evaluates the
/// certificate along the way.
pub fn evaluate_scenario(
    system: &InterconnectedSystem,
    controller: &dyn Controller,
    cert: &Certificate,
    h0: &DelayHistory,
    scenario: &Scenario,
    rho: f64,
    c: f64,
) -> Result<ScenarioResult> {
    if scenario.horizon == 0 {
        return Err(Error::Config(format!("scenario `{}` needs a positive horizon", scenario.name)));
    }
    let trajectory = rollout(system, controller, h0, &scenario.signal, scenario.horizon)?;
    let trace = lyapunov_trace(&trajectory, cert);
    let envelope = siss_envelope_check(&trace, &trajectory, cert, rho, c);
    Ok(ScenarioResult {
        scenario: scenario.name.clone(),
        rmse: rmse(&trajectory, &system.equilibrium()),
        trajectory,
        trace,
        envelope,
    })
}
