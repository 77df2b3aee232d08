//! Acceptance checks. Prints one PASS or FAIL line per criterion and exits
//! with status 1 if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use lrcert::benchmarks::{
    drone_system, microgrid_power, microgrid_system, platoon_system, toy_system, DroneParams, MicrogridParams,
    NominalPolicy, PlatoonParams, ToyParams,
};
use lrcert::cegis::{policy_classes, run_cegis, Sharing};
use lrcert::certificate::{Certificate, CertificateLayout, LyapunovNet};
use lrcert::config::RunConfig;
use lrcert::evaluation::{disturbance_presets, evaluate_scenario, settles_within};
use lrcert::neural::Mlp;
use lrcert::reachability::{build_envelope, local_domain, ReachEnvelope, ReachOptions};
use lrcert::scalability::partition_equivalent;
use lrcert::synthesis::{
    boxes_around_equilibrium, certificate_params, generate_dataset, loss_value, project_gains, set_certificate_params,
    total_loss, AgentBoxes, CertificateConstants, GradientOptions, LossWeights, Transition,
};
use lrcert::system::{pad_history, step_system, InterconnectedSystem, InterconnectionGraph};
use lrcert::verification::{
    compute_margins, compute_rho_c, compute_tr, schedule, Schedule, verify_certificate, verify_on_envelope, verify_with_envelope,
    GridOptions, Verdict, VerificationReport, VerifyOptions,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// A certificate that passed verification during this run.
struct VerifiedCase {
    name: String,
    system: InterconnectedSystem,
    cert: Certificate,
    initial: AgentBoxes,
    report: VerificationReport,
}

#[derive(Default)]
struct Shared {
    verified: Vec<VerifiedCase>,
}

fn fixture(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

/// `V_i(e) = scale * |e|` for every agent, nominal policies, uniform gains.
fn norm_certificate(
    system: &InterconnectedSystem,
    nominal: &NominalPolicy,
    constants: CertificateConstants,
    scale: f64,
) -> Certificate {
    let layout = CertificateLayout {
        v_classes: vec![0; system.agent_count()],
        policy_classes: policy_classes(system, Sharing::Structural),
        v_hidden: vec![1],
        pi_hidden: vec![1],
    };
    let mut cert =
        Certificate::init(system, nominal, constants, &layout, &mut ChaCha8Rng::seed_from_u64(0)).expect("valid layout");
    cert.v_nets[0] = LyapunovNet {
        floor: scale,
        phi: Mlp::zeros(&[1, 1]),
    };
    for p in &mut cert.policies {
        p.residual = Mlp::zeros(&p.residual.dims());
    }
    cert
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

fn gradients(_: &mut Shared) -> Check {
    let start = Instant::now();
    let toy = toy_system(InterconnectionGraph::ring(3, 1, 2).map_err(err)?, &ToyParams::default()).map_err(err)?;
    let grid = microgrid_system(&MicrogridParams::radial_line(3, 1.0, 0.2), 1, 1).map_err(err)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for b in 0..20u64 {
        let (sys, nominal) = if b % 2 == 0 { &toy } else { &grid };
        let n = sys.agent_count();
        let data = generate_dataset(sys, nominal, &boxes_around_equilibrium(sys, 0.5), 3, 4, 100 + b).map_err(err)?;
        let layout = CertificateLayout {
            v_classes: (0..n).collect(),
            policy_classes: (0..n).collect(),
            v_hidden: vec![6],
            pi_hidden: vec![4],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(b);
        let mut cert = Certificate::init(sys, nominal, CertificateConstants::default(), &layout, &mut rng).map_err(err)?;
        // Move every network off its initial point so all loss terms are active.
        for p in &mut cert.policies {
            for l in p.residual.layers_mut() {
                l.weight.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
                l.bias.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
            }
        }
        for v in &mut cert.v_nets {
            for l in v.phi.layers_mut() {
                l.weight.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
                l.bias.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
            }
        }
        let mut pool: Vec<&Transition> = data.train.iter().collect();
        pool.shuffle(&mut rng);
        let batch = &pool[..8.min(pool.len())];
        let weights = LossWeights::default();
        let (_, g) = total_loss(batch, &cert, sys, weights, &GradientOptions::default()).map_err(err)?;
        let analytic = g.flat();
        let base = certificate_params(&cert);
        ensure!(analytic.len() == base.len(), "gradient has {} entries for {} parameters", analytic.len(), base.len());
        let mut probe = cert.clone();
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] = base[k] + h;
            set_certificate_params(&mut probe, &p);
            let up = loss_value(batch, &probe, sys, weights).total;
            p[k] = base[k] - h;
            set_certificate_params(&mut probe, &p);
            let down = loss_value(batch, &probe, sys, weights).total;
            let fd = (up - down) / (2.0 * h);
            // Entries below 1e-4 in magnitude are compared on that scale.
            let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-4);
            worst = worst.max(rel);
        }
        params += base.len();
    }
    let t = start.elapsed();
    ensure!(worst < 1e-3, "max relative error {worst:.3e}");
    ensure!(t < Duration::from_secs(10), "took {t:?}");
    Ok(format!("max relative error {worst:.2e} over {params} partials in 20 batches, {t:.2?}"))
}

// ---------------------------------------------------------------------------
// 2. Small-gain projection

fn projection(_: &mut Shared) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=20);
        let eps = rng.gen_range(0.001..0.5);
        let density = rng.gen_range(0.0..1.0);
        let mask: Vec<bool> = (0..n * n).map(|k| k / n == k % n || rng.gen_bool(density)).collect();
        let pure: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..3.0)).collect();
        let g = project_gains(&pure, &mask, n, eps);
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                let v = g[i * n + j];
                ensure!(v >= 0.0, "negative gain {v} at ({i}, {j})");
                if mask[i * n + j] {
                    sum += v;
                } else {
                    ensure!(v == 0.0, "gain {v} outside the neighbourhood at ({i}, {j})");
                }
            }
            worst = worst.max(sum - (1.0 - eps));
            ensure!(sum <= 1.0 - eps + 1e-9, "row {i} sums to {sum} with epsilon {eps}");
        }
    }
    Ok(format!("10^4 matrices, largest row sum minus (1 - eps) = {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 3. Closed-form constants

fn constants(_: &mut Shared) -> Check {
    let (rho, c) = compute_rho_c(1.01, 0.05, 5).map_err(err)?;
    let oracle = (-(1.01f64).ln() / 6.0).exp().max(0.95);
    ensure!((rho - 0.998343).abs() <= 1e-6, "rho = {rho}");
    ensure!((rho - oracle).abs() <= 1e-15, "rho = {rho}, direct evaluation {oracle}");
    ensure!(c == 1.01, "c = {c}");
    let t = compute_tr(0.15, 1.01, 1.0, 0.95);
    let oracle_t = ((0.15f64 / 1.01).ln() / (0.95f64).ln()).ceil() as usize;
    ensure!(t == 38 && oracle_t == 38, "T_R = {t}, direct evaluation {oracle_t}");
    Ok(format!("rho = {rho:.6}, c = {c}, T_R = {t}"))
}

// ---------------------------------------------------------------------------
// 4. Margin formulas

fn margins(_: &mut Shared) -> Check {
    let k = CertificateConstants {
        p: 1.01,
        psi: 0.1,
        ..CertificateConstants::default()
    };
    // Neighbour gains (0.4, 0.3) against L_Vj = (2, 3).
    let m = compute_margins(0, &k, &[(0.4, 2.0), (0.3, 3.0)], 2.0, 1.5, &[0.01], 0.01, 1.0).map_err(err)?;
    let l_h = 1.01 * 2.0 + 3.0;
    let l_r = 2.0 * 1.5 + (0.4 * 2.0 + 0.3 * 3.0) + 0.1;
    ensure!((m.l_h - 5.02).abs() <= 1e-12 && (m.l_h - l_h).abs() <= 1e-12, "L_h = {}", m.l_h);
    ensure!((m.l_r - 4.8).abs() <= 1e-12 && (m.l_r - l_r).abs() <= 1e-12, "L_r = {}", m.l_r);
    ensure!((m.delta_out[0] - 4.8 * 0.01).abs() <= 1e-12, "delta = {}", m.delta_out[0]);
    Ok(format!("L_h = {}, L_r = {}", m.l_h, m.l_r))
}

// ---------------------------------------------------------------------------
// 5. Soundness against a dense oracle

/// Cell centres of `ceil(width / step)` equal cells.
fn centres(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let width = hi - lo;
    let n = (width / step).ceil().max(1.0) as usize;
    (0..n).map(|i| lo + (i as f64 + 0.5) * width / n as f64).collect()
}

/// Two scalar agents `x_i' = a x_i + c x_j(k - s) + b u_i + d_i`,
/// `u_i = -k x_i`, reading each other with delay `s = tau_max`.
struct ScalarCase {
    params: ToyParams,
    tau: usize,
    scale: f64,
    gamma_self: f64,
    gamma_other: f64,
    constants: CertificateConstants,
}

impl ScalarCase {
    fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let a = rng.gen_range(0.3..0.7);
        let closed: f64 = rng.gen_range(-0.1..0.1);
        let scale = rng.gen_range(0.5..1.0);
        Self {
            params: ToyParams {
                a,
                c: rng.gen_range(-0.1..0.1),
                b: 1.0,
                k: a - closed,
                w: rng.gen_range(0.002..0.005),
            },
            tau: 1 + (seed as usize % 2),
            scale,
            gamma_self: 0.45,
            gamma_other: 0.25,
            constants: CertificateConstants {
                p: 1.5,
                epsilon: 0.3,
                psi: 1.5,
                a1: 0.5 * scale,
                a2: 1.2 * scale,
                ..CertificateConstants::default()
            },
        }
    }

    fn system(&self) -> (InterconnectedSystem, NominalPolicy) {
        let graph = InterconnectionGraph::bichain(2, self.tau, self.tau).expect("valid graph");
        toy_system(graph, &self.params).expect("valid toy system")
    }

    fn certificate(&self, system: &InterconnectedSystem, nominal: &NominalPolicy) -> Certificate {
        let mut cert = norm_certificate(system, nominal, self.constants, self.scale);
        cert.gains.gamma_pure = vec![self.gamma_self, self.gamma_other, self.gamma_other, self.gamma_self];
        cert.refresh_gamma();
        cert
    }

    fn v(&self, x: f64) -> f64 {
        self.scale * x.abs()
    }

    fn next(&self, x: f64, x_delayed: f64, d: f64) -> f64 {
        let p = &self.params;
        p.a * x + p.c * x_delayed + p.b * (-p.k * x) + d
    }
}

/// Counts violations of the unmargined conditions on a grid ten times
/// denser than the verifier's. The dense grid is enumerated over the
/// coordinates the successor reads (own lag 0, the neighbour at its delay,
/// the disturbance). The remaining coordinates enter monotonically, so their
/// worst case over the dense grid is taken exactly: the smallest `V` on
/// every free lagged block and the smallest neighbour lag-0 `V` that keeps
/// the point outside `{V_max <= R}`.
fn dense_violations(case: &ScalarCase, system: &InterconnectedSystem, env: &ReachEnvelope, report: &VerificationReport) -> Result<u64, String> {
    let grids = report.grids;
    let (r, p) = (report.radius, case.constants.p);
    let gamma = [case.gamma_self, case.gamma_other];
    let psi = case.constants.psi;
    let depth = case.tau + 1;
    let mut violations = 0u64;
    let horizon = report.t_r.min(env.horizon());
    for i in 0..2 {
        // Class-K bounds on the agent's envelope hull.
        let hull = env.agent_hull(i)[0];
        for x in centres(hull.0.min(-r), hull.1.max(r), grids.delta_out / 10.0) {
            let v = case.v(x);
            if v < case.constants.a1 * x.abs() || v > case.constants.a2 * x.abs() {
                violations += 1;
            }
        }
        // Outside condition at every step.
        for k in 0..=horizon {
            let dom = local_domain(env, system, i, k).map_err(err)?.intervals;
            let block = |slot: usize, lag: usize| dom[slot * depth + lag];
            let dense = |iv: (f64, f64), delta: f64| centres(iv.0, iv.1, delta / 10.0);
            let step = grids.delta_out;
            let mut free_floor = f64::NEG_INFINITY;
            for slot in 0..2 {
                for lag in 1..depth {
                    if slot == 1 && lag == case.tau {
                        continue;
                    }
                    let m = dense(block(slot, lag), step).into_iter().map(|x| case.v(x)).fold(f64::INFINITY, f64::min);
                    free_floor = free_floor.max(m);
                }
            }
            let nbr0: Vec<f64> = dense(block(1, 0), step).into_iter().map(|x| case.v(x)).collect();
            let nbr0_min = nbr0.iter().copied().fold(f64::INFINITY, f64::min);
            let nbr0_min_above = nbr0.iter().copied().filter(|v| *v > r).fold(f64::INFINITY, f64::min);
            let ds = dense(dom[2 * depth], step);
            for x in dense(block(0, 0), step) {
                let v_i = case.v(x);
                let v_j0 = if v_i > r { nbr0_min } else { nbr0_min_above };
                if !v_j0.is_finite() {
                    continue;
                }
                for y in dense(block(1, case.tau), step) {
                    let max_lagged = free_floor.max(case.v(y));
                    if p * v_i < max_lagged {
                        continue;
                    }
                    let coupled = gamma[0] * v_i + gamma[1] * v_j0;
                    for &d in &ds {
                        if case.v(case.next(x, y, d)) > coupled + psi * d.abs() {
                            violations += 1;
                        }
                    }
                }
            }
        }
        // Inside invariance on the sublevel set.
        let w = case.params.w;
        let edge = r / case.scale;
        let inside = centres(-edge, edge, grids.delta_in / 10.0);
        for &x in &inside {
            for &y in &inside {
                for d in centres(-w, w, grids.delta_in / 10.0) {
                    if case.v(case.next(x, y, d)) > r {
                        violations += 1;
                    }
                }
            }
        }
    }
    Ok(violations)
}

fn soundness(shared: &mut Shared) -> Check {
    let start = Instant::now();
    let mut verified = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let case = ScalarCase::seeded(seed);
        let (system, nominal) = case.system();
        let cert = case.certificate(&system, &nominal);
        // The oracle's closed form must describe the certificate under test.
        for x in [-0.4, -0.01, 0.0, 0.2, 0.5] {
            ensure!((cert.v(0, &[x]) - case.v(x)).abs() <= 1e-15, "candidate differs from |e| scaling at {x}");
            let h = pad_history(&system, &[vec![x], vec![0.3]]).map_err(err)?;
            let u: Vec<Vec<f64>> = (0..2).map(|i| cert.control_abs(i, h.state(i, 0), &[h.state(1 - i, case.tau)])).collect();
            let next = step_system(&system, &h, &u, &[vec![0.001], vec![0.0]]).map_err(err)?;
            ensure!((next.state(0, 0)[0] - case.next(x, 0.0, 0.001)).abs() <= 1e-15, "closed loop differs at {x}");
        }
        let initial = vec![vec![(-0.5, 0.5)]; 2];
        let opts = VerifyOptions {
            grids: GridOptions {
                delta_out: 0.003,
                delta_in: 0.002,
                point_cap: 1 << 40,
            },
            reach: ReachOptions {
                samples: 256,
                ..ReachOptions::default()
            },
            ..VerifyOptions::default()
        };
        let (report, env) = verify_with_envelope(&cert, &system, &initial, &opts, seed).map_err(err)?;
        let mut line = format!("seed {seed} (tau {}): {:?}", case.tau, report.verdict);
        if report.verdict == Verdict::Verified {
            verified += 1;
            let bad = dense_violations(&case, &system, &env, &report)?;
            ensure!(bad == 0, "seed {seed}: dense oracle found {bad} violations of a verified certificate");
            // The oracle must be able to see a broken candidate.
            let broken = ScalarCase {
                scale: case.scale * 1.5,
                ..ScalarCase::seeded(seed)
            };
            let caught = dense_violations(&broken, &system, &env, &report)?;
            ensure!(caught > 0, "seed {seed}: dense oracle accepts the scaled candidate");
            line.push_str(", oracle clean");
            shared.verified.push(VerifiedCase {
                name: format!("scalar seed {seed}"),
                system: system.clone(),
                cert: cert.clone(),
                initial: initial.clone(),
                report,
            });
        }
        let mut corrupted = cert.clone();
        corrupted.v_nets[0].floor *= 1.5;
        let bad = verify_certificate(&corrupted, &system, &initial, &opts, seed).map_err(err)?;
        ensure!(bad.verdict == Verdict::Refuted, "seed {seed}: scaled candidate was {:?}", bad.verdict);
        line.push_str(", corruption refuted");
        lines.push(line);
    }
    let t = start.elapsed();
    ensure!(verified > 0, "no system verified, so the oracle comparison is vacuous: {}", lines.join("; "));
    ensure!(t < Duration::from_secs(300), "took {t:?}");
    Ok(format!("{verified}/5 verified; {}; {t:.1?}", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// 6. End-to-end synthesis on the toy fixture

fn end_to_end(shared: &mut Shared) -> Check {
    let cfg = fixture("toy.toml");
    let (system, nominal) = cfg.build_system().map_err(err)?;
    let initial = cfg.initial_boxes(&system).map_err(err)?;
    let verify_opts = cfg.verify_options();
    let outcome = run_cegis(
        &system,
        &nominal,
        &initial,
        cfg.constants(),
        cfg.weights,
        &cfg.train_options(),
        &verify_opts,
        &cfg.cegis_options(),
        cfg.training.seed,
        None,
    )
    .map_err(err)?;
    let report = outcome.report;
    let rounds = outcome.state.iteration;
    ensure!(report.verdict == Verdict::Verified, "verdict {:?} after {rounds} rounds", report.verdict);
    ensure!(rounds <= 20, "{rounds} rounds");
    let cert = outcome.certificate;
    let start: Vec<Vec<f64>> = initial.iter().map(|b| b.iter().map(|iv| iv.1).collect()).collect();
    let h0 = pad_history(&system, &start).map_err(err)?;
    let mut worst_slack = f64::INFINITY;
    for sc in disturbance_presets("toy", 1.0, 500).map_err(err)? {
        let res = evaluate_scenario(&system, &cert, &cert, &h0, &sc, report.rho, report.c).map_err(err)?;
        ensure!(res.envelope.pass && res.envelope.min_slack > 0.0, "{}: envelope slack {}", sc.name, res.envelope.min_slack);
        ensure!(
            settles_within(&res.trace, verify_opts.radius, report.t_r),
            "{}: V_max exceeds R after T_R = {}",
            sc.name,
            report.t_r
        );
        worst_slack = worst_slack.min(res.envelope.min_slack);
    }
    let msg = format!("verified after {rounds} rounds, T_R = {}, 500-step min slack {worst_slack:.3e}", report.t_r);
    shared.verified.push(VerifiedCase {
        name: "toy fixture".into(),
        system,
        cert,
        initial,
        report,
    });
    Ok(msg)
}

// ---------------------------------------------------------------------------
// 7. Equivalence reduction

fn reduction(shared: &mut Shared) -> Check {
    let mut lines = Vec::new();
    for (file, expected) in [("star.toml", 2), ("ring.toml", 1), ("chain10.toml", 3)] {
        let cfg = fixture(file);
        let (system, nominal) = cfg.build_system().map_err(err)?;
        ensure!(system.agent_count() == 10, "{file} has {} agents", system.agent_count());
        let classes = partition_equivalent(&system);
        ensure!(classes.len() == expected, "{file}: {} classes, expected {expected}", classes.len());

        let initial = cfg.initial_boxes(&system).map_err(err)?;
        let cert = norm_certificate(&system, &nominal, cfg.constants(), 1.0);
        let mut opts = cfg.verify_options();
        opts.reach = ReachOptions {
            samples: 1536,
            ..ReachOptions::default()
        };
        // Agents reading several neighbours get coarser grids so the
        // logical point count stays under the cap.
        match file {
            "star.toml" => {
                opts.grids = GridOptions {
                    delta_out: 0.7,
                    delta_in: 0.1,
                    point_cap: 1 << 40,
                }
            }
            "ring.toml" => {
                opts.grids = GridOptions {
                    delta_out: 0.05,
                    delta_in: 0.01,
                    point_cap: 1 << 40,
                }
            }
            _ => {}
        }
        let (reduced, env) = verify_with_envelope(&cert, &system, &initial, &opts, 7).map_err(err)?;
        let sched = schedule(&cert, &system, &initial, &opts).map_err(err)?;
        let full = verify_on_envelope(&cert, &system, &env, sched, &VerifyOptions { reduce: false, ..opts.clone() }).map_err(err)?;
        ensure!(
            reduced.verdict == full.verdict,
            "{file}: representatives {:?}, all agents {:?}",
            reduced.verdict,
            full.verdict
        );
        lines.push(format!(
            "{file} {} classes, {} vs {} checks, both {:?}",
            classes.len(),
            reduced.groups.len(),
            full.groups.len(),
            reduced.verdict
        ));
        if reduced.verdict == Verdict::Verified {
            shared.verified.push(VerifiedCase {
                name: file.into(),
                system,
                cert,
                initial,
                report: reduced,
            });
        }
    }
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------------------
// 8. Scaling

fn scaling(_: &mut Shared) -> Check {
    struct Setup {
        system: InterconnectedSystem,
        cert: Certificate,
        env: ReachEnvelope,
        sched: Schedule,
        opts: VerifyOptions,
    }
    let mut setups = Vec::new();
    let mut envelope_times = Vec::new();
    for file in ["chain10.toml", "chain50.toml"] {
        let cfg = fixture(file);
        let (system, nominal) = cfg.build_system().map_err(err)?;
        let initial = cfg.initial_boxes(&system).map_err(err)?;
        let cert = norm_certificate(&system, &nominal, cfg.constants(), 1.0);
        let mut opts = cfg.verify_options();
        opts.grids.delta_out = 0.005;
        opts.grids.delta_in = 0.0025;
        opts.reach = ReachOptions {
            samples: 512,
            corners: false,
            ..ReachOptions::default()
        };
        let sched = schedule(&cert, &system, &initial, &opts).map_err(err)?;
        let t = Instant::now();
        let env = build_envelope(&system, &cert, &initial, sched.t_r, &opts.reach, 8).map_err(err)?;
        envelope_times.push(t.elapsed());
        setups.push(Setup {
            system,
            cert,
            env,
            sched,
            opts,
        });
    }
    let run = |s: &Setup, reduce: bool| -> Result<(Duration, VerificationReport), String> {
        let o = VerifyOptions { reduce, ..s.opts.clone() };
        let t = Instant::now();
        let rep = verify_on_envelope(&s.cert, &s.system, &s.env, s.sched, &o).map_err(err)?;
        Ok((t.elapsed(), rep))
    };
    // The machine's speed drifts over tens of seconds, so both sizes are
    // timed back to back in each round and the per-round ratios compared.
    let (mut ratios_on, mut ratios_off) = (Vec::new(), Vec::new());
    let (mut on, mut off) = ([Vec::new(), Vec::new()], [Vec::new(), Vec::new()]);
    let mut points = [0.0; 2];
    for _ in 0..5 {
        for reduce in [true, false] {
            let (t10, r10) = run(&setups[0], reduce)?;
            let (t50, r50) = run(&setups[1], reduce)?;
            let (ratios, times) = if reduce { (&mut ratios_on, &mut on) } else { (&mut ratios_off, &mut off) };
            ratios.push(t50.as_secs_f64() / t10.as_secs_f64());
            times[0].push(t10);
            times[1].push(t50);
            if !reduce {
                points = [r10, r50].map(|r| r.stage1.iter().map(|s| s.checked as f64).sum::<f64>());
            }
        }
    }
    for s in &setups {
        let verdicts = [run(s, true)?.1.verdict, run(s, false)?.1.verdict];
        ensure!(verdicts[0] == verdicts[1], "{} agents: verdicts differ {verdicts:?}", s.system.agent_count());
    }
    let mid = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let mid_t = |mut v: Vec<Duration>| {
        v.sort();
        v[v.len() / 2]
    };
    let ratio_on = mid(ratios_on);
    let ratio_off = mid(ratios_off);
    let point_ratio = points[1] / points[0];
    let [on10, on50] = on.map(mid_t);
    let [off10, off50] = off.map(mid_t);
    let detail = format!(
        "reduced {on10:.0?} -> {on50:.0?} (median ratio x{ratio_on:.2}), unreduced {off10:.0?} -> {off50:.0?} \
         (median ratio x{ratio_off:.2}), checked points x{point_ratio:.2}; envelopes {:.1?} and {:.1?} are outside \
         the timed region",
        envelope_times[0], envelope_times[1]
    );
    ensure!(ratio_on <= 1.5, "reduced time grew too much: {detail}");
    // Linear growth in N with 10% allowance for the fixed per-run work.
    ensure!(ratio_off >= 0.9 * 5.0 && point_ratio >= 5.0, "unreduced time grew sublinearly: {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 9. Benchmark sanity

fn benchmark_sanity(_: &mut Shared) -> Check {
    let envs: Vec<(&str, (InterconnectedSystem, NominalPolicy))> = vec![
        ("toy", toy_system(InterconnectionGraph::bichain(3, 1, 1).map_err(err)?, &ToyParams::default()).map_err(err)?),
        ("platoon", platoon_system(&PlatoonParams::default(), 1, 1).map_err(err)?),
        ("drone", drone_system(&DroneParams::default(), 1, 1).map_err(err)?),
        ("microgrid", microgrid_system(&MicrogridParams::default(), 1, 1).map_err(err)?),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tightest: f64 = 0.0;
    for (name, (system, _)) in &envs {
        let eq = system.equilibrium();
        let h = pad_history(system, &eq).map_err(err)?;
        let u: Vec<Vec<f64>> = system.agents.iter().map(|a| vec![0.0; a.input_dim]).collect();
        let next = step_system(system, &h, &u, &system.zero_disturbance()).map_err(err)?;
        for (i, e) in eq.iter().enumerate() {
            for (a, b) in next.state(i, 0).iter().zip(e) {
                ensure!((a - b).abs() <= 1e-12, "{name}: agent {i} moves from its equilibrium ({a} vs {b})");
            }
        }
        // Secants of each agent's step map on a box around the equilibrium.
        for (i, agent) in system.agents.iter().enumerate() {
            let nbrs = system.graph.neighbor_ids(i);
            let sample = |rng: &mut ChaCha8Rng| {
                let x: Vec<f64> = eq[i].iter().map(|c| c + rng.gen_range(-2.0..2.0)).collect();
                let u: Vec<f64> = (0..agent.input_dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let ns: Vec<Vec<f64>> =
                    nbrs.iter().map(|j| eq[*j].iter().map(|c| c + rng.gen_range(-2.0..2.0)).collect()).collect();
                let d: Vec<f64> = agent.disturbance_box.iter().map(|(lo, hi)| rng.gen_range(*lo..=*hi)).collect();
                (x, u, ns, d)
            };
            let flat = |z: &(Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<f64>)| {
                let mut v = z.0.clone();
                v.extend(&z.1);
                z.2.iter().for_each(|n| v.extend(n));
                v.extend(&z.3);
                v
            };
            let eval = |z: &(Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<f64>)| {
                let refs: Vec<&[f64]> = z.2.iter().map(Vec::as_slice).collect();
                agent.dynamics.step(&z.0, &z.1, &refs, &z.3)
            };
            let trials = 100_000 / system.agent_count();
            for _ in 0..trials {
                let (z1, z2) = (sample(&mut rng), sample(&mut rng));
                let dz: f64 = flat(&z1).iter().zip(flat(&z2)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let df: f64 = eval(&z1).iter().zip(eval(&z2)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let slope = df / dz;
                tightest = tightest.max(slope / agent.lipschitz_f);
                ensure!(slope <= agent.lipschitz_f * (1.0 + 1e-12), "{name}: agent {i} secant {slope} above {}", agent.lipschitz_f);
            }
        }
    }
    let params = MicrogridParams::default();
    let n = params.inverter_count();
    for _ in 0..100 {
        let angle = rng.gen_range(-3.0..3.0);
        let volts: Vec<f64> = (0..n).map(|_| rng.gen_range(0.9..1.1)).collect();
        for i in 0..n {
            let p = microgrid_power(&params, &vec![angle; n], &volts, i);
            ensure!(p == params.loads[i], "power {p} at equal angles differs from load {}", params.loads[i]);
        }
    }
    let two = MicrogridParams::radial_line(2, 1.3, 0.4);
    let total = microgrid_power(&two, &[0.25, 0.25], &[1.0, 1.0], 0) + microgrid_power(&two, &[0.25, 0.25], &[1.0, 1.0], 1);
    ensure!(total == 2.0 * 0.4, "two-node total {total}");
    Ok(format!("fixed points hold in 4 environments; largest secant / L_f = {tightest:.3}; power balance exact"))
}

// ---------------------------------------------------------------------------
// 10. Evaluation of verified certificates

fn evaluation(shared: &mut Shared) -> Check {
    ensure!(!shared.verified.is_empty(), "no verified certificate to evaluate");
    let mut runs = 0;
    for case in &shared.verified {
        let presets = disturbance_presets("toy", 1.0, 500).map_err(err)?;
        for corner in [0.0, 1.0] {
            let start: Vec<Vec<f64>> =
                case.initial.iter().map(|b| b.iter().map(|(lo, hi)| lo + corner * (hi - lo)).collect()).collect();
            let h0 = pad_history(&case.system, &start).map_err(err)?;
            for sc in &presets {
                let res =
                    evaluate_scenario(&case.system, &case.cert, &case.cert, &h0, sc, case.report.rho, case.report.c)
                        .map_err(err)?;
                ensure!(res.rmse.is_finite(), "{} / {}: rmse {}", case.name, sc.name, res.rmse);
                ensure!(res.trace.vmax.iter().all(|v| v.is_finite()), "{} / {}: unbounded trace", case.name, sc.name);
                ensure!(
                    res.envelope.pass,
                    "{} / {}: envelope violated by {}",
                    case.name,
                    sc.name,
                    -res.envelope.min_slack
                );
                runs += 1;
            }
        }
    }
    let names: Vec<&str> = shared.verified.iter().map(|c| c.name.as_str()).collect();
    Ok(format!("{runs} rollouts over {} verified certificates ({}) stay finite and inside the envelope", names.len(), names.join(", ")))
}

fn main() {
    let criteria: [(&str, fn(&mut Shared) -> Check); 10] = [
        ("gradient correctness", gradients),
        ("small-gain projection", projection),
        ("closed-form constants", constants),
        ("margin formulas", margins),
        ("soundness against a dense oracle", soundness),
        ("end-to-end synthesis", end_to_end),
        ("equivalence reduction", reduction),
        ("scaling", scaling),
        ("benchmark sanity", benchmark_sanity),
        ("evaluation of verified certificates", evaluation),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut shared = Shared::default();
    let mut failed = 0;
    for (idx, (name, check)) in criteria.iter().enumerate() {
        let number = idx + 1;
        if only.is_some_and(|o| o != number && !(o == 10 && number < 10)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut shared))).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {number:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {number:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
