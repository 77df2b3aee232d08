//! `lrcert` command-line front end: synthesis, verification, simulation,
//! evaluation, structural reduction and certificate transfer.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lrcert::cegis::run_cegis;
use lrcert::certificate::Certificate;
use lrcert::config::RunConfig;
use lrcert::evaluation::{disturbance_presets, evaluate_scenario, lyapunov_trace, write_rmse_csv, RmseRow, Scenario};
use lrcert::io::{CertificateFile, FileProvenance};
use lrcert::rng::derive_seed;
use lrcert::scalability::{build_substructure_map, partition_equivalent, partition_refined, transfer_certificate};
use lrcert::system::{pad_history, rollout, Controller, DisturbanceSignal, InterconnectedSystem};
use lrcert::verification::{schedule, verify_with_envelope, Verdict};
use lrcert::Error;

/// Exit code for malformed input: configs, certificates or arguments.
const EXIT_FORMAT: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "lrcert", version, about = "Neural Lyapunov-Razumikhin certificates for delayed interconnected systems")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides `training.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for every output file.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and verify a certificate; writes certificate.json, report.json
    /// and cegis_log.jsonl.
    Synthesize,
    /// Verify a certificate; writes report.json and reach.csv.
    Verify {
        #[arg(long)]
        certificate: PathBuf,
    },
    /// Roll out one closed loop; writes trajectory.csv (and lyap.csv with a
    /// certificate).
    Simulate {
        #[arg(long)]
        certificate: Option<PathBuf>,
        /// Named disturbance preset of the environment, or `zero`.
        #[arg(long, default_value = "zero")]
        scenario: String,
        #[arg(long)]
        steps: Option<usize>,
        /// Initial offset from equilibrium on every coordinate.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        offset: f64,
    },
    /// Evaluate a certificate under the environment's disturbance presets;
    /// writes rmse.csv and per-scenario lyap.csv and envelope.csv.
    Evaluate {
        #[arg(long)]
        certificate: PathBuf,
    },
    /// Partition the agents into structurally equivalent classes; writes
    /// classes.json.
    Reduce {
        #[arg(long, value_enum, default_value_t = Partition::Equivalent)]
        method: Partition,
    },
    /// Carry a certificate from a source system onto the configured one;
    /// writes certificate.json.
    Transfer {
        #[arg(long)]
        certificate: PathBuf,
        #[arg(long)]
        source_config: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Partition {
    Equivalent,
    Refined,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_FORMAT) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FORMAT)
        }
    }
}

fn run(cli: Cli) -> lrcert::Result<u8> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("`--config` is required".into()))?;
    let mut config = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        config.training.seed = s;
    }
    if cli.dry_run {
        print!("{}", config.to_toml_string()?);
        return Ok(0);
    }
    fs::create_dir_all(&cli.out_dir)?;
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::Synthesize => synthesize(&config, out),
        Command::Verify { certificate } => verify(&config, &certificate, out),
        Command::Simulate {
            certificate,
            scenario,
            steps,
            offset,
        } => simulate(&config, certificate.as_deref(), &scenario, steps, offset, out),
        Command::Evaluate { certificate } => evaluate(&config, &certificate, out),
        Command::Reduce { method } => reduce(&config, method, out),
        Command::Transfer {
            certificate,
            source_config,
        } => transfer(&config, &certificate, &source_config, out),
    }
}

fn create(out: &Path, name: &str) -> lrcert::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn load_certificate(path: &Path, system: &InterconnectedSystem) -> lrcert::Result<Certificate> {
    let cert = CertificateFile::load(path)?.certificate()?;
    cert.check_against(system).map_err(|e| Error::Format(e.to_string()))?;
    Ok(cert)
}

fn synthesize(config: &RunConfig, out: &Path) -> lrcert::Result<u8> {
    let (system, nominal) = config.build_system()?;
    let initial = config.initial_boxes(&system)?;
    let seed = config.training.seed;
    let mut log = create(out, "cegis_log.jsonl")?;
    let outcome = run_cegis(
        &system,
        &nominal,
        &initial,
        config.constants(),
        config.weights,
        &config.train_options(),
        &config.verify_options(),
        &config.cegis_options(),
        seed,
        Some(&mut log),
    )?;
    outcome.report.write_json(create(out, "report.json")?)?;
    let provenance = FileProvenance::from_report(config.hash()?, seed, &outcome.report)?;
    CertificateFile::new(&outcome.certificate, provenance).save(&out.join("certificate.json"))?;
    println!(
        "{:?} after {} rounds ({} counterexamples)",
        outcome.report.verdict,
        outcome.state.iteration,
        outcome.report.total_counterexamples()
    );
    Ok(if outcome.report.verdict == Verdict::Verified { 0 } else { 1 })
}

fn verify(config: &RunConfig, certificate: &Path, out: &Path) -> lrcert::Result<u8> {
    let (system, _) = config.build_system()?;
    let cert = load_certificate(certificate, &system)?;
    let initial = config.initial_boxes(&system)?;
    let seed = derive_seed(config.training.seed, "envelope", 0);
    let (report, envelope) = verify_with_envelope(&cert, &system, &initial, &config.verify_options(), seed)?;
    report.write_json(create(out, "report.json")?)?;
    envelope.write_csv(create(out, "reach.csv")?)?;
    println!(
        "{:?}: T_R = {}, rho = {}, {} counterexamples",
        report.verdict,
        report.t_r,
        report.rho,
        report.total_counterexamples()
    );
    Ok(report.verdict.exit_code() as u8)
}

fn find_scenario(config: &RunConfig, dt: f64, name: &str, steps: usize) -> lrcert::Result<Scenario> {
    if name == "zero" {
        return Ok(Scenario {
            name: name.into(),
            signal: DisturbanceSignal::Zero,
            horizon: steps,
        });
    }
    let presets = disturbance_presets(config.env.kind.name(), dt, steps)?;
    let names: Vec<String> = presets.iter().map(|s| s.name.clone()).collect();
    presets
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Config(format!("unknown scenario `{name}`; available: zero, {}", names.join(", "))))
}

fn sampling_period(config: &RunConfig) -> f64 {
    let env = &config.env;
    env.platoon
        .as_ref()
        .map(|p| p.t)
        .or(env.drone.as_ref().map(|p| p.t))
        .or(env.microgrid.as_ref().map(|p| p.t))
        .unwrap_or(0.1)
}

fn simulate(
    config: &RunConfig,
    certificate: Option<&Path>,
    scenario: &str,
    steps: Option<usize>,
    offset: f64,
    out: &Path,
) -> lrcert::Result<u8> {
    let (system, nominal) = config.build_system()?;
    let steps = steps.unwrap_or(config.evaluation.horizon);
    let sc = find_scenario(config, sampling_period(config), scenario, steps)?;
    let start: Vec<Vec<f64>> = system
        .equilibrium()
        .into_iter()
        .map(|x| x.into_iter().map(|v| v + offset).collect())
        .collect();
    let h0 = pad_history(&system, &start)?;
    let cert = certificate.map(|p| load_certificate(p, &system)).transpose()?;
    let controller: &dyn Controller = match &cert {
        Some(c) => c,
        None => &nominal,
    };
    let traj = rollout(&system, controller, &h0, &sc.signal, sc.horizon)?;
    traj.write_csv(create(out, "trajectory.csv")?)?;
    if let Some(c) = &cert {
        lyapunov_trace(&traj, c).write_csv(create(out, "lyap.csv")?)?;
    }
    Ok(0)
}

fn evaluate(config: &RunConfig, certificate: &Path, out: &Path) -> lrcert::Result<u8> {
    let (system, nominal) = config.build_system()?;
    let cert = load_certificate(certificate, &system)?;
    let initial = config.initial_boxes(&system)?;
    let sched = schedule(&cert, &system, &initial, &config.verify_options())?;
    let start: Vec<Vec<f64>> = initial
        .iter()
        .map(|b| b.iter().map(|(lo, hi)| lo + config.evaluation.start * (hi - lo)).collect())
        .collect();
    let h0 = pad_history(&system, &start)?;
    let presets = disturbance_presets(config.env.kind.name(), sampling_period(config), config.evaluation.horizon)?;
    let mut rows = Vec::new();
    let mut all_pass = true;
    let mut summary = Vec::new();
    for sc in &presets {
        let res = evaluate_scenario(&system, &cert, &cert, &h0, sc, sched.rho, sched.c)?;
        let nom = evaluate_scenario(&system, &nominal, &cert, &h0, sc, sched.rho, sched.c)?;
        let dir = out.join(&sc.name);
        fs::create_dir_all(&dir)?;
        res.trace.write_csv(create(&dir, "lyap.csv")?)?;
        res.envelope.write_csv(create(&dir, "envelope.csv")?)?;
        rows.push(RmseRow {
            scenario: sc.name.clone(),
            controller: "certificate".into(),
            value: res.rmse,
        });
        rows.push(RmseRow {
            scenario: sc.name.clone(),
            controller: "nominal".into(),
            value: nom.rmse,
        });
        all_pass &= res.envelope.pass && res.rmse.is_finite();
        summary.push(serde_json::json!({
            "scenario": sc.name,
            "rmse": res.rmse,
            "envelope_pass": res.envelope.pass,
            "min_slack": res.envelope.min_slack,
        }));
        println!(
            "{}: rmse {:.6}, envelope {} (min slack {:.6})",
            sc.name,
            res.rmse,
            if res.envelope.pass { "holds" } else { "violated" },
            res.envelope.min_slack
        );
    }
    write_rmse_csv(&rows, create(out, "rmse.csv")?)?;
    serde_json::to_writer_pretty(create(out, "evaluation.json")?, &summary)?;
    Ok(if all_pass { 0 } else { 1 })
}

fn reduce(config: &RunConfig, method: Partition, out: &Path) -> lrcert::Result<u8> {
    let (system, _) = config.build_system()?;
    let classes = match method {
        Partition::Equivalent => partition_equivalent(&system),
        Partition::Refined => partition_refined(&system),
    };
    let json = serde_json::json!({
        "agents": system.agent_count(),
        "class_count": classes.len(),
        "classes": classes.summary(),
    });
    serde_json::to_writer_pretty(create(out, "classes.json")?, &json)?;
    println!("{} classes over {} agents", classes.len(), system.agent_count());
    Ok(0)
}

fn transfer(config: &RunConfig, certificate: &Path, source_config: &Path, out: &Path) -> lrcert::Result<u8> {
    let source_cfg = RunConfig::load(source_config)?;
    let (source_sys, _) = source_cfg.build_system()?;
    let (target_sys, _) = config.build_system()?;
    let file = CertificateFile::load(certificate)?;
    let source = file.certificate()?;
    source.check_against(&source_sys).map_err(|e| Error::Format(e.to_string()))?;
    let map = build_substructure_map(&source_sys, &target_sys, &source.v_classes)?;
    let target = transfer_certificate(&source, &source_sys, &map, &target_sys)?;
    let provenance = FileProvenance::unverified(config.hash()?, config.training.seed);
    CertificateFile::new(&target, provenance).save(&out.join("certificate.json"))?;
    println!("transferred onto {} agents; verify before use", target_sys.agent_count());
    Ok(0)
}
