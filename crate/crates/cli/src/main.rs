use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tubeform::certify::{certify, Certificate};
use tubeform::error::Error;
use tubeform::scenario::ScenarioConfig;
use tubeform::sim::metrics::RunSummary;
use tubeform::sim::{simulate, SimConfig};

mod report;
mod svg;

/// Exit codes of the command-line contract.
const EXIT_INPUT: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_UNSAFE: u8 = 3;
const EXIT_CASCADE: u8 = 4;

#[derive(Parser)]
#[command(name = "tubeform", version, about = "Tube-certified distributed MPC for leader-follower formations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute tube radii, tightened bounds and the global error bound.
    Certify {
        scenario: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the closed loop with a certificate and write trace.csv and summary.toml.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        cert: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Turn the feedforward terms off (they are on by default).
        #[arg(long)]
        toggle_feedforward: bool,
        /// Size barrier margins with the no-feedforward radii.
        #[arg(long)]
        baseline_margins: bool,
        #[arg(long)]
        t_end: Option<f64>,
    },
    /// Plot one or more traces and print a metrics table.
    Report {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// Scenario used to draw obstacle circles.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

/// A failure carrying its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            code: EXIT_INPUT,
            error: e.into(),
        }
    }
}

fn fail(code: u8, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

fn certify_code(e: &Error) -> u8 {
    match e {
        Error::GraphNotRooted { .. }
        | Error::InfeasibleLeaderTube { .. }
        | Error::EmptyTightenedSet { .. }
        | Error::NotHurwitz { .. }
        | Error::RiccatiDiverged { .. } => EXIT_INFEASIBLE,
        _ => EXIT_INPUT,
    }
}

fn load_scenario(path: &Path) -> Result<ScenarioConfig, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = ScenarioConfig::from_toml_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(cfg)
}

fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("TUBEFORM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .with_context(|| format!("TUBEFORM_THREADS must be a positive integer, got {raw:?}"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn cmd_certify(scenario: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = load_scenario(scenario)?;
    let world = cfg.world()?;
    let cert = certify(&world).map_err(|e| fail(certify_code(&e), e.into()))?;
    fs::write(out, cert.to_toml_string()?).with_context(|| format!("writing {}", out.display()))?;
    println!("certificate for `{}` written to {}", cert.scenario_name, out.display());
    println!("leader: r_ball = {:.6e}", cert.leader.r_ball0);
    for t in &cert.followers {
        println!(
            "agent {}: r = {:.6e}, r_ball = {:.6e}, w_eff = {:.6e}, eta = {:.6e}, zbar = {:.6e}",
            t.agent,
            t.r,
            t.r_ball,
            t.w_eff,
            t.input_margin,
            cert.global.zbars[t.agent - 1]
        );
    }
    println!("sv_min = {:.6e}, global bound = {:.6e}", cert.global.sv_min, cert.global.bound);
    Ok(())
}

struct RunFlags {
    seed: Option<u64>,
    toggle_feedforward: bool,
    baseline_margins: bool,
    t_end: Option<f64>,
}

fn cmd_run(scenario: &Path, cert_path: &Path, out: &Path, flags: RunFlags) -> Result<(), Failure> {
    let mut cfg = load_scenario(scenario)?;
    let text = fs::read_to_string(cert_path).with_context(|| format!("reading {}", cert_path.display()))?;
    let cert = Certificate::from_toml_str(&text).with_context(|| format!("parsing {}", cert_path.display()))?;
    let hash = cfg.hash();
    if cert.scenario_hash != hash {
        return Err(fail(
            EXIT_INPUT,
            anyhow::anyhow!(
                "certificate hash mismatch: certificate was issued for {}, scenario hashes to {hash}; re-run certify",
                cert.scenario_hash
            ),
        ));
    }
    if let Some(seed) = flags.seed {
        cfg.sim.seed = seed;
    }
    let world = cfg.world()?;
    let mut config = SimConfig::from_settings(&cfg.sim);
    config.feedforward_on = !flags.toggle_feedforward;
    config.baseline_margins = flags.baseline_margins;
    if let Some(t_end) = flags.t_end {
        config.t_end = t_end;
    }
    let started = Instant::now();
    let outcome = simulate(&world, &cert, config.clone()).map_err(|e| {
        let code = if matches!(e, Error::CascadedInfeasibility { .. }) { EXIT_CASCADE } else { EXIT_INPUT };
        fail(code, e.into())
    })?;
    let wall = started.elapsed().as_secs_f64();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let trace_path = out.join("trace.csv");
    let file = fs::File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?;
    outcome.trace.write_csv(std::io::BufWriter::new(file))?;
    let summary = RunSummary::new(
        &cfg.name,
        &hash,
        &config,
        cert.global.bound,
        &outcome.trace,
        &outcome.stats,
        wall,
        threads(),
    )?;
    fs::write(out.join("summary.toml"), summary.to_toml_string()?)?;
    let m = &summary.metrics;
    println!(
        "{} steps in {wall:.2} s; final mean stacked error {:.4e} (bound {:.4e})",
        outcome.stats.steps, m.final_mean_stacked_error, cert.global.bound
    );
    if let Some(c) = m.min_obstacle_clearance {
        println!("min obstacle clearance {c:.4e}");
    }
    if let Some(c) = m.min_pairwise_clearance {
        println!("min pairwise clearance {c:.4e}");
    }
    if let Some(v) = &outcome.stats.first_violation {
        return Err(fail(
            EXIT_UNSAFE,
            anyhow::anyhow!(
                "safety violation at step {} (t = {:.3}): {} = {:.6e}",
                v.step,
                v.time,
                v.what,
                v.value
            ),
        ));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_INPUT);
    }
    let result = match cli.command {
        Command::Certify { scenario, out } => cmd_certify(&scenario, &out),
        Command::Run {
            scenario,
            cert,
            out,
            seed,
            toggle_feedforward,
            baseline_margins,
            t_end,
        } => cmd_run(
            &scenario,
            &cert,
            &out,
            RunFlags {
                seed,
                toggle_feedforward,
                baseline_margins,
                t_end,
            },
        ),
        Command::Report { traces, out, scenario } => report::cmd_report(&traces, &out, scenario.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
