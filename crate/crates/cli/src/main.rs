//! `massgrid` experiment runner.
//!
//! Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 a computed
//! quantity violated an invariant (including any failed `verify` check).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use massgrid::config::{ExperimentConfig, ExperimentKind};
use massgrid::experiments::{self, VerifyOptions};
use massgrid::{MassError, Result};

#[derive(Parser)]
#[command(
    name = "massgrid",
    version,
    about = "Green-function mass on discretized tori"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mass by the direct and variational paths, with Richardson extrapolation.
    Mass(ConfigArg),
    /// Mass family scan, `a_∞` search and Dirichlet limit.
    Family(ConfigArg),
    /// Smallest eigenvalue at every resolution.
    Eigen(ConfigArg),
    /// Mass of a Dirichlet subdomain.
    Dirichlet(ConfigArg),
    /// Blown-up identity against its error model.
    BlowupCheck(ConfigArg),
    /// Mass against resolution with a fitted order.
    Convergence(ConfigArg),
    /// Property suite; exits 4 if any check fails.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML experiment file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Seed for the random test fields.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multiplies the dual-path tolerance.
    #[arg(long, default_value_t = 1.0)]
    tolerance_scale: f64,
    /// Runs only the named checks.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    /// Test hook: breaks stiffness symmetry in the summation-by-parts check.
    #[arg(long, hide = true)]
    corrupt_symmetry: bool,
    /// Also writes the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &MassError) -> u8 {
    if e.is_property_violation() {
        4
    } else if e.is_solver_failure() {
        3
    } else {
        2
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MASSGRID_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        MassError::Config(format!(
            "MASSGRID_THREADS = {v:?} is not a positive integer"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| MassError::Config(e.to_string()))
}

fn write_file(path: &Path, contents: impl FnOnce(&mut fs::File) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    contents(&mut f)?;
    f.flush()?;
    info!("wrote {}", path.display());
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write_file(path, |f| {
        serde_json::to_writer_pretty(&mut *f, value).map_err(|e| MassError::Io(e.to_string()))?;
        writeln!(f)?;
        Ok(())
    })
}

fn run_experiment(kind: ExperimentKind, arg: &ConfigArg) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&arg.config)?;
    cfg.experiment.kind = kind;
    // re-validate under the requested kind
    let mut cfg = ExperimentConfig::from_toml(&cfg.to_toml()?)?;
    if let Some(out) = &arg.out {
        cfg.output.dir = out.clone();
    }
    let id = arg
        .config
        .file_stem()
        .map_or_else(|| "experiment".into(), |s| s.to_string_lossy().into_owned());
    let dir = cfg.output.dir.clone();
    info!(
        "{kind} experiment {id}: resolutions {:?}",
        cfg.manifold.resolutions
    );
    let value = match kind {
        ExperimentKind::Mass => {
            let r = experiments::run_mass(&cfg)?;
            write_file(&dir.join(format!("{id}_mass.csv")), |f| r.write_csv(&id, f))?;
            to_value(&r)?
        }
        ExperimentKind::Family => {
            let r = experiments::run_family(&cfg)?;
            write_file(&dir.join(format!("{id}_family.csv")), |f| {
                r.scan.write_csv(f)
            })?;
            to_value(&r)?
        }
        _ => experiments::run(&cfg)?,
    };
    write_json(&dir.join(format!("{id}_{kind}.json")), &value)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&value).map_err(|e| MassError::Io(e.to_string()))?
    );
    Ok(())
}

fn to_value(v: &impl serde::Serialize) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| MassError::Io(e.to_string()))
}

fn run_verify(args: &VerifyArgs) -> Result<bool> {
    let only: Option<&'static [&'static str]> = (!args.only.is_empty()).then(|| {
        let names: Vec<&'static str> = args
            .only
            .iter()
            .map(|s| &*Box::leak(s.clone().into_boxed_str()))
            .collect();
        &*Box::leak(names.into_boxed_slice())
    });
    let report = experiments::verify_suite(&VerifyOptions {
        resolution: args.resolution,
        seed: args.seed,
        tolerance_scale: args.tolerance_scale,
        corrupt_symmetry: args.corrupt_symmetry,
        only,
    });
    if report.checks.is_empty() {
        return Err(MassError::Config(format!(
            "no check named in {:?}",
            args.only
        )));
    }
    let value = to_value(&report)?;
    if let Some(out) = &args.out {
        write_json(out, &value)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&value).map_err(|e| MassError::Io(e.to_string()))?
    );
    for c in report.checks.iter().filter(|c| !c.passed) {
        error!("check {} failed: {}", c.name, c.detail);
    }
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = init_threads().and_then(|()| match &cli.command {
        Command::Mass(a) => run_experiment(ExperimentKind::Mass, a).map(|()| true),
        Command::Family(a) => run_experiment(ExperimentKind::Family, a).map(|()| true),
        Command::Eigen(a) => run_experiment(ExperimentKind::Eigen, a).map(|()| true),
        Command::Dirichlet(a) => run_experiment(ExperimentKind::Dirichlet, a).map(|()| true),
        Command::BlowupCheck(a) => run_experiment(ExperimentKind::BlowupCheck, a).map(|()| true),
        Command::Convergence(a) => run_experiment(ExperimentKind::Convergence, a).map(|()| true),
        Command::Verify(a) => run_verify(a),
    });
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
