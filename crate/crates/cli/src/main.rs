use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use hj_ensemble::acceptance::{run_criterion, CRITERIA};
use hj_ensemble::io::{parse_config, RunConfig};
use hj_ensemble::runner::{self, RunReport};
use hj_ensemble::{Error, ErrorKind};

const EXIT_VERIFY_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "hjens", version, about = "Hamilton-Jacobi ensemble simulations")]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (INI)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding [output] directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for the sample-point audits of user-supplied models
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Print nothing but errors
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Integrate ensemble members as independent trajectories
    Lagrangian,
    /// Evolve momentum and density fields on a configuration-space grid
    Eulerian,
    /// Build the action field by characteristics
    Hj,
    /// Evolve coordinate and density fields over a momentum grid
    Prep,
    /// Build the two-branch oscillator layer set
    Layers,
    /// Evolve action, spin-angle and density fields of a dipole ensemble
    Dipole,
    /// Run the acceptance suite
    Verify,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Numerical => EXIT_NUMERICAL,
        ErrorKind::Io => EXIT_CONFIG,
    }
}

fn verify(scratch: Option<&Path>, quiet: bool) -> ExitCode {
    let tmp;
    let dir = match scratch {
        Some(d) => d.to_path_buf(),
        None => {
            tmp = std::env::temp_dir().join(format!("hjens-verify-{}", std::process::id()));
            tmp.clone()
        }
    };
    if let Err(e) = std::fs::create_dir_all(&dir) {
        eprintln!("error: cannot create {}: {e}", dir.display());
        return ExitCode::from(EXIT_CONFIG);
    }
    let mut failed = 0;
    for (id, _) in CRITERIA {
        let r = run_criterion(id, &dir);
        if !r.passed {
            failed += 1;
        }
        if !quiet || !r.passed {
            println!("{r}");
        }
    }
    if scratch.is_none() {
        let _ = std::fs::remove_dir_all(&dir);
    }
    if !quiet {
        println!("{} of {} criteria passed", CRITERIA.len() - failed, CRITERIA.len());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VERIFY_FAILED)
    }
}

fn run(cmd: Command, cfg: &RunConfig, out: Option<&Path>, seed: u64) -> hj_ensemble::Result<RunReport> {
    match cmd {
        Command::Lagrangian => runner::lagrangian(cfg, out, seed),
        Command::Eulerian => runner::eulerian(cfg, out, seed),
        Command::Hj => runner::hj(cfg, out, seed),
        Command::Prep => runner::prep(cfg, out, seed),
        Command::Layers => runner::layers(cfg, out),
        Command::Dipole => runner::dipole(cfg, out),
        Command::Verify => unreachable!("verify takes no run config"),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.command == Command::Verify {
        return verify(args.out.as_deref(), args.quiet);
    }
    let Some(path) = args.config.as_deref() else {
        eprintln!("error: this subcommand needs --config <path>\n");
        eprintln!("{}", Args::command().render_usage());
        return ExitCode::from(EXIT_CONFIG);
    };
    let cfg = match parse_config(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(exit_code(&e));
        }
    };
    match run(args.command, &cfg, args.out.as_deref(), args.seed) {
        Ok(report) => {
            if !args.quiet {
                for line in &report.lines {
                    println!("{line}");
                }
                println!("wrote {} files", report.files.len());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            match &e {
                Error::Caustic { t } => eprintln!("error: caustic at t = {t}: the ensemble is no longer single-valued"),
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
