//! Command-line front end. `run_cli` returns the process exit code:
//! 0 on success, 1 for bad configuration or I/O, 2 for numerical failures,
//! 3 when a selftest criterion fails.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use cfmlab::error::CfmError;
use cfmlab::experiments::selftest::{run_selftest, write_selftest, SelftestConfig};
use cfmlab::experiments::{run_experiment, ExperimentConfig, ExperimentKind, Runner};
use clap::{Args, Parser, Subcommand};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_SELFTEST: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "cfmlab", version, about = "Simulation and training lab for continuous-depth attention flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate one token and its context through the flow.
    Forward(Common),
    /// Compare the adjoint gradient with finite differences.
    GradCheck(Common),
    /// A single online gradient descent run.
    Ogd(Common),
    /// Forward propagation-of-chaos rates.
    PocForward(Common),
    /// Backward (training) propagation-of-chaos rates.
    PocBackward(Common),
    /// Halving perturbation ladders.
    Stability(Common),
    /// Randomized audit of the Lipschitz and kernel bounds.
    LipschitzAudit(Common),
    /// Particle support growth against its exponential bound.
    SupportGrowth(Common),
    /// The acceptance criteria.
    Selftest(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration; the bundled default for the subcommand when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; falls back to the config's `output`, then `out`.
    #[arg(long, env = "CFMLAB_OUT")]
    out: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

/// Bundled configuration for a subcommand.
pub fn default_config(subcommand: &str) -> Option<&'static str> {
    Some(match subcommand {
        "forward" => include_str!("../configs/forward.toml"),
        "grad-check" => include_str!("../configs/grad-check.toml"),
        "ogd" => include_str!("../configs/ogd.toml"),
        "poc-forward" => include_str!("../configs/poc-forward.toml"),
        "poc-backward" => include_str!("../configs/poc-backward.toml"),
        "stability" => include_str!("../configs/stability.toml"),
        "lipschitz-audit" => include_str!("../configs/lipschitz-audit.toml"),
        "support-growth" => include_str!("../configs/support-growth.toml"),
        "selftest" => include_str!("../configs/selftest.toml"),
        _ => return None,
    })
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Numerical(String),
    Selftest(usize),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Numerical(_) => EXIT_NUMERICAL,
            Failure::Selftest(_) => EXIT_SELFTEST,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            Failure::Config(m) => ("config", m.clone()),
            Failure::Numerical(m) => ("numerical", m.clone()),
            Failure::Selftest(n) => ("selftest", format!("{n} criteria failed")),
        };
        // one line whatever the message contains
        write!(f, "error[{kind}]: {}", msg.replace(['\n', '\r'], " "))
    }
}

impl From<CfmError> for Failure {
    fn from(e: CfmError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

fn kind_of(cmd: &Command) -> (Option<ExperimentKind>, &'static str, &Common) {
    use ExperimentKind as K;
    match cmd {
        Command::Forward(c) => (Some(K::Forward), "forward", c),
        Command::GradCheck(c) => (Some(K::GradCheck), "grad-check", c),
        Command::Ogd(c) => (Some(K::Ogd), "ogd", c),
        Command::PocForward(c) => (Some(K::ForwardPoc), "poc-forward", c),
        Command::PocBackward(c) => (Some(K::BackwardPoc), "poc-backward", c),
        Command::Stability(c) => (Some(K::Stability), "stability", c),
        Command::LipschitzAudit(c) => (Some(K::LipschitzAudit), "lipschitz-audit", c),
        Command::SupportGrowth(c) => (Some(K::SupportGrowth), "support-growth", c),
        Command::Selftest(c) => (None, "selftest", c),
    }
}

fn read_config(common: &Common, subcommand: &str) -> Result<String, Failure> {
    match &common.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("cannot read config {}: {e}", p.display()))),
        None => Ok(default_config(subcommand).expect("every subcommand has a bundled config").to_string()),
    }
}

fn runner(common: &Common) -> Result<Runner, Failure> {
    let threads = common
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    Ok(Runner::new(threads)?)
}

fn output_root(common: &Common, from_config: Option<&Path>) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| from_config.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (kind, sub, common) = kind_of(&cli.command);
    let text = read_config(common, sub)?;
    let runner = runner(common)?;
    match kind {
        Some(kind) => {
            let mut cfg = ExperimentConfig::from_toml(&text)?;
            if let Some(s) = common.seed {
                cfg.master_seed = s;
            }
            let root = output_root(common, cfg.output.as_deref());
            let artifact = run_experiment(kind, &cfg, &runner)?;
            let paths = artifact.write(&root)?;
            if !common.quiet {
                for p in paths {
                    println!("{}", p.display());
                }
            }
            Ok(())
        }
        None => {
            let mut cfg = SelftestConfig::from_toml(&text)?;
            if let Some(s) = common.seed {
                cfg.master_seed = s;
            }
            let root = output_root(common, None);
            let quiet = common.quiet;
            let results = run_selftest(&cfg, &runner, |r| {
                if !quiet {
                    println!("{}", r.line());
                }
            })?;
            write_selftest(&root, &cfg, &results)?;
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Failure::Selftest(failed));
            }
            Ok(())
        }
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { EXIT_CONFIG } else { 0 };
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", Failure::Config(format!("usage: {first}")));
            return EXIT_CONFIG;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{f}");
            f.code()
        }
    }
}
