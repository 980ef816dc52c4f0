use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lpflux::cli::{execute, Command, RunConfig};

#[derive(Parser)]
#[command(name = "lpflux", version, about = "Littlewood-Paley flux of a lattice vector field")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// ε as an exact rational, e.g. 1/16.
    #[arg(long, global = true)]
    eps: Option<String>,
    #[arg(long, global = true)]
    qmin: Option<i32>,
    #[arg(long, global = true)]
    qmax: Option<i32>,
    #[arg(long = "target-c", global = true)]
    target_c: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Cap on estimated flux work (multiply-adds).
    #[arg(long, global = true)]
    budget: Option<f64>,
    #[arg(long, global = true, env = "LPFLUX_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "LPFLUX_CACHE")]
    cache: Option<PathBuf>,
    /// Test hook: no_rotation, side3 or skip_leray.
    #[arg(long = "negative-control", global = true)]
    negative_control: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build (or load from cache) every generation and print region sizes.
    Build,
    /// Flux breakdown per level.
    Flux,
    /// Proposition checks over the configured windows.
    Verify,
    /// L^p norms and Besov levels.
    Norms,
    /// Consolidate earlier outputs into report.json and plot files.
    Report,
    /// Run the command list of the config file.
    Run,
}

fn config(args: &Args) -> Result<RunConfig, lpflux::cli::CliError> {
    let mut c = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = &args.eps {
        c.field.eps = e.clone();
    }
    if let Some(q) = args.qmin {
        c.field.q_min = Some(q);
    }
    if let Some(q) = args.qmax {
        c.field.q_max = q;
    }
    if args.target_c.is_some() {
        c.target_c = args.target_c;
    }
    if let Some(d) = args.delta {
        c.delta = d;
    }
    if args.threads.is_some() {
        c.thread_count = args.threads;
    }
    if let Some(b) = args.budget {
        c.budget = b;
    }
    if let Some(o) = &args.out {
        c.output_dir = o.clone();
    }
    if args.cache.is_some() {
        c.cache_dir = args.cache.clone();
    }
    if args.negative_control.is_some() {
        c.negative_control = args.negative_control.clone();
    }
    let only = match args.command {
        Cmd::Build => Some(Command::Build),
        Cmd::Flux => Some(Command::Flux),
        Cmd::Verify => Some(Command::Verify),
        Cmd::Norms => Some(Command::Norms),
        Cmd::Report => Some(Command::Report),
        Cmd::Run => None,
    };
    if let Some(cmd) = only {
        c.commands = vec![cmd];
    }
    Ok(c)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = config(&args).and_then(|c| execute(&c));
    match result {
        Ok(s) => {
            for (name, pass) in &s.passed {
                println!("{name}: {}", if *pass { "pass" } else { "FAIL" });
            }
            if s.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
