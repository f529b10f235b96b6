use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use intcontrol_cli::config::{load_file, FileConfig};
use intcontrol_cli::{run, Outcome, Overrides, RunConfig};

/// Solve, optimize and check integral-equation control problems.
#[derive(Parser, Debug)]
#[command(name = "intcontrol", version)]
struct Args {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset name; overrides `problem.preset`.
    #[arg(long)]
    preset: Option<String>,
    /// solve, optimize, grad-check, second-variation-check,
    /// sufficiency-check, lqc-solve or bilinear-solve.
    #[arg(long)]
    command: Option<String>,
    /// Grid intervals per axis.
    #[arg(long)]
    grid_n: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for random probe directions.
    #[arg(long)]
    seed: Option<u64>,
    /// List the built-in presets and exit.
    #[arg(long)]
    list_presets: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.list_presets {
        for p in intcontrol::presets::catalog() {
            let params: Vec<String> = p.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("{:<20} {:?} {}  [{}]", p.name, p.family, p.description, params.join(", "));
        }
        return ExitCode::SUCCESS;
    }
    let file = match &args.config {
        Some(path) => load_file(path),
        None => Ok(FileConfig::default()),
    };
    let over = Overrides {
        preset: args.preset,
        command: args.command,
        grid_n: args.grid_n,
        out: args.out,
        seed: args.seed,
    };
    let outcome = match file.and_then(|f| RunConfig::resolve(f, over)) {
        Ok(cfg) => run(&cfg),
        Err(e) => Outcome::config_error(&e),
    };
    if outcome.status == intcontrol_cli::Status::ConfigError {
        eprint!("{}", outcome.report);
    } else {
        print!("{}", outcome.report);
    }
    ExitCode::from(outcome.status.code() as u8)
}
