use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Command, Overrides, ProblemKind, RunConfig};

mod config;
mod run;

/// Asymptotic and simulated test error of two-stage selected ERM.
#[derive(Parser)]
#[command(name = "itererm", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the asymptotic equations at every configured point.
    Solve(RunArgs),
    /// Simulate every configured point at finite size.
    Simulate(RunArgs),
    /// Sweep the base-set share ψ of an active-learning budget.
    Sweep(RunArgs),
    /// Pruned and full-data test error over a grid of α.
    Prune(RunArgs),
    /// Resolve and check a config without computing anything.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
        /// Pipeline to validate for; inferred from the config when absent.
        #[arg(long = "for", value_enum)]
        target: Option<Target>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Solve,
    Simulate,
    Sweep,
    Prune,
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    /// Seed of both the integration nodes and the simulated datasets.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of simulation seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Simulation dimension `d`.
    #[arg(long)]
    dim: Option<usize>,
    /// Integration nodes per stratum.
    #[arg(long)]
    nodes: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Exit with status 0 even if some rows did not converge.
    #[arg(long)]
    allow_nonconverged: bool,
    /// One worker thread and no timing output.
    #[arg(long)]
    deterministic: bool,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig, String> {
        let mut cfg = RunConfig::load(&self.config).map_err(|e| e.to_string())?;
        cfg.apply(&Overrides {
            seed: self.seed,
            seeds: self.seeds,
            dim: self.dim,
            nodes: self.nodes,
        });
        Ok(cfg)
    }
}

fn infer_target(cfg: &RunConfig) -> Command {
    match cfg.problem.kind {
        ProblemKind::Isotropic => Command::Solve,
        ProblemKind::ActiveLearning => match &cfg.budget {
            Some(b) if b.psi.is_none() => Command::Sweep,
            _ => Command::Solve,
        },
        ProblemKind::Gmm => match &cfg.pruning {
            Some(p) if !p.alphas.is_empty() && cfg.problem.alpha.is_none() => Command::Prune,
            _ => Command::Solve,
        },
    }
}

/// Prints a line to stdout. A closed pipe (`itererm ... | head`) is not an
/// error: the artifacts are still written.
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn run(command: Command, args: &RunArgs) -> Result<ExitCode, String> {
    let cfg = args.common.load()?;
    let plan = cfg.plan(command).map_err(|e| e.to_string())?;
    if args.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    let start = Instant::now();
    let rows = run::execute(&plan)?;
    for (k, row) in rows.iter().enumerate() {
        emit(&run::summary_line(k, row));
    }
    let written = run::write_artifacts(&args.out, &plan.run_id, &rows)?;
    eprintln!("wrote {} files to {}", written.len(), args.out.display());
    if !args.deterministic {
        eprintln!("elapsed {:.1} s", start.elapsed().as_secs_f64());
    }
    let failed = rows.iter().filter(|r| r.failure.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} rows flagged", rows.len());
        if !args.allow_nonconverged {
            return Ok(ExitCode::from(2));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Solve(a) => run(Command::Solve, a),
        Cmd::Simulate(a) => run(Command::Simulate, a),
        Cmd::Sweep(a) => run(Command::Sweep, a),
        Cmd::Prune(a) => run(Command::Prune, a),
        Cmd::Validate { common, target } => common.load().and_then(|cfg| {
            let command = match target {
                Some(Target::Solve) => Command::Solve,
                Some(Target::Simulate) => Command::Simulate,
                Some(Target::Sweep) => Command::Sweep,
                Some(Target::Prune) => Command::Prune,
                None => infer_target(&cfg),
            };
            let plan = cfg.plan(command).map_err(|e| e.to_string())?;
            for line in plan.report() {
                emit(&line);
            }
            emit("config is valid");
            Ok(ExitCode::SUCCESS)
        }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(1)
    })
}
