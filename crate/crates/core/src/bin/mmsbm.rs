use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmsbm::commands::{ablate_command, demo_bridge, evaluate_command, train_command};
use mmsbm::config::RunConfig;
use mmsbm::{Error, Result};

#[derive(Parser)]
#[command(name = "mmsbm", version, about = "Momentum multi-marginal bridge matching for snapshot data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate bridge paths through the configured pinned points.
    DemoBridge(Common),
    /// Train a drift network and write a checkpoint.
    Train(Common),
    /// Score a checkpoint against every snapshot marginal.
    Evaluate(Common),
    /// Sweep truncation level or sigma.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; falls back to MMSBM_THREADS, then all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("MMSBM_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config("MMSBM_THREADS", format!("expected a thread count, found {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn setup(args: &Common) -> Result<RunConfig> {
    if let Some(n) = threads(args.threads)? {
        if n == 0 {
            return Err(Error::config("--threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("--threads", e.to_string()))?;
    }
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output.dir = out.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DemoBridge(args) => {
            let s = demo_bridge(&setup(&args)?)?;
            let errs: Vec<String> = s.pin_errors.iter().map(|e| format!("{e:.3e}")).collect();
            println!("{} paths; mean pin error per pinned time: [{}]", s.num_paths, errs.join(", "));
            if let Some(e) = s.oracle_max_rel_error {
                println!("max relative deviation from the finite-c oracle: {e:.3e}");
            }
        }
        Command::Train(args) => {
            let s = train_command(&setup(&args)?)?;
            if let Some(last) = s.outcome.log.last() {
                let w2: Vec<String> = last.w2.iter().map(|w| format!("{w:.4}")).collect();
                println!("{} outer iterations; final loss {:.4}; coupling W2 [{}]", s.outcome.outer_completed, last.loss, w2.join(", "));
            }
        }
        Command::Evaluate(args) => {
            let e = evaluate_command(&setup(&args)?)?;
            for (role, label) in [("heldout_mean", "heldout mean"), ("rest", "rest")] {
                if let Some(w) = e.value("w2", role) {
                    println!("{label} W2: {w:.4}");
                }
            }
        }
        Command::Ablate(args) => {
            let a = ablate_command(&setup(&args)?)?;
            for p in &a.points {
                println!("{:>8}  mean heldout W2 {:.4}", p.setting, p.heldout_mean_w2);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
