use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use beamadapt::Problem;
use beamadapt_cli::commands;
use beamadapt_cli::RunConfig;
use clap::{Parser, Subcommand, ValueEnum};

/// Adaptive downlink beamforming experiments.
#[derive(Parser, Debug)]
#[command(name = "beamadapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults apply to every omitted key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the problem.
    #[arg(long, global = true, value_enum)]
    problem: Option<ProblemArg>,
    /// Overrides the transmit power, e.g. "30dBm" or "0.5W".
    #[arg(long, global = true)]
    power: Option<String>,
    /// Uses the published dimensions and dataset sizes.
    #[arg(long, global = true)]
    paper_scale: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProblemArg {
    SinrBalancing,
    SumRate,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the pretraining dataset.
    GenData,
    /// Pretrain the embedding network (and the MAML baseline).
    Pretrain,
    /// Fit the SVR on a labelled adaptation set.
    Adapt,
    /// Evaluate every method on the test scenario.
    Eval,
    /// Run the non-stationary online simulation.
    Online,
    /// Power and user sweeps, sensitivity, pass counts and timing.
    Report,
    /// Print the effective configuration.
    ShowConfig,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = cli.problem {
        cfg.problem = match p {
            ProblemArg::SinrBalancing => Problem::SinrBalancing,
            ProblemArg::SumRate => Problem::SumRate,
        };
    }
    if cli.paper_scale {
        cfg.apply_paper_scale();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(p) = &cli.power {
        cfg.system.power = p.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    match cli.command {
        Command::GenData => {
            let m = commands::cmd_gen_data(&cfg)?;
            println!("{} samples ({} dropped) written to {}", m.samples, m.dropped, cfg.out_dir.display());
        }
        Command::Pretrain => {
            let p = commands::cmd_pretrain(&cfg)?;
            println!("pretraining: {} passes over {} epochs; MAML: {} passes", p.pretrain, p.pretrain_epochs, p.maml);
        }
        Command::Adapt => {
            let b = commands::cmd_adapt(&cfg)?;
            println!("SVR fitted on {} samples", b.n_adapt);
        }
        Command::Eval => {
            let ev = commands::cmd_eval(&cfg)?;
            for m in &ev.summary.methods {
                println!("{:<14} mean {:>9.4} {}  std {:.4}", m.method, m.mean, ev.unit, m.std);
            }
        }
        Command::Online => {
            let r = commands::cmd_online(&cfg)?;
            for (m, s, v) in &r.segment_means {
                println!("{m:<16} segment {s}: {v:.4}");
            }
        }
        Command::Report => {
            commands::cmd_report(&cfg)?;
            println!("report written to {}", cfg.out_dir.display());
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
