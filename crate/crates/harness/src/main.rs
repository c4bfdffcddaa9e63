use std::path::PathBuf;
use std::process::ExitCode;

use adascan::config::{output_root, RunConfig};
use adascan::eval::Protocol;
use adascan::run::{self, Stage};
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "adascan", about = "Adaptive LiDAR scanning on synthetic driving scenes")]
struct Cli {
    /// TOML run config; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Only 1 is supported; results are single-threaded by design.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output root (else $ADASCAN_OUT, else ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    NextFrame,
    EntireSequence,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    Ablation,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes train and eval sequences.
    Generate,
    /// Trains the detector on full scans.
    Pretrain,
    /// Runs one training stage from the previous stage's checkpoint.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Evaluates a checkpoint directory (default: the stage 3 output).
    Eval {
        #[arg(long, value_enum, default_value = "next-frame")]
        protocol: ProtocolArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Baseline table and matched-sparsity stage comparison.
    Compare,
    /// Energy per scan for eval outputs or explicit sparsities.
    EnergyReport {
        #[arg(long)]
        model: Option<String>,
        #[arg(long, num_args = 1..)]
        sparsity: Vec<f64>,
    },
    /// Finite-difference checks over every parameter group.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Every step from data generation to the comparison.
    All,
    /// Prints the effective config as TOML.
    Config,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"))).with_writer(std::io::stderr).init();
    match run_cli(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run_cli(cli: Cli) -> adascan::Result<()> {
    if cli.threads != 1 {
        return Err(adascan::HarnessError::Config("only --threads 1 is supported".into()));
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let root = output_root(cli.out.as_deref());
    let json = |v: &dyn erased::Show| println!("{}", v.show());
    match cli.cmd {
        Cmd::Generate => {
            for p in run::generate(&cfg, &root)? {
                println!("{}", p.display());
            }
        }
        Cmd::Pretrain => json(&run::pretrain(&cfg, &root)?),
        Cmd::Train { stage } => {
            let stage = match stage {
                StageArg::One => Stage::One,
                StageArg::Two => Stage::Two,
                StageArg::Three => Stage::Three,
                StageArg::Ablation => Stage::Ablation,
            };
            json(&run::train_stage(&cfg, &root, stage)?)
        }
        Cmd::Eval { protocol, checkpoint } => {
            let protocol = match protocol {
                ProtocolArg::NextFrame => Protocol::NextFrame,
                ProtocolArg::EntireSequence => Protocol::EntireSequence,
            };
            json(&run::evaluate(&cfg, &root, protocol, checkpoint.as_deref())?)
        }
        Cmd::Compare => json(&run::compare(&cfg, &root)?),
        Cmd::EnergyReport { model, sparsity } => json(&run::energy(&cfg, &root, model.as_deref(), &sparsity)?),
        Cmd::Gradcheck { instances } => {
            let report = adascan::gradsuite::run(instances, cfg.seed)?;
            json(&report);
            if !report.passed() {
                return Err(adascan::HarnessError::Config("gradient check failed".into()));
            }
        }
        Cmd::All => json(&run::run_all(&cfg, &root)?),
        Cmd::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

mod erased {
    pub trait Show {
        fn show(&self) -> String;
    }

    impl<T: serde::Serialize> Show for T {
        fn show(&self) -> String {
            serde_json::to_string_pretty(self).unwrap_or_default()
        }
    }
}
