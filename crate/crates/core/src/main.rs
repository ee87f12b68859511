use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dgreid::config::{process_env, resolve, CliOverrides};
use dgreid::pipeline::Pipeline;
use dgreid::trainer::Variant;
use dgreid::Result;

/// Domain-generalizable person re-identification on synthetic or manifest data.
#[derive(Parser, Debug)]
#[command(name = "dgreid", version)]
struct Cli {
    /// TOML config; built-in desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite or retrain existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Ablation {
    /// Drop the triplet term.
    #[value(name = "no-tri")]
    Tri,
    /// Drop the consistency term.
    #[value(name = "no-consis")]
    Consis,
    /// Classification only, no frozen extractors.
    Baseline,
}

impl From<Ablation> for Variant {
    fn from(a: Ablation) -> Self {
        match a {
            Ablation::Tri => Variant::NoTri,
            Ablation::Consis => Variant::NoConsis,
            Ablation::Baseline => Variant::Baseline,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic domains.
    Synth,
    /// Train one extractor per source domain.
    Pretrain,
    /// Episodic training of the global model.
    Train {
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
    },
    /// Rank-1 / CMC on the held-out targets.
    Eval {
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        /// Evaluate this checkpoint instead of the run's final one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Everything: data, stage 1, full model and both ablations, comparison.
    Reproduce,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(
        cli.config.as_deref(),
        &process_env,
        &CliOverrides {
            seed: cli.seed,
            out: cli.out,
        },
    )?;
    let default_variant = cfg.variant();
    let p = Pipeline::new(cfg, cli.force);
    match cli.command {
        Command::Synth => p.cmd_synth().map(drop),
        Command::Pretrain => p.cmd_pretrain().map(drop),
        Command::Train { ablate } => {
            let path = p.cmd_train(ablate.map_or(default_variant, Variant::from))?;
            println!("final checkpoint: {}", path.display());
            Ok(())
        }
        Command::Eval { ablate, checkpoint } => p
            .cmd_eval(ablate.map_or(default_variant, Variant::from), checkpoint.as_deref())
            .map(drop),
        Command::Reproduce => p.cmd_reproduce().map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
