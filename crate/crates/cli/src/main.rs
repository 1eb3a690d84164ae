use std::path::PathBuf;
use std::process::ExitCode;

use alternator_cli::commands;
use alternator_cli::{resolve, CliError, Overrides, Preset};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "alternator", version, about = "Train and evaluate Alternator++ sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the checkpoint and loss log
    Train(Common),
    /// Sample sequences from a checkpoint
    Generate(Common),
    /// Write latent means for every series of the dataset
    Encode(Common),
    /// Sweep missing rates and compare imputation with mean filling
    Impute(Common),
    /// Ensemble forecasts scored by CRPS against climatology
    Forecast(Common),
    /// MMD between generated and held-out sequences
    EvalDensity(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run everything on the calling thread
    #[arg(long)]
    deterministic: bool,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Checkpoint to read (defaults to <out>/model.ckpt)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override a configuration key, e.g. --set train.epochs=50
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            preset: self.preset,
            seed: self.seed,
            out: self.out.clone(),
            deterministic: self.deterministic,
            checkpoint: self.checkpoint.clone(),
            set: self.set.clone(),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, default_preset) = match &cli.command {
        Command::Train(c) | Command::Generate(c) | Command::Encode(c) | Command::EvalDensity(c) => (c, Preset::Density),
        Command::Impute(c) => (c, Preset::Imputation),
        Command::Forecast(c) => (c, Preset::Forecast),
    };
    let cfg = resolve(common.config.as_deref(), &common.overrides(), default_preset)?;
    match cli.command {
        Command::Train(_) => {
            let s = commands::run_train(&cfg)?;
            if let (Some(first), Some(last)) = (s.history.first(), s.history.last()) {
                println!("trained {} epochs: loss {:.6} -> {:.6}", s.history.len(), first.loss.total, last.loss.total);
            }
        }
        Command::Generate(_) => {
            let samples = commands::run_generate(&cfg)?;
            println!("generated {} sequences", samples.shape()[0]);
        }
        Command::Encode(_) => {
            let latents = commands::run_encode(&cfg)?;
            println!("encoded {} sequences", latents.shape()[0]);
        }
        Command::Impute(_) => {
            for row in commands::run_impute(&cfg)? {
                println!("rate {:.2}: model mse {:.6}, mean-fill mse {:.6}", row.rate, row.model.mse, row.baseline.mse);
            }
        }
        Command::Forecast(_) => {
            for s in commands::run_forecast(&cfg)? {
                println!("h={}: crps {:.6}, climatology crps {:.6}", s.step, s.crps, s.climatology_crps);
            }
        }
        Command::EvalDensity(_) => {
            let s = commands::run_eval_density(&cfg)?;
            println!("mmd {:.6}", s.mmd);
            if let Some(u) = s.mmd_untrained {
                println!("untrained mmd {u:.6}");
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
