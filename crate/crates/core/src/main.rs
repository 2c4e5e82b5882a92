use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fetal_chd::config::RunConfig;
use fetal_chd::evaluation::format_table;
use fetal_chd::pipeline;
use fetal_chd::robust::Strategy;
use fetal_chd::training::LambdaMode;
use fetal_chd::{Error, Result};

#[derive(Parser)]
#[command(name = "fetal-chd", version, about = "Synthetic fetal CHD screening pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, copied into every sub-config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-path override, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Auxiliary view loss weighting: off, fixed1 or weighted.
    #[arg(long, global = true, value_parser = parse_mode)]
    lambda_mode: Option<LambdaMode>,
    /// Reliability filter: preserve, random, adversarial or viewverify.
    #[arg(long, global = true, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Perturbation steps per frame.
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the phantom dataset and its manifest.
    Generate(Common),
    /// Filter contaminated frames and assign cardiac planes.
    Curate(Common),
    /// Train one diagnosis model.
    Train(Common),
    /// Score the test split with and without reliability filtering.
    Evaluate(Common),
    /// Sweep strategies, step counts and quality strata.
    Ablate(Common),
}

fn parse_mode(s: &str) -> std::result::Result<LambdaMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut config = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        config = config.with_seed(seed);
    }
    config = config.with_overrides(&c.overrides)?;
    if let Some(mode) = c.lambda_mode {
        config.train.lambda_mode = mode;
    }
    if let Some(strategy) = c.strategy {
        config.perturbation.strategy = strategy;
    }
    if let Some(steps) = c.steps {
        config.perturbation.n_steps = steps;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let config = resolve(&c)?;
            let manifest = pipeline::generate(&config)?;
            print!("{}", pipeline::dataset_summary(&manifest));
        }
        Command::Curate(c) => {
            let config = resolve(&c)?;
            let outcome = pipeline::curate(&config)?;
            println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
        }
        Command::Train(c) => {
            let config = resolve(&c)?;
            let mode = config.train.lambda_mode;
            let (_, log) = pipeline::train_mode(&config, mode)?;
            for m in &log {
                println!(
                    "epoch {:>3}  loss {:.6}  val_auc {}",
                    m.epoch,
                    m.train_loss,
                    m.val_auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
                );
            }
            println!("saved {}", pipeline::checkpoint_path(&config, mode).display());
        }
        Command::Evaluate(c) => {
            let config = resolve(&c)?;
            let out = pipeline::evaluate(&config, config.perturbation.strategy, config.train.lambda_mode)?;
            print!("{}", format_table(&out.reports));
            println!("retained fraction {:.4}", out.retention.overall);
        }
        Command::Ablate(c) => {
            let config = resolve(&c)?;
            let rows = pipeline::ablate(&config, config.train.lambda_mode)?;
            print!("{}", pipeline::ablation_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
