use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trqam::cli::{cmd_eval, cmd_gen_data, cmd_pretrain, cmd_train, cmd_verify};
use trqam::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "trqam",
    about = "Trust-region fine-tuning of flow-matching policies",
    version
)]
struct Cli {
    /// Path to a TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override for the configured run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for datasets, checkpoints, metrics, and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the behavior dataset (binary plus CSV mirror).
    GenData,
    /// Pretrain the base velocity field by behavior cloning.
    Pretrain,
    /// Run offline then online fine-tuning from the pretrained checkpoint.
    Train,
    /// Evaluate a checkpoint with the stochastic policy.
    Eval {
        /// Parameter file to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the analytic oracle suite and report pass/fail with margins.
    Verify,
}

fn load_config(cli: &Cli) -> trqam::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse(&std::fs::read_to_string(path)?)?,
        None => {
            let cfg = RunConfig::parse("")?;
            log::info!("no --config given; using defaults");
            cfg
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> trqam::Result<bool> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => {
            let path = cmd_gen_data(&cfg, &cli.out)?;
            println!("{}", path.display());
        }
        Command::Pretrain => {
            let path = cmd_pretrain(&cfg, &cli.out)?;
            println!("{}", path.display());
        }
        Command::Train => {
            let outcome = cmd_train(&cfg, &cli.out)?;
            println!("{}", serde_json::to_string(&outcome)?);
        }
        Command::Eval { checkpoint } => {
            let report = cmd_eval(&cfg, checkpoint, &cli.out)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Verify => {
            let report = cmd_verify(&cfg, &cli.out)?;
            for check in &report.checks {
                println!(
                    "{} {} (margin {: >12.3e})  {}",
                    if check.pass { "PASS" } else { "FAIL" },
                    check.name,
                    check.margin,
                    check.detail
                );
            }
            return Ok(report.pass);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new()
            .filter("TRQAM_LOG_LEVEL")
            .default_filter_or("info"),
    )
    .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            // One machine-readable error line on stderr.
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
