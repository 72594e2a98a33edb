use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flatsurr::config::ExperimentConfig;
use flatsurr::harness::{
    ensure_stages, stage_alpha_campaign, stage_collect_lgv, stage_sharpness, stage_transfer,
    sweep,
};
use flatsurr::report::emit_report;
use flatsurr::{Error, Result};

#[derive(Parser)]
#[command(name = "flatsurr", version, about = "Surrogate-transferability experiment runner")]
struct Cli {
    /// Experiment configuration file
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Artifact directory (defaults to output.dir from the config)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override the base data seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads for independent runs
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate and store the train/test datasets
    GenData,
    /// Train target and surrogate models
    Train,
    /// Collect a constant-rate checkpoint pool from each trained surrogate
    CollectLgv {
        /// Constant learning rate (defaults to half the surrogate's initial rate)
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 2)]
        epochs: usize,
        #[arg(long, default_value_t = 5)]
        per_epoch: usize,
    },
    /// Craft adversarial batches from surrogate checkpoints and store them
    Attack,
    /// Craft adversarial batches and score them on every target
    EvalTransfer,
    /// Measure curvature along each surrogate's checkpoint trajectory
    Sharpness,
    /// Record the per-iteration step-quality trace and test it across the first decay
    AlphaTrace,
    /// Run one experiment per value of the configured sweep
    Sweep,
    /// Render tables and plots from whatever artifacts exist
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <PATH> is required".into()))?;
    if !config_path.exists() {
        return Err(Error::Config(format!("config file not found: {}", config_path.display())));
    }
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
    }
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let threads = cli.threads.max(1);

    match cli.cmd {
        Cmd::GenData => {
            ensure_stages(&cfg, &dir, "data", threads)?;
            println!("datasets ready under {}", dir.join("data").display());
        }
        Cmd::Train => {
            ensure_stages(&cfg, &dir, "surrogates", threads)?;
            println!(
                "{} targets and {} surrogate seeds trained under {}",
                cfg.targets.count,
                cfg.surrogate.seeds.len(),
                dir.display()
            );
        }
        Cmd::CollectLgv { lr, epochs, per_epoch } => {
            ensure_stages(&cfg, &dir, "surrogates", threads)?;
            stage_collect_lgv(&cfg, &dir, lr, epochs, per_epoch)?;
            println!("checkpoint pools stored under {}", dir.join("surrogates").display());
        }
        Cmd::Attack => {
            ensure_stages(&cfg, &dir, "surrogates", threads)?;
            stage_transfer(&cfg, &dir, true)?;
            println!("batches stored under {}", dir.join("attack").display());
        }
        Cmd::EvalTransfer => {
            ensure_stages(&cfg, &dir, "transfer", threads)?;
            println!("wrote {}", dir.join("transfer").join("raw.csv").display());
        }
        Cmd::Sharpness => {
            cfg.diagnostics.sharpness = true;
            ensure_stages(&cfg, &dir, "surrogates", threads)?;
            stage_sharpness(&cfg, &dir)?;
            println!("wrote per-seed tables under {}", dir.join("sharpness").display());
        }
        Cmd::AlphaTrace => {
            if cfg.diagnostics.alpha_every == 0 {
                cfg.diagnostics.alpha_every = 4;
            }
            ensure_stages(&cfg, &dir, "surrogates", threads)?;
            stage_alpha_campaign(&cfg, &dir)?;
            println!("wrote {}", dir.join("alpha").join("campaign.json").display());
        }
        Cmd::Sweep => {
            let rows = sweep(&cfg, cli.out.as_deref(), threads)?;
            let root = cli.out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!(
                "{} of {} sweep points succeeded; table at {}",
                rows.len() - failed,
                rows.len(),
                root.join("sweep.csv").display()
            );
            if failed > 0 {
                return Err(Error::Run(format!("{failed} sweep point(s) failed")));
            }
        }
        Cmd::Report => {
            let written = emit_report(&dir)?;
            println!("rendered {} artifacts under {}", written.len(), dir.join("report").display());
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
