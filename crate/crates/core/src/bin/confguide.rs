use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use confguide::api::{self, AppState, ServiceOptions};
use confguide::decision::DecisionConfig;
use confguide::pipeline::{self, RunConfig, StageOptions};
use tracing_subscriber::EnvFilter;

/// Risk-controlled prediction sets with model-written guidance for review.
#[derive(Parser)]
#[command(name = "confguide", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "confguide.toml")]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Target false-negative rate, overriding the config.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Seed for mock endpoints and session shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configurations to simulate and evaluate, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    configs: Option<Vec<DecisionConfig>>,
    /// Run even when upstream outputs are stale.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate the set threshold on the calibration split.
    Calibrate {
        /// Exit with status 2 when no threshold meets the target.
        #[arg(long)]
        strict: bool,
    },
    /// Sweep the target rate and select an operating point.
    Sweep,
    /// Build prediction sets for the test split.
    Predict,
    /// Generate guidance for every flagged label.
    Guide,
    /// Produce decisions with a simulated reviewer.
    Simulate,
    /// Compute metrics and the comparison report.
    Evaluate,
    /// Run calibrate, predict, guide, simulate and evaluate in order.
    Run,
    /// Serve the review API.
    Serve {
        /// Listen address, overriding the config.
        #[arg(long)]
        bind: Option<String>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if common.alpha.is_some() {
        cfg.alpha = common.alpha;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(configs) = &common.configs {
        cfg.configs = configs.clone();
    }
    cfg.guidance.validate()?;
    cfg.reviewer.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli.common)?;
    let opts = StageOptions {
        force: cli.common.force,
    };
    match cli.command {
        Command::Calibrate { strict } => {
            let result = pipeline::run_calibrate(&cfg, opts)?;
            println!(
                "lambda_hat = {} (alpha = {}, n = {}){}",
                result.lambda_hat,
                result.alpha,
                result.n_calibration,
                if result.vacuous { ", vacuous: no threshold meets the target" } else { "" }
            );
            if strict && result.vacuous {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Sweep => {
            let out = pipeline::run_sweep(&cfg, opts)?;
            for p in &out.plateaus {
                println!(
                    "{} [{}, {}] length {} lambda_hat {} risk {:.4} size {:.3}",
                    if p.selected { "*" } else { " " },
                    p.plateau.alpha_lo,
                    p.plateau.alpha_hi,
                    p.plateau.length,
                    p.plateau.lambda_hat,
                    p.plateau.risk,
                    p.plateau.avg_set_size
                );
            }
            println!("alpha* = {}", out.alpha_star);
        }
        Command::Predict => {
            let s = pipeline::run_predict(&cfg, opts)?;
            println!("{} test cases at lambda_hat = {}", s.n_test, s.lambda_hat);
            if let Some(fnr) = s.empirical_fnr {
                println!("test FNR = {fnr:.4}");
            }
        }
        Command::Guide => {
            let g = pipeline::run_guide(&cfg, opts)?;
            println!("{} guidance records, {} endpoint calls", g.records.len(), g.endpoint_calls);
        }
        Command::Simulate => {
            for (config, records) in pipeline::run_simulate(&cfg, opts)? {
                println!("{config}: {} cases", records.len());
            }
        }
        Command::Evaluate => {
            pipeline::run_evaluate(&cfg, opts)?;
            print!("{}", std::fs::read_to_string(cfg.output_dir.join(pipeline::REPORT_MD))?);
        }
        Command::Run => {
            pipeline::run_calibrate(&cfg, opts)?;
            pipeline::run_predict(&cfg, opts)?;
            if cfg.configs.contains(&DecisionConfig::Confguide) {
                pipeline::run_guide(&cfg, opts)?;
            }
            pipeline::run_simulate(&cfg, opts)?;
            pipeline::run_evaluate(&cfg, opts)?;
            print!("{}", std::fs::read_to_string(cfg.output_dir.join(pipeline::REPORT_MD))?);
        }
        Command::Serve { bind } => {
            let inputs = pipeline::load_review_inputs(&cfg, opts)?;
            let token = match &cfg.serve.token_env {
                Some(var) => Some(std::env::var(var).with_context(|| format!("{var} is not set"))?),
                None => None,
            };
            let state = AppState::new(
                inputs,
                ServiceOptions {
                    out_dir: cfg.output_dir.clone(),
                    image_base: cfg.images_dir(),
                    view: cfg.view,
                    seed: cfg.seed,
                    token,
                },
            )?;
            let bind = bind.unwrap_or_else(|| cfg.serve.bind.clone());
            tokio::runtime::Runtime::new()?.block_on(api::serve(state, &bind))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
