//! Command wiring for the `pgits` binary.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | i/o or internal error |
//! | 2 | configuration error (unreadable or invalid config, bad flag values) |
//! | 3 | training diverged |
//! | 4 | checkpoint or input shape mismatch |
//! | 5 | unstable physics configuration |
//! | 6 | data error (malformed CSV, empty split, missing values) |

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pgits::config::RunConfig;
use pgits::{gradcheck, pipeline, Error};

/// Environment variable holding the log filter, e.g. `PGITS_LOG=debug`.
pub const LOG_ENV: &str = "PGITS_LOG";

#[derive(Debug, Parser)]
#[command(name = "pgits", version, about = "Physics-guided inductive kriging of PM2.5")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the missing rate.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Overrides the physics-loss weight.
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoint.bin and train_log.jsonl.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Score a checkpoint and the baselines on the test months.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Neighbors for the KNN baseline row.
        #[arg(long)]
        k: Option<usize>,
        /// Directory for report.json, per_node.csv and plot.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate every station at every hour.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV.
        #[arg(long, default_value = "predictions.csv")]
        out: PathBuf,
    },
    /// Generate a synthetic advection-diffusion dataset.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Overrides the simulated length.
        #[arg(long)]
        hours: Option<usize>,
        /// Output directory.
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
    },
    /// Finite-difference check of every gradient on a toy model.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Contract(_) => 1,
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Shape(_) => 4,
        Error::Unstable { .. } => 5,
        Error::Data(_) | Error::Parse { .. } => 6,
    }
}

fn load_config(common: &Common) -> pgits::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    if let Some(a) = common.alpha {
        cfg.train.alpha = a;
    }
    if let Some(b) = common.beta {
        cfg.train.beta = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn json<T: serde::Serialize>(v: &T) -> pgits::Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Data(e.to_string()))
}

/// Runs one command; returns the text for stdout.
pub fn run(cli: Cli) -> pgits::Result<String> {
    match cli.command {
        Command::Train { common, out } => {
            let cfg = load_config(&common)?;
            json(&pipeline::train_job(&cfg, &out)?)
        }
        Command::Evaluate {
            common,
            checkpoint,
            k,
            out,
        } => {
            let cfg = load_config(&common)?;
            let report = pipeline::evaluate_job(&cfg, checkpoint.as_deref(), k, out.as_deref())?;
            report.to_json()
        }
        Command::Infer {
            common,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&common)?;
            pipeline::infer_job(&cfg, &checkpoint, &out)?;
            Ok(format!("{}", out.display()))
        }
        Command::Simulate { common, hours, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(h) = hours {
                cfg.simulate.synthetic.hours = h;
            }
            json(&pipeline::simulate_job(&cfg, &out)?)
        }
        Command::Gradcheck { seed } => {
            let reports = [gradcheck::run(seed, true)?, gradcheck::run(seed, false)?];
            for r in &reports {
                log::info!("gradcheck detach={} took {:?}", r.detach_pseudo_labels, r.elapsed);
            }
            let max = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            if max > gradcheck::TOLERANCE {
                return Err(Error::Contract(format!(
                    "gradient check failed: max relative error {max:.3e} > {:e}",
                    gradcheck::TOLERANCE
                )));
            }
            Ok(format!("max relative error {max:.3e}\n{}", json(&reports)?))
        }
    }
}
