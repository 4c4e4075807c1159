//! Command-line harness: simulate data, estimate the score or Hessian, run
//! level sweeps and fit parameters.

mod commands;
mod config;
mod io;

use std::path::PathBuf;

use anyhow::{Context, Result};
use ccpf_hessian::model::BuiltinModel;
use ccpf_hessian::{LevelSpec, PairCoupling};
use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{EstimateKind, FitMethod, SweepKind};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "ccpf-hessian", version, about = "Unbiased score and Hessian estimation for partially observed diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate observations (and the latent path) from a model.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Discretization level of the simulated path.
        #[arg(long)]
        level: Option<u32>,
        /// Number of observations.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Estimate the score or the Hessian at θ.
    Estimate {
        #[arg(value_enum)]
        kind: EstimateKind,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        est: EstimatorArgs,
        #[arg(long)]
        data: PathBuf,
        /// Add Kalman reference derivatives (linear-Gaussian models only).
        #[arg(long)]
        oracle: bool,
    },
    /// Bias, increment variance or MSE per level, with fitted log-log slopes.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        est: EstimatorArgs,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated levels.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        levels: Option<Vec<u32>>,
    },
    /// Fit θ by SGD or Newton's method.
    Fit {
        #[arg(value_enum)]
        method: FitMethod,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        est: EstimatorArgs,
        #[arg(long)]
        data: PathBuf,
        /// Use Kalman derivatives instead of the estimators.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_delimiter = ',')]
        init: Option<Vec<f64>>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Relative distance to the reference (or score norm without one).
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        reference: Option<Vec<f64>>,
    },
}

#[derive(Args)]
struct Common {
    /// Model name; defaults to the one recorded with the data or config.
    #[arg(long, value_parser = PossibleValuesParser::new(BuiltinModel::NAMES))]
    model: Option<String>,
    #[arg(long, value_delimiter = ',')]
    theta: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config (or a run manifest) applied over the model preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the long-horizon, high-replicate experiment sizes.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimatorArgs {
    /// Truncation level of the level distribution.
    #[arg(long = "L-max")]
    l_max: Option<u32>,
    /// Particles per filter.
    #[arg(long = "N")]
    particles: Option<usize>,
    #[arg(long)]
    m_star: Option<usize>,
    /// Replicates.
    #[arg(long = "M")]
    replicates: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    coupling: Option<Coupling>,
    #[arg(long)]
    meeting_cap: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Coupling {
    Maximal,
    Inversion,
}

impl EstimatorArgs {
    fn apply(&self, config: &mut RunConfig) {
        let est = &mut config.estimator;
        if let Some(l) = self.l_max {
            est.levels = LevelSpec::Truncated { l_max: l };
        }
        if let Some(v) = self.particles {
            est.particles = v;
        }
        if let Some(v) = self.m_star {
            est.m_star = v;
        }
        if let Some(v) = self.replicates {
            est.replicates = v;
        }
        if let Some(v) = self.workers {
            est.workers = Some(v);
        }
        if let Some(c) = self.coupling {
            est.coupling = match c {
                Coupling::Maximal => PairCoupling::Maximal,
                Coupling::Inversion => PairCoupling::Inversion,
            };
        }
        if let Some(v) = self.meeting_cap {
            est.meeting_cap = v;
        }
    }
}

/// Preset, then config file, then the common flags.
fn resolve(common: &Common, data: Option<&PathBuf>, fitting: bool) -> Result<RunConfig> {
    let file = common.config.as_deref().map(config::read_config_file).transpose()?;
    let model = common
        .model
        .clone()
        .or_else(|| file.as_ref().and_then(config::model_in))
        .or_else(|| data.and_then(|d| io::data_model(d)))
        .context("no model given: pass --model, or a config or data file that records one")?;
    let mut config = config::layered(&model, common.paper_scale, fitting, file)?;
    if let Some(theta) = &common.theta {
        config.theta = theta.clone();
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, level, n } => {
            let mut config = resolve(&common, None, false)?;
            if let Some(l) = level {
                config.level = l;
            }
            if let Some(n) = n {
                config.n = n;
            }
            commands::simulate(&config, &common.out)
        }
        Command::Estimate { kind, common, est, data, oracle } => {
            let mut config = resolve(&common, Some(&data), false)?;
            est.apply(&mut config);
            config.oracle |= oracle;
            config.estimator.validate()?;
            commands::estimate(kind, &config, &data, &common.out)
        }
        Command::Sweep { kind, common, est, data, levels } => {
            let mut config = resolve(&common, Some(&data), false)?;
            est.apply(&mut config);
            if let Some(levels) = levels {
                config.levels = levels;
            }
            commands::sweep(kind, &config, &data, &common.out)
        }
        Command::Fit { method, common, est, data, oracle, init, learning_rate, max_iter, tolerance, reference } => {
            let mut config = resolve(&common, Some(&data), true)?;
            est.apply(&mut config);
            config.oracle |= oracle;
            let fit = &mut config.fit;
            if let Some(v) = init {
                fit.init = v;
            }
            if let Some(v) = learning_rate {
                fit.learning_rate = v;
            }
            if let Some(v) = max_iter {
                fit.max_iter = v;
            }
            if let Some(v) = tolerance {
                fit.tolerance = v;
            }
            if let Some(v) = reference {
                fit.reference = Some(v);
            }
            commands::fit(method, &config, &data, &common.out)
        }
    }
}

fn main() -> std::process::ExitCode {
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
