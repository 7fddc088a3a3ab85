use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rdm::harness::{self, RunConfig};

#[derive(Parser)]
#[command(name = "rdm", about = "Trajectory-diffusion maze planner with adaptive replanning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set horizon=16 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Base seed; required for eval and sweep.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out_dir: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the expert dataset for the configured world.
    GenData(Common),
    /// Train the denoiser and write a checkpoint.
    Train(Common),
    /// Append likelihood calibration to the checkpoint.
    Calibrate(Common),
    /// Closed-loop evaluation of the configured policies.
    Eval(Common),
    /// Repeat eval over one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of: epsilon, thresholds, intervals, replan_steps.
        #[arg(long)]
        axis: String,
    },
    /// Render one logged episode to SVG.
    Render {
        #[command(flatten)]
        common: Common,
        /// Episode log CSV written by eval.
        #[arg(long)]
        log: PathBuf,
        /// Episode index within the log.
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
}

fn load_config(common: &Common, seed_required: bool) -> rdm::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg = cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
        cfg.data_seed = seed;
        cfg.train_seed = seed;
        cfg.calib_seed = seed;
    }
    if let Some(out) = &common.out_dir {
        cfg.out_dir = out.clone();
    }
    if seed_required && cfg.seeds.is_empty() {
        return Err(rdm::Error::config(
            "--seed is required (or set `seeds` in the config)",
        ));
    }
    Ok(cfg)
}

fn run() -> rdm::Result<()> {
    match Cli::parse().command {
        Command::GenData(c) => harness::cmd_gen_data(&load_config(&c, false)?),
        Command::Train(c) => harness::cmd_train(&load_config(&c, false)?),
        Command::Calibrate(c) => harness::cmd_calibrate(&load_config(&c, false)?),
        Command::Eval(c) => harness::cmd_eval(&load_config(&c, true)?),
        Command::Sweep { common, axis } => {
            harness::cmd_sweep(&load_config(&common, true)?, &axis)
        }
        Command::Render {
            common,
            log,
            episode,
        } => harness::cmd_render(&load_config(&common, false)?, &log, episode),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
