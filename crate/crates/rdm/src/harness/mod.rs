//! Experiment surface: dataset generation, training, calibration,
//! closed-loop evaluation, ablation sweeps, rendering, and the binary file
//! formats behind them. Identical config + seed reproduces identical bytes.

mod checkpoint;
mod config;
mod eval;
mod fmt;
mod render;
mod train;

pub use checkpoint::{Checkpoint, ModelMeta, CKPT_MAGIC, CKPT_VERSION};
pub use config::RunConfig;
pub use eval::{
    cmd_eval, cmd_sweep, episode_pair, eval_variant, expert_reference, run_episode,
    write_episode_log, EpisodeResult, EpisodeSetup, LogRow, VariantMetrics,
};
pub use fmt::{f9, f9_opt};
pub use render::{cmd_render, read_episode, render_maze, render_score_curve, RenderRow};
pub use train::{
    calibration_of, calibration_pairs, cmd_calibrate, cmd_gen_data, cmd_train,
    UNTRAINED_LOSS_THRESHOLD,
};
