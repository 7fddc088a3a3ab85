use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng as _;
use serde::Serialize;

use crate::diffusion::DiffusionModel;
use crate::envs::{self, EnvState, MazeWorld};
use crate::error::{Error, Result};
use crate::likelihood::{Calibration, ExecutionTrace, ProbeConfig};
use crate::replan::{self, Controller, ReplanPolicy, ReplanStats};
use crate::rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::fmt::{f9, f9_opt};

/// Worker pool sized by RDM_THREADS (defaults to the machine).
fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("RDM_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    })
}

/// One logged env step.
#[derive(Clone, Debug)]
pub struct LogRow {
    pub episode: usize,
    pub t: usize,
    pub obs: [f32; 4],
    pub plan: [f32; 4],
    pub action: [f32; 2],
    pub score: Option<f64>,
    pub decision: &'static str,
    pub action_taken: &'static str,
    pub kl: Vec<Option<f64>>,
    pub reward: u8,
}

#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub episode: usize,
    pub success: bool,
    pub steps: usize,
    pub expert_steps: usize,
    pub normalized_return: f64,
    pub stats: ReplanStats,
    pub rows: Vec<LogRow>,
}

/// Aggregate metrics for one (variant, epsilon) cell, meaned across seeds.
#[derive(Clone, Debug, Serialize)]
pub struct VariantMetrics {
    pub variant: String,
    pub epsilon: f32,
    pub seeds: Vec<u64>,
    pub episodes_per_seed: usize,
    pub success_rate: f64,
    pub success_rate_se: f64,
    pub normalized_return: f64,
    pub normalized_return_se: f64,
    pub mean_steps_to_goal: Option<f64>,
    pub total_diffusion_steps: u64,
    pub scratch_replans: u64,
    pub future_replans: u64,
    pub prev_replans: u64,
    pub wall_clock_s: Option<f64>,
}

/// Episode start/goal cells derive from (seed, episode) only, so every
/// variant sees the same tasks.
pub fn episode_pair(
    world: &MazeWorld,
    seed: u64,
    episode: usize,
    min_path_cells: usize,
    max_path_cells: usize,
) -> Result<((usize, usize), (usize, usize), usize)> {
    let mut rng = rng::derive(seed, &[0xE81D, episode as u64]);
    let cells = world.free_cells();
    for _ in 0..1000 {
        let start = cells[rng.gen_range(0..cells.len())];
        let goal = cells[rng.gen_range(0..cells.len())];
        if start == goal {
            continue;
        }
        if let Ok(path) = envs::expert_path(world, start, goal) {
            if path.len() >= min_path_cells
                && (max_path_cells == 0 || path.len() <= max_path_cells)
            {
                return Ok((start, goal, path.len()));
            }
        }
    }
    Err(Error::runtime("could not sample an episode start/goal pair"))
}

/// Deterministic expert reference: PD tracking of the A* path with zero
/// jitter on the doors-open world. Returns the step count.
pub fn expert_reference(
    world: &MazeWorld,
    start: (usize, usize),
    goal: (usize, usize),
) -> Result<usize> {
    let nominal = world.doors_open().with_epsilon(0.0);
    let path = envs::expert_path(&nominal, start, goal)?;
    let mut gen = envs::DatasetGenConfig::new(1, 0);
    gen.jitter_frac = 0.0;
    let mut rng = rng::from_seed(0);
    let ep = envs::rollout_expert(&nominal, &path, &gen, &mut rng)
        .ok_or_else(|| Error::runtime("expert reference failed to reach the goal"))?;
    Ok(ep.len() - 1)
}

pub struct EpisodeSetup<'a> {
    pub model: &'a DiffusionModel,
    pub world: &'a MazeWorld,
    pub policy: ReplanPolicy,
    pub probe: ProbeConfig,
    pub cal: Calibration,
    pub budget: replan::ReplanBudget,
    pub cooldown: usize,
    pub step_cap: Option<usize>,
    pub epsilon: f32,
    pub min_path_cells: usize,
    pub max_path_cells: usize,
}

/// Run one closed-loop episode. The policy stream and env stream derive
/// independently from (seed, episode, variant) and (seed, episode).
pub fn run_episode(
    setup: &EpisodeSetup,
    seed: u64,
    episode: usize,
) -> Result<EpisodeResult> {
    let (start_cell, goal_cell, _) = episode_pair(
        setup.world,
        seed,
        episode,
        setup.min_path_cells,
        setup.max_path_cells,
    )?;
    let expert_steps = expert_reference(setup.world, start_cell, goal_cell)?;

    let world = setup.world.with_goal(goal_cell).with_epsilon(setup.epsilon);
    let model = setup.model;
    let norm = &model.norm;
    let h = model.cfg().horizon;

    let variant_tag = policy_tag(&setup.policy);
    let mut policy_rng = rng::derive(seed, &[0x9011, episode as u64, variant_tag]);
    let mut env_rng = rng::derive(seed, &[0xE272, episode as u64]);

    let start = world.cell_center(start_cell);
    let goal = world.cell_center(goal_cell);
    let start_norm = norm.normalize_state(&[start[0], start[1], 0.0, 0.0]);
    let goal_norm = norm.normalize_state(&[goal[0], goal[1], 0.0, 0.0]);

    let mut ctrl = Controller::new(
        setup.policy.clone(),
        setup.budget,
        setup.probe.clone(),
        setup.cal,
        setup.cooldown,
        setup.step_cap,
    )?;
    let plan = replan::replan_scratch(model, &start_norm, &goal_norm, &mut policy_rng)?;
    ctrl.charge_initial_plan();
    let mut trace = ExecutionTrace::new(plan, &start_norm, &goal_norm)?;

    let mut env_state = EnvState::at(start);
    let mut rows = Vec::new();
    let mut success = false;
    let mut steps = 0usize;
    let probe_steps = setup.probe.steps.clone();

    for t in 0..world.max_steps {
        let outcome = ctrl.step(model, &mut trace, t, &mut policy_rng)?;

        let k = trace.k();
        let target_row = (k + 1).min(h - 1);
        let plan_norm = trace.planned_row(target_row).to_vec();
        let target = norm.denormalize_state(&plan_norm);
        let action = envs::inverse_dynamics(&world, &env_state.as_array(), &target);

        let r = envs::step(&world, &env_state, action, &mut env_rng);
        env_state = r.state;
        steps = t + 1;

        let obs = env_state.as_array();
        if !trace.exhausted() {
            trace.advance(&norm.normalize_state(&obs), &action)?;
        }

        let kl = match &outcome.kl_per_step {
            Some(per) => probe_steps
                .iter()
                .map(|&s| per.iter().find(|(i, _)| *i == s).map(|(_, v)| *v))
                .collect(),
            None => vec![None; probe_steps.len()],
        };
        rows.push(LogRow {
            episode,
            t,
            obs,
            plan: [plan_norm[0], plan_norm[1], plan_norm[2], plan_norm[3]],
            action,
            score: outcome.score,
            decision: outcome.decision.as_str(),
            action_taken: outcome.action.as_str(),
            kl,
            reward: r.reward,
        });

        if r.reward == 1 {
            success = true;
            break;
        }
        if r.done {
            break;
        }
    }

    let normalized_return = if success {
        100.0 * expert_steps as f64 / steps as f64
    } else {
        0.0
    };
    Ok(EpisodeResult {
        episode,
        success,
        steps,
        expert_steps,
        normalized_return,
        stats: ctrl.stats,
        rows,
    })
}

fn policy_tag(p: &ReplanPolicy) -> u64 {
    match p {
        ReplanPolicy::Rdm { .. } => 1,
        ReplanPolicy::DdFixed { .. } => 2,
        ReplanPolicy::Sdm { .. } => 3,
        ReplanPolicy::Rpdm { .. } => 4,
        ReplanPolicy::OpenLoop => 5,
    }
}

/// Evaluate one policy variant over all seeds and episodes; episodes run on
/// the worker pool, results aggregate in episode order.
pub fn eval_variant(
    setup: &EpisodeSetup,
    seeds: &[u64],
    episodes: usize,
) -> Result<(VariantMetrics, Vec<(u64, Vec<EpisodeResult>)>)> {
    let t0 = std::time::Instant::now();
    let mut per_seed: Vec<(u64, Vec<EpisodeResult>)> = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let results: Vec<Result<EpisodeResult>> = pool().install(|| {
            use rayon::prelude::*;
            (0..episodes)
                .into_par_iter()
                .map(|e| run_episode(setup, seed, e))
                .collect()
        });
        let results: Vec<EpisodeResult> = results.into_iter().collect::<Result<_>>()?;
        per_seed.push((seed, results));
    }

    let mut success_means = Vec::with_capacity(seeds.len());
    let mut return_means = Vec::with_capacity(seeds.len());
    let mut steps_to_goal = Vec::new();
    let mut total_steps = 0u64;
    let (mut scratch, mut future, mut prev) = (0u64, 0u64, 0u64);
    for (_, results) in &per_seed {
        let n = results.len() as f64;
        success_means.push(results.iter().filter(|r| r.success).count() as f64 / n);
        return_means.push(results.iter().map(|r| r.normalized_return).sum::<f64>() / n);
        for r in results {
            if r.success {
                steps_to_goal.push(r.steps as f64);
            }
            total_steps += r.stats.total_steps as u64;
            scratch += r.stats.scratch_count as u64;
            future += r.stats.future_count as u64;
            prev += r.stats.prev_count as u64;
        }
    }

    let metrics = VariantMetrics {
        variant: setup.policy.name().to_string(),
        epsilon: setup.epsilon,
        seeds: seeds.to_vec(),
        episodes_per_seed: episodes,
        success_rate: mean(&success_means),
        success_rate_se: se(&success_means),
        normalized_return: mean(&return_means),
        normalized_return_se: se(&return_means),
        mean_steps_to_goal: if steps_to_goal.is_empty() {
            None
        } else {
            Some(mean(&steps_to_goal))
        },
        total_diffusion_steps: total_steps,
        scratch_replans: scratch,
        future_replans: future,
        prev_replans: prev,
        wall_clock_s: Some(t0.elapsed().as_secs_f64()),
    };
    Ok((metrics, per_seed))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error across seed means; 0 for a single seed.
fn se(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    world: &'a str,
    eval_episodes: usize,
    equal_budget: bool,
    budget_cap: Option<usize>,
    variants: &'a [VariantMetrics],
}

/// Build the per-variant episode setup from config + checkpoint.
pub fn setups<'a>(
    config: &RunConfig,
    ck: &'a Checkpoint,
    world: &'a MazeWorld,
    epsilon: f32,
) -> Result<Vec<EpisodeSetup<'a>>> {
    let (cal, probe) = super::train::calibration_of(ck)?;
    let budget = config.replan_budget();
    config
        .policies
        .iter()
        .map(|name| {
            Ok(EpisodeSetup {
                model: &ck.model,
                world,
                policy: config.policy_by_name(name)?,
                probe: probe.clone(),
                cal,
                budget,
                cooldown: config.cooldown,
                step_cap: config.step_cap(),
                epsilon,
                min_path_cells: config.eval_min_path_cells,
                max_path_cells: config.eval_max_path_cells,
            })
        })
        .collect()
}

/// Closed-loop evaluation of every configured policy variant: writes
/// metrics JSON and one per-(variant, seed) episode log CSV.
pub fn cmd_eval(config: &RunConfig) -> Result<()> {
    config.validate()?;
    if config.seeds.is_empty() {
        return Err(Error::config("eval requires --seed (or non-empty `seeds`)"));
    }
    let ck = Checkpoint::load(Path::new(&config.checkpoint))?;
    let world = MazeWorld::load(Path::new(&config.world))?;
    let epsilon = if config.epsilon >= 0.0 {
        config.epsilon
    } else {
        world.epsilon
    };

    std::fs::create_dir_all(config.out_path("logs"))?;
    let mut all_metrics = Vec::new();
    for setup in setups(config, &ck, &world, epsilon)? {
        let (mut metrics, per_seed) = eval_variant(&setup, &config.seeds, config.eval_episodes)?;
        if !config.report_timing {
            metrics.wall_clock_s = None;
        }
        println!(
            "{}: success {:.3} +/- {:.3}, return {:.1} +/- {:.1}, steps {} (scratch {} / future {} / prev {})",
            metrics.variant,
            metrics.success_rate,
            metrics.success_rate_se,
            metrics.normalized_return,
            metrics.normalized_return_se,
            metrics.total_diffusion_steps,
            metrics.scratch_replans,
            metrics.future_replans,
            metrics.prev_replans,
        );
        for (seed, results) in &per_seed {
            let path = config.out_path(&format!(
                "logs/{}_s{}.csv",
                metrics.variant, seed
            ));
            write_episode_log(&path, results, &setup.probe)?;
        }
        all_metrics.push(metrics);
    }

    let doc = MetricsDoc {
        world: &config.world,
        eval_episodes: config.eval_episodes,
        equal_budget: config.equal_budget,
        budget_cap: config.step_cap(),
        variants: &all_metrics,
    };
    let path = config.out_path("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
    println!("metrics -> {}", path.display());
    Ok(())
}

pub fn write_episode_log(
    path: &Path,
    results: &[EpisodeResult],
    probe: &ProbeConfig,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let kl_cols: Vec<String> = probe.steps.iter().map(|s| format!("kl_i{s}")).collect();
    writeln!(
        f,
        "episode,t,obs_x,obs_y,obs_vx,obs_vy,plan_x,plan_y,plan_vx,plan_vy,act_ax,act_ay,score,decision,action,{},reward",
        kl_cols.join(",")
    )?;
    for r in results {
        for row in &r.rows {
            let kl: Vec<String> = row.kl.iter().map(|v| f9_opt(*v)).collect();
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                row.episode,
                row.t,
                f9(row.obs[0] as f64),
                f9(row.obs[1] as f64),
                f9(row.obs[2] as f64),
                f9(row.obs[3] as f64),
                f9(row.plan[0] as f64),
                f9(row.plan[1] as f64),
                f9(row.plan[2] as f64),
                f9(row.plan[3] as f64),
                f9(row.action[0] as f64),
                f9(row.action[1] as f64),
                f9_opt(row.score),
                row.decision,
                row.action_taken,
                kl.join(","),
                row.reward
            )?;
        }
    }
    Ok(())
}

/// Sweep one axis, rerunning the evaluation per value; one CSV row per
/// (value, variant).
pub fn cmd_sweep(config: &RunConfig, axis: &str) -> Result<()> {
    config.validate()?;
    if config.seeds.is_empty() {
        return Err(Error::config("sweep requires --seed (or non-empty `seeds`)"));
    }
    let ck = Checkpoint::load(Path::new(&config.checkpoint))?;
    let world = MazeWorld::load(Path::new(&config.world))?;

    let values: Vec<f64> = match axis {
        "epsilon" => config.sweep_epsilons.iter().map(|&v| v as f64).collect(),
        "thresholds" => config.sweep_thresholds.clone(),
        "intervals" => config.sweep_intervals.iter().map(|&v| v as f64).collect(),
        "replan_steps" => {
            if config.sweep_replan_steps.is_empty() {
                // N/6, N/3, N mirrors the replan-step ablation
                let n = config.n_diffusion;
                vec![(n / 6).max(1) as f64, (n / 3).max(1) as f64, n as f64]
            } else {
                config.sweep_replan_steps.iter().map(|&v| v as f64).collect()
            }
        }
        other => {
            return Err(Error::config(format!(
                "unknown sweep axis `{other}` (expected epsilon, thresholds, intervals, replan_steps)"
            )))
        }
    };
    if values.is_empty() {
        return Err(Error::config(format!("sweep axis `{axis}` has no values")));
    }

    std::fs::create_dir_all(&config.out_dir)?;
    let path = config.out_path(&format!("sweep_{axis}.csv"));
    let mut f = std::fs::File::create(&path)?;
    writeln!(
        f,
        "axis,value,variant,success_rate,success_rate_se,normalized_return,normalized_return_se,mean_steps_to_goal,total_diffusion_steps,scratch_replans,future_replans,prev_replans"
    )?;

    for &value in &values {
        let mut cfg = config.clone();
        match axis {
            "epsilon" => cfg.epsilon = value as f32,
            "thresholds" => {
                let ratio = config.theta_scratch / config.theta_future;
                cfg.theta_future = value;
                cfg.theta_scratch = (value * ratio).min(value);
                cfg.sdm_delta = value * config.sdm_delta / config.theta_future;
            }
            "intervals" => {
                cfg.dd_interval_scratch = value as usize;
                cfg.dd_interval_future = ((value as usize) / 8).max(1);
            }
            "replan_steps" => {
                cfg.n_future = value as usize;
                cfg.n_prev = value as usize;
            }
            _ => unreachable!(),
        }
        let epsilon = if cfg.epsilon >= 0.0 {
            cfg.epsilon
        } else {
            world.epsilon
        };
        for setup in setups(&cfg, &ck, &world, epsilon)? {
            let (m, _) = eval_variant(&setup, &cfg.seeds, cfg.eval_episodes)?;
            writeln!(
                f,
                "{axis},{},{},{},{},{},{},{},{},{},{},{}",
                f9(value),
                m.variant,
                f9(m.success_rate),
                f9(m.success_rate_se),
                f9(m.normalized_return),
                f9(m.normalized_return_se),
                f9_opt(m.mean_steps_to_goal),
                m.total_diffusion_steps,
                m.scratch_replans,
                m.future_replans,
                m.prev_replans
            )?;
            println!(
                "{axis}={value}: {} success {:.3} return {:.1}",
                m.variant, m.success_rate, m.normalized_return
            );
        }
    }
    println!("sweep -> {}", path.display());
    Ok(())
}
