use std::io::Write;
use std::path::Path;

use rand::Rng as _;

use crate::denoiser;
use crate::diffusion::{self, DiffusionModel, Trajectory};
use crate::envs::{self, Dataset, DatasetGenConfig, MazeWorld};
use crate::error::{Error, Result};
use crate::likelihood::{self, Calibration};
use crate::numkit::{AdamConfig, AdamState, Tape};
use crate::rng;

use super::checkpoint::{Checkpoint, ModelMeta};
use super::config::RunConfig;
use super::fmt::f9;

/// Generate the expert dataset and write it to `config.dataset`. Doors are
/// held open during generation, so closures at eval are out-of-distribution.
pub fn cmd_gen_data(config: &RunConfig) -> Result<()> {
    config.validate()?;
    let world = MazeWorld::load(Path::new(&config.world))?.doors_open();
    let mut gen = DatasetGenConfig::new(config.episodes, config.data_seed);
    gen.jitter_frac = config.jitter_frac;
    let dataset = envs::generate_dataset(&world, &gen)?;

    let path = Path::new(&config.dataset);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    dataset.save(path)?;

    println!(
        "dataset: {} episodes, {} states -> {}",
        dataset.episodes.len(),
        dataset.state_count(),
        config.dataset
    );
    for d in 0..dataset.norm.dim() {
        println!(
            "  dim {d}: min {} max {}",
            f9(dataset.norm.min[d] as f64),
            f9(dataset.norm.max[d] as f64)
        );
    }
    for d in dataset.norm.degenerate_dims() {
        eprintln!("warning: dimension {d} is degenerate (min == max); it will normalize to 0");
    }
    Ok(())
}

/// Train the denoiser with Adam on ε-prediction and write the checkpoint
/// plus a `step,loss` CSV. On a NaN loss the run aborts, keeping the last
/// periodic checkpoint on disk.
pub fn cmd_train(config: &RunConfig) -> Result<()> {
    config.validate()?;
    let dataset = Dataset::load(Path::new(&config.dataset))?;
    let windows = dataset.windows(config.horizon);
    if windows.is_empty() {
        return Err(Error::Dataset(format!(
            "no {}-length windows in dataset",
            config.horizon
        )));
    }

    let cfg = config.denoiser_config();
    let schedule = diffusion::make_schedule(config.n_diffusion, config.schedule)?;
    if !schedule.near_total_corruption() {
        eprintln!(
            "warning: alpha_bar[N] = {:.4} >= 0.01; from-scratch sampling will remember its init",
            schedule.alpha_bar(schedule.n())
        );
    }
    let mut params = denoiser::init_params(cfg, config.train_seed)?;
    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let named = params.named();
    let named_refs: Vec<(&str, &crate::numkit::Tensor)> =
        named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let mut adam = AdamState::new(adam_cfg, &named_refs);
    drop(named);

    let mut train_rng = rng::derive(config.train_seed, &[0x7247]);
    let mut loss_rows: Vec<(usize, f64)> = Vec::new();
    let mut running = 0.0f64;
    let mut running_n = 0usize;
    let mut last_saved = false;

    let ckpt_path = Path::new(&config.checkpoint);
    let t0 = std::time::Instant::now();

    for step in 1..=config.train_steps {
        let batch: Vec<Trajectory> = (0..config.batch_size)
            .map(|_| {
                let (e, s) = windows[train_rng.gen_range(0..windows.len())];
                dataset.window(e, s, config.horizon)
            })
            .collect::<Result<_>>()?;

        let mut tape = Tape::new();
        let vars = denoiser::register(&mut tape, &params);
        let loss_id =
            diffusion::training_loss_on_tape(&mut tape, &vars, &cfg, &schedule, &batch, &mut train_rng)?;
        let loss = tape.value(loss_id).item();

        if !loss.is_finite() {
            let kept = if last_saved {
                format!("last checkpoint kept at {}", config.checkpoint)
            } else {
                "no checkpoint had been written yet".to_string()
            };
            return Err(Error::runtime(format!(
                "training loss became non-finite at step {step}; {kept}"
            )));
        }

        let grads = tape.backward(loss_id)?;
        {
            let grad_tensors: Vec<crate::numkit::Tensor> = vars
                .ids
                .iter()
                .map(|&id| grads.get(id).expect("leaf gradient populated").clone())
                .collect();
            let mut named_mut = params.named_mut();
            let mut param_refs: Vec<&mut crate::numkit::Tensor> =
                named_mut.iter_mut().map(|(_, t)| &mut **t).collect();
            let grad_refs: Vec<&crate::numkit::Tensor> = grad_tensors.iter().collect();
            adam.step(&mut param_refs, &grad_refs)?;
        }

        running += loss as f64;
        running_n += 1;
        loss_rows.push((step, loss as f64));
        if step % config.log_every == 0 || step == config.train_steps {
            println!(
                "step {step}/{}: loss {:.5} ({:.1}s)",
                config.train_steps,
                running / running_n as f64,
                t0.elapsed().as_secs_f64()
            );
            running = 0.0;
            running_n = 0;
        }

        if step % config.checkpoint_every == 0 || step == config.train_steps {
            let final_loss = loss_rows
                .iter()
                .rev()
                .take(100)
                .map(|&(_, l)| l)
                .sum::<f64>()
                / loss_rows.len().min(100) as f64;
            let ck = Checkpoint {
                meta: meta_from_config(config, final_loss as f32),
                model: DiffusionModel {
                    schedule: schedule.clone(),
                    params: denoiser::DenoiserParams::from_named(
                        cfg,
                        params
                            .named()
                            .into_iter()
                            .map(|(n, t)| (n, t.clone()))
                            .collect(),
                    )?,
                    norm: dataset.norm.clone(),
                },
                calibration: None,
            };
            ck.save(ckpt_path)?;
            last_saved = true;
        }
    }

    let loss_csv = config.out_path("loss.csv");
    if let Some(parent) = loss_csv.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(&loss_csv)?;
    writeln!(f, "step,loss")?;
    for (step, loss) in &loss_rows {
        writeln!(f, "{step},{}", f9(*loss))?;
    }
    println!("checkpoint -> {}", config.checkpoint);
    println!("loss curve -> {}", loss_csv.display());
    Ok(())
}

fn meta_from_config(config: &RunConfig, final_loss: f32) -> ModelMeta {
    ModelMeta {
        horizon: config.horizon,
        state_dim: config.state_dim,
        width: config.width,
        depth: config.depth,
        embed_dim: config.embed_dim,
        n_diffusion: config.n_diffusion,
        schedule: config.schedule,
        train_steps: config.train_steps,
        batch_size: config.batch_size,
        lr: config.lr,
        train_seed: config.train_seed,
        final_loss,
    }
}

/// Threshold above which calibration warns that the model looks untrained.
pub const UNTRAINED_LOSS_THRESHOLD: f32 = 0.2;

/// Sample fresh plans at random valid start/goal pairs and append the
/// calibration statistics to the checkpoint.
pub fn cmd_calibrate(config: &RunConfig) -> Result<()> {
    config.validate()?;
    let mut ck = Checkpoint::load(Path::new(&config.checkpoint))?;
    let world = MazeWorld::load(Path::new(&config.world))?;
    if ck.meta.final_loss > UNTRAINED_LOSS_THRESHOLD {
        eprintln!(
            "warning: final training loss {:.3} > {UNTRAINED_LOSS_THRESHOLD}; model may be untrained, calibration produced anyway",
            ck.meta.final_loss
        );
    }

    let probe = config.probe_config();
    let mut cal_rng = rng::derive(config.calib_seed, &[0xCA11]);
    let pairs = calibration_pairs(&world, &ck.model, config.calib_samples, &mut cal_rng)?;
    let cal = likelihood::calibrate(&ck.model, &pairs, &probe, &mut cal_rng)?;

    println!(
        "calibration over {} fresh plans: mu {} sigma {}",
        cal.samples,
        f9(cal.mu),
        f9(cal.sigma)
    );
    ck.calibration = Some((cal, probe));
    ck.save(Path::new(&config.checkpoint))?;
    println!("checkpoint updated -> {}", config.checkpoint);
    Ok(())
}

/// Random passable start/goal pairs (normalized states, zero velocity) with
/// a valid expert path between them.
pub fn calibration_pairs(
    world: &MazeWorld,
    model: &DiffusionModel,
    count: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let cells = world.free_cells();
    let mut pairs = Vec::with_capacity(count);
    let mut attempts = 0;
    while pairs.len() < count {
        attempts += 1;
        if attempts > 100 * count {
            return Err(Error::runtime("could not sample calibration pairs"));
        }
        let a = cells[rng.gen_range(0..cells.len())];
        let b = cells[rng.gen_range(0..cells.len())];
        if a == b || envs::expert_path(world, a, b).is_err() {
            continue;
        }
        let sa = world.cell_center(a);
        let sb = world.cell_center(b);
        pairs.push((
            model.norm.normalize_state(&[sa[0], sa[1], 0.0, 0.0]),
            model.norm.normalize_state(&[sb[0], sb[1], 0.0, 0.0]),
        ));
    }
    Ok(pairs)
}

/// Make a `Calibration` without touching the checkpoint (used by eval when
/// the footer is present, and by tests).
pub fn calibration_of(ck: &Checkpoint) -> Result<(Calibration, crate::likelihood::ProbeConfig)> {
    ck.calibration
        .clone()
        .ok_or_else(|| Error::config("checkpoint is not calibrated; run `calibrate` first"))
}
