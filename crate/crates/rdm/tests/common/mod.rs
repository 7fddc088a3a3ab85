//! Shared fixtures and independent oracles for integration tests.

#![allow(dead_code)]

use rdm::denoiser::{self, DenoiserConfig, DenoiserParams};
use rdm::diffusion::{
    self, make_schedule, DiffusionModel, NormStats, ScheduleKind, Trajectory,
};
use rdm::numkit::{AdamConfig, AdamState, Tape, Tensor};
use rdm::rng::{self, Rng};

/// Train a model to convergence on a single fixed trajectory. Used as the
/// analytic anchor: a converged one-sample model's denoising mean should
/// match the Gaussian posterior toward that sample.
pub fn overfit_one_sample(
    cfg: DenoiserConfig,
    n_diffusion: usize,
    tau0: &Trajectory,
    steps: usize,
    seed: u64,
) -> DiffusionModel {
    let schedule = make_schedule(n_diffusion, ScheduleKind::Cosine).unwrap();
    let mut params = denoiser::init_params(cfg, seed).unwrap();
    let mut adam = {
        let named = params.named();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        AdamState::new(AdamConfig::default(), &refs)
    };
    let mut rng = rng::from_seed(seed ^ 0x5eed);
    let batch: Vec<Trajectory> = vec![tau0.clone(); 8];
    for _ in 0..steps {
        let mut tape = Tape::new();
        let vars = denoiser::register(&mut tape, &params);
        let loss_id = diffusion::training_loss_on_tape(
            &mut tape, &vars, &cfg, &schedule, &batch, &mut rng,
        )
        .unwrap();
        let grads = tape.backward(loss_id).unwrap();
        let grad_tensors: Vec<Tensor> = vars
            .ids
            .iter()
            .map(|&id| grads.get(id).unwrap().clone())
            .collect();
        let mut named_mut = params.named_mut();
        let mut param_refs: Vec<&mut Tensor> =
            named_mut.iter_mut().map(|(_, t)| &mut **t).collect();
        let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
        adam.step(&mut param_refs, &grad_refs).unwrap();
    }
    DiffusionModel {
        schedule,
        params: rebuild(cfg, &params),
        norm: NormStats {
            min: vec![-1.0; cfg.state_dim],
            max: vec![1.0; cfg.state_dim],
        },
    }
}

fn rebuild(cfg: DenoiserConfig, params: &DenoiserParams) -> DenoiserParams {
    DenoiserParams::from_named(
        cfg,
        params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    )
    .unwrap()
}

/// A smooth S-curve trajectory inside [-1, 1], velocity dims consistent
/// with position deltas.
pub fn smooth_trajectory(h: usize) -> Trajectory {
    let rows: Vec<Vec<f32>> = (0..h)
        .map(|t| {
            let s = t as f32 / (h - 1) as f32;
            let x = -0.8 + 1.6 * s;
            let y = 0.6 * (std::f32::consts::PI * s).sin() - 0.2;
            let vx = 1.6 / (h - 1) as f32;
            let vy = 0.6 * std::f32::consts::PI * (std::f32::consts::PI * s).cos()
                / (h - 1) as f32;
            vec![x, y, vx, vy]
        })
        .collect();
    Trajectory::from_rows(&rows).unwrap()
}

/// Rank-based ROC-AUC of `pos` (should score higher) vs `neg`.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0f64;
    for p in pos {
        for n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Draw a standard normal tensor.
pub fn std_normal(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    Tensor::std_normal(shape, rng)
}
