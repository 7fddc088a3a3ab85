//! Monte Carlo and overfit-model oracles for the diffusion machinery.

mod common;

use rdm::denoiser::DenoiserConfig;
use rdm::diffusion::{
    self, make_schedule, p_mean, posterior_params, q_sample, Conditioning, ScheduleKind,
    Trajectory,
};
use rdm::numkit::Tensor;
use rdm::rng;

/// Composing the one-step forward kernels must match the closed-form
/// marginal used by q_sample: MC over 1e4 draws at D = 1.
#[test]
fn marginal_consistency_monte_carlo() {
    let n = 16;
    let schedule = make_schedule(n, ScheduleKind::Cosine).unwrap();
    let x0 = 0.7f64;
    let target_i = 9;
    let draws = 10_000;

    let mut rng = rng::from_seed(99);
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for _ in 0..draws {
        // iterate τ_i = √(1−β_i)·τ_{i−1} + √β_i·z, the one-step kernel
        let mut x = x0;
        for i in 1..=target_i {
            let z: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
            x = (1.0 - schedule.beta(i)).sqrt() * x + schedule.beta(i).sqrt() * z;
        }
        sum += x;
        sum_sq += x * x;
    }
    let mean = sum / draws as f64;
    let var = sum_sq / draws as f64 - mean * mean;

    let expect_mean = schedule.alpha_bar(target_i).sqrt() * x0;
    let expect_var = 1.0 - schedule.alpha_bar(target_i);
    let se_mean = (expect_var / draws as f64).sqrt();
    assert!(
        (mean - expect_mean).abs() < 3.0 * se_mean,
        "mean {mean} vs {expect_mean} (3 SE = {})",
        3.0 * se_mean
    );
    assert!(
        (var - expect_var).abs() / expect_var < 0.05,
        "var {var} vs {expect_var}"
    );
}

/// q_sample empirical moments against the closed form, 1e4 draws.
#[test]
fn q_sample_moments_match_closed_form() {
    let n = 64;
    let schedule = make_schedule(n, ScheduleKind::Cosine).unwrap();
    let tau0 = Trajectory::from_rows(&[vec![0.45]]).unwrap();
    let i = 20;
    let draws = 10_000;
    let mut rng = rng::from_seed(7);
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for _ in 0..draws {
        let eps = Tensor::std_normal(vec![1, 1], &mut rng);
        let x = q_sample(&schedule, &tau0, i, &eps).unwrap().row(0)[0] as f64;
        sum += x;
        sum_sq += x * x;
    }
    let mean = sum / draws as f64;
    let var = sum_sq / draws as f64 - mean * mean;
    let expect_mean = schedule.alpha_bar(i).sqrt() * 0.45;
    let expect_var = 1.0 - schedule.alpha_bar(i);
    let se = (expect_var / draws as f64).sqrt();
    assert!((mean - expect_mean).abs() < 3.0 * se);
    assert!((var - expect_var).abs() / expect_var < 0.05);
}

fn overfit_cfg() -> DenoiserConfig {
    DenoiserConfig {
        horizon: 16,
        state_dim: 4,
        width: 32,
        depth: 2,
        embed_dim: 8,
    }
}

/// A model trained to convergence on one sample: its reverse-step mean must
/// match the Gaussian posterior toward that sample (element RMSE < 0.05).
#[test]
fn overfit_model_matches_posterior_mean() {
    let cfg = overfit_cfg();
    let tau0 = common::smooth_trajectory(cfg.horizon);
    let model = common::overfit_one_sample(cfg, 32, &tau0, 1200, 11);

    let cond = Conditioning {
        pins: Vec::new(),
        goal: Some(tau0.row(cfg.horizon - 1).to_vec()),
    };
    let cond_embed = cond.embedding(&model.params).unwrap();
    let mut rng = rng::from_seed(5);
    for &i in &[3usize, 6, 12] {
        let eps = Tensor::std_normal(vec![cfg.horizon, cfg.state_dim], &mut rng);
        let tau_i = q_sample(&model.schedule, &tau0, i, &eps).unwrap();
        let (mu_q, _) = posterior_params(&model.schedule, &tau_i, &tau0, i).unwrap();
        let mu_p = p_mean(&model, &tau_i, i, &cond_embed).unwrap();
        let mse: f64 = mu_q
            .tensor()
            .as_slice()
            .iter()
            .zip(mu_p.tensor().as_slice())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / (cfg.horizon * cfg.state_dim) as f64;
        let rmse = mse.sqrt();
        assert!(rmse < 0.05, "step {i}: posterior-mean RMSE {rmse}");
    }
}

/// Sampling from the overfit model with its endpoints pinned reproduces the
/// memorized trajectory.
#[test]
fn overfit_model_sampling_recovers_sample() {
    let cfg = overfit_cfg();
    let tau0 = common::smooth_trajectory(cfg.horizon);
    let model = common::overfit_one_sample(cfg, 32, &tau0, 1200, 11);
    let cond = Conditioning::goal_reaching(tau0.row(0), tau0.row(cfg.horizon - 1), cfg.horizon);
    let mut rng = rng::from_seed(17);
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let plan = diffusion::sample_plan(&model, &cond, &mut rng).unwrap();
        for (a, b) in plan
            .tensor()
            .as_slice()
            .iter()
            .zip(tau0.tensor().as_slice())
        {
            worst = worst.max(((a - b) as f64).abs());
        }
    }
    assert!(worst < 0.22, "worst deviation from memorized sample {worst}");
}

/// partial_denoise with n = N forgets its input: paired samples from the
/// same rng stream on different inits land close together.
#[test]
fn full_partial_denoise_forgets_input() {
    let cfg = overfit_cfg();
    let tau0 = common::smooth_trajectory(cfg.horizon);
    let model = common::overfit_one_sample(cfg, 32, &tau0, 1200, 11);
    let cond = Conditioning::goal_reaching(tau0.row(0), tau0.row(cfg.horizon - 1), cfg.horizon);

    let init_a = Trajectory::new(Tensor::zeros(vec![cfg.horizon, cfg.state_dim])).unwrap();
    let init_b = common::smooth_trajectory(cfg.horizon);
    let a = diffusion::partial_denoise(&model, &init_a, 32, &cond, &mut rng::from_seed(3)).unwrap();
    let b = diffusion::partial_denoise(&model, &init_b, 32, &cond, &mut rng::from_seed(3)).unwrap();
    let mean_l2: f64 = a
        .tensor()
        .as_slice()
        .iter()
        .zip(b.tensor().as_slice())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
        / (cfg.horizon * cfg.state_dim) as f64;
    assert!(mean_l2 < 0.05, "mean distance {mean_l2}");
}
