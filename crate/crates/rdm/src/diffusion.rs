//! DDPM machinery: noise schedule, forward corruption, Gaussian posterior,
//! learned reverse step, conditional plan sampling, and the training loss.
//!
//! Schedule coefficients are kept in f64 — the likelihood probes divide by
//! posterior variances that get very small at low steps — while trajectory
//! element math stays f32.

use serde::{Deserialize, Serialize};

use crate::denoiser::{self, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::numkit::{Tape, Tensor, TensorId};
use crate::rng::Rng;

/// Sampled trajectories are clipped to this bound before denormalization,
/// guarding inverse dynamics against rare out-of-range samples.
pub const SAMPLE_CLIP: f32 = 1.5;

/// Slack allowed on normalized dataset values, [-1-δ, 1+δ].
pub const NORM_SLACK: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// β/α/ᾱ coefficient tables indexed by diffusion step i ∈ [1, N].
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn n(&self) -> usize {
        self.beta.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    fn check_step(&self, i: usize) -> Result<()> {
        if i < 1 || i > self.n() {
            return Err(Error::StepOutOfRange {
                step: i,
                lo: 1,
                hi: self.n(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.beta[i - 1]
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.alpha[i - 1]
    }

    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bar[i - 1]
    }

    /// ᾱ[i−1] with the convention ᾱ[0] = 1.
    pub fn alpha_bar_prev(&self, i: usize) -> f64 {
        if i <= 1 {
            1.0
        } else {
            self.alpha_bar[i - 2]
        }
    }

    /// Posterior variance β̃[i] = (1−ᾱ[i−1])/(1−ᾱ[i])·β[i]; zero at i = 1.
    pub fn posterior_var(&self, i: usize) -> f64 {
        (1.0 - self.alpha_bar_prev(i)) / (1.0 - self.alpha_bar(i)) * self.beta(i)
    }

    /// Whether ᾱ[N] is small enough that q_sample at step N forgets its input.
    pub fn near_total_corruption(&self) -> bool {
        self.alpha_bar(self.n()) < 0.01
    }

    /// Raw β table in step order, for checkpoint embedding.
    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Rebuild from a stored β table.
    pub fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::config("schedule needs at least 2 betas"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let s = NoiseSchedule {
            kind,
            beta,
            alpha,
            alpha_bar,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        for i in 1..=n {
            let b = self.beta(i);
            if !(0.0 < b && b < 1.0) {
                return Err(Error::config(format!("beta[{i}] = {b} outside (0, 1)")));
            }
            if i > 1 && b < self.beta(i - 1) {
                return Err(Error::config(format!("beta not non-decreasing at {i}")));
            }
            if i > 1 && self.alpha_bar(i) >= self.alpha_bar(i - 1) {
                return Err(Error::config(format!(
                    "alpha_bar not strictly decreasing at {i}"
                )));
            }
            if self.posterior_var(i) > b + 1e-12 {
                return Err(Error::config(format!("posterior var exceeds beta at {i}")));
            }
        }
        Ok(())
    }
}

/// Build a schedule with `n` steps. Linear runs β from 1e-4 to 2e-2;
/// cosine follows ᾱ(i) = cos²(((i/n + s)/(1 + s))·π/2) with s = 0.008 and
/// β clipped to at most 0.999.
pub fn make_schedule(n: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if n < 2 {
        return Err(Error::config(format!("schedule needs n >= 2, got {n}")));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-4, 2e-2);
            (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect()
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |i: f64| {
                (((i / n as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (1..=n)
                .map(|i| {
                    let b = 1.0 - f(i as f64) / f(i as f64 - 1.0);
                    b.clamp(1e-8, 0.999)
                })
                .collect()
        }
    };
    NoiseSchedule::from_betas(kind, beta)
}

/// An H×D matrix of normalized states; the object being diffused, scored,
/// and edited.
#[derive(Clone, Debug)]
pub struct Trajectory {
    states: Tensor,
    /// (episode, start offset) when sliced out of a dataset.
    pub source: Option<(usize, usize)>,
}

impl Trajectory {
    pub fn new(states: Tensor) -> Result<Self> {
        if states.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "trajectory",
                lhs: states.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        Ok(Trajectory {
            states,
            source: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let h = rows.len();
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(h * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "trajectory",
                    lhs: vec![r.len()],
                    rhs: vec![d],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Trajectory {
            states: Tensor::from_vec(vec![h, d], data)?,
            source: None,
        })
    }

    pub fn horizon(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.states
    }

    pub fn row(&self, t: usize) -> &[f32] {
        let d = self.dim();
        &self.states.as_slice()[t * d..(t + 1) * d]
    }

    pub fn set_row(&mut self, t: usize, v: &[f32]) {
        let d = self.dim();
        self.states.data_mut()[t * d..(t + 1) * d].copy_from_slice(v);
    }

    pub fn clip(&mut self, bound: f32) {
        for v in self.states.data_mut() {
            *v = v.clamp(-bound, bound);
        }
    }
}

/// Pinned trajectory entries held fixed during denoising (inpainting), plus
/// the goal used for the auxiliary condition embedding. Pinned values are the
/// clean targets, re-applied after every reverse step.
#[derive(Clone, Debug, Default)]
pub struct Conditioning {
    pub pins: Vec<(usize, Vec<f32>)>,
    pub goal: Option<Vec<f32>>,
}

impl Conditioning {
    /// Pin the first row to `start` and the last to `goal`.
    pub fn goal_reaching(start: &[f32], goal: &[f32], horizon: usize) -> Self {
        Conditioning {
            pins: vec![(0, start.to_vec()), (horizon - 1, goal.to_vec())],
            goal: Some(goal.to_vec()),
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        for (t, _) in &self.pins {
            if *t >= horizon {
                return Err(Error::config(format!(
                    "pinned index {t} outside horizon {horizon}"
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, traj: &mut Trajectory) {
        for (t, v) in &self.pins {
            traj.set_row(*t, v);
        }
    }

    /// Condition embedding: learned goal projection, or zeros when no goal.
    pub fn embedding(&self, params: &DenoiserParams) -> Result<Tensor> {
        match &self.goal {
            Some(g) => denoiser::embed_goal(params, g),
            None => Ok(denoiser::zero_cond(&params.cfg)),
        }
    }
}

/// Per-dimension min/max normalization to [-1, 1]. Degenerate dimensions
/// (min == max) map to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl NormStats {
    pub fn from_states<'a>(states: impl Iterator<Item = &'a [f32]>, dim: usize) -> Self {
        let mut min = vec![f32::INFINITY; dim];
        let mut max = vec![f32::NEG_INFINITY; dim];
        for s in states {
            for d in 0..dim {
                min[d] = min[d].min(s[d]);
                max[d] = max[d].max(s[d]);
            }
        }
        NormStats { min, max }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn degenerate_dims(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|&d| self.min[d] == self.max[d])
            .collect()
    }

    pub fn normalize_val(&self, x: f32, d: usize) -> f32 {
        let (lo, hi) = (self.min[d], self.max[d]);
        if lo == hi {
            0.0
        } else {
            2.0 * (x - lo) / (hi - lo) - 1.0
        }
    }

    pub fn denormalize_val(&self, y: f32, d: usize) -> f32 {
        let (lo, hi) = (self.min[d], self.max[d]);
        if lo == hi {
            lo
        } else {
            lo + (y + 1.0) * 0.5 * (hi - lo)
        }
    }

    pub fn normalize_state(&self, s: &[f32]) -> Vec<f32> {
        s.iter()
            .enumerate()
            .map(|(d, &x)| self.normalize_val(x, d))
            .collect()
    }

    pub fn denormalize_state(&self, s: &[f32]) -> Vec<f32> {
        s.iter()
            .enumerate()
            .map(|(d, &y)| self.denormalize_val(y, d))
            .collect()
    }

    pub fn normalize_traj(&self, traj: &Trajectory) -> Result<Trajectory> {
        let d = traj.dim();
        let data: Vec<f32> = traj
            .tensor()
            .as_slice()
            .iter()
            .enumerate()
            .map(|(idx, &x)| self.normalize_val(x, idx % d))
            .collect();
        Trajectory::new(Tensor::from_vec(vec![traj.horizon(), d], data)?)
    }

    pub fn denormalize_traj(&self, traj: &Trajectory) -> Result<Trajectory> {
        let d = traj.dim();
        let data: Vec<f32> = traj
            .tensor()
            .as_slice()
            .iter()
            .enumerate()
            .map(|(idx, &y)| self.denormalize_val(y, idx % d))
            .collect();
        Trajectory::new(Tensor::from_vec(vec![traj.horizon(), d], data)?)
    }
}

/// Trained model bundle: schedule, denoiser weights, and the dataset
/// normalization it was trained under.
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub params: DenoiserParams,
    pub norm: NormStats,
}

impl DiffusionModel {
    pub fn cfg(&self) -> &DenoiserConfig {
        &self.params.cfg
    }

    pub fn n(&self) -> usize {
        self.schedule.n()
    }
}

/// Closed-form forward marginal: τ_i = √ᾱ[i]·τ0 + √(1−ᾱ[i])·ε.
pub fn q_sample(
    schedule: &NoiseSchedule,
    tau0: &Trajectory,
    i: usize,
    eps: &Tensor,
) -> Result<Trajectory> {
    schedule.check_step(i)?;
    if eps.shape() != tau0.tensor().shape() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: eps.shape().to_vec(),
            rhs: tau0.tensor().shape().to_vec(),
        });
    }
    let a = schedule.alpha_bar(i).sqrt() as f32;
    let b = (1.0 - schedule.alpha_bar(i)).sqrt() as f32;
    let data: Vec<f32> = tau0
        .tensor()
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Trajectory::new(Tensor::from_vec(tau0.tensor().shape().to_vec(), data)?)
}

/// Gaussian posterior q(τ^{i−1} | τ^i, τ0): mean and shared variance β̃[i].
pub fn posterior_params(
    schedule: &NoiseSchedule,
    tau_i: &Trajectory,
    tau0: &Trajectory,
    i: usize,
) -> Result<(Trajectory, f64)> {
    schedule.check_step(i)?;
    let one_minus = 1.0 - schedule.alpha_bar(i);
    let c0 = (schedule.alpha_bar_prev(i).sqrt() * schedule.beta(i) / one_minus) as f32;
    let ci = (schedule.alpha(i).sqrt() * (1.0 - schedule.alpha_bar_prev(i)) / one_minus) as f32;
    let data: Vec<f32> = tau0
        .tensor()
        .as_slice()
        .iter()
        .zip(tau_i.tensor().as_slice())
        .map(|(&x0, &xi)| c0 * x0 + ci * xi)
        .collect();
    let mean = Trajectory::new(Tensor::from_vec(tau0.tensor().shape().to_vec(), data)?)?;
    Ok((mean, schedule.posterior_var(i)))
}

/// Learned reverse-step mean: μ_θ = (τ_i − (β[i]/√(1−ᾱ[i]))·ε̂)/√α[i].
pub fn p_mean(
    model: &DiffusionModel,
    tau_i: &Trajectory,
    i: usize,
    cond_embed: &Tensor,
) -> Result<Trajectory> {
    model.schedule.check_step(i)?;
    let eps_hat = denoiser::predict_noise(&model.params, tau_i.tensor(), i, cond_embed)?;
    let inv_sqrt_alpha = (1.0 / model.schedule.alpha(i).sqrt()) as f32;
    let coef = (model.schedule.beta(i) / (1.0 - model.schedule.alpha_bar(i)).sqrt()) as f32;
    let data: Vec<f32> = tau_i
        .tensor()
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .map(|(&xi, &e)| inv_sqrt_alpha * (xi - coef * e))
        .collect();
    Trajectory::new(Tensor::from_vec(tau_i.tensor().shape().to_vec(), data)?)
}

/// One reverse step: τ_{i−1} = μ_θ + √β̃[i]·z (no noise at i = 1), then
/// pinned entries are overwritten with their clean targets.
pub fn p_sample_step(
    model: &DiffusionModel,
    tau_i: &Trajectory,
    i: usize,
    cond: &Conditioning,
    cond_embed: &Tensor,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let mut mean = p_mean(model, tau_i, i, cond_embed)?;
    if i > 1 {
        let sigma = model.schedule.posterior_var(i).sqrt() as f32;
        let z = Tensor::std_normal(tau_i.tensor().shape().to_vec(), rng);
        let data = mean.states.data_mut();
        for (m, &zv) in data.iter_mut().zip(z.as_slice()) {
            *m += sigma * zv;
        }
    }
    cond.apply(&mut mean);
    Ok(mean)
}

/// Sample a plan from pure noise with full N reverse steps; pinned entries
/// exact in the result, values clipped to ±SAMPLE_CLIP.
pub fn sample_plan(
    model: &DiffusionModel,
    cond: &Conditioning,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let cfg = model.cfg();
    cond.validate(cfg.horizon)?;
    let cond_embed = cond.embedding(&model.params)?;
    let mut tau = Trajectory::new(Tensor::std_normal(vec![cfg.horizon, cfg.state_dim], rng))?;
    cond.apply(&mut tau);
    for i in (1..=model.n()).rev() {
        tau = p_sample_step(model, &tau, i, cond, &cond_embed, rng)?;
    }
    tau.clip(SAMPLE_CLIP);
    cond.apply(&mut tau);
    Ok(tau)
}

/// Noise `tau_init` to step `n_steps` and denoise back with pinning.
/// `n_steps == 0` returns the input unchanged; `n_steps` must be ≤ N.
pub fn partial_denoise(
    model: &DiffusionModel,
    tau_init: &Trajectory,
    n_steps: usize,
    cond: &Conditioning,
    rng: &mut Rng,
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Ok(tau_init.clone());
    }
    if n_steps > model.n() {
        return Err(Error::StepOutOfRange {
            step: n_steps,
            lo: 0,
            hi: model.n(),
        });
    }
    let cfg = model.cfg();
    cond.validate(cfg.horizon)?;
    let cond_embed = cond.embedding(&model.params)?;
    let eps = Tensor::std_normal(tau_init.tensor().shape().to_vec(), rng);
    let mut tau = q_sample(&model.schedule, tau_init, n_steps, &eps)?;
    cond.apply(&mut tau);
    for i in (1..=n_steps).rev() {
        tau = p_sample_step(model, &tau, i, cond, &cond_embed, rng)?;
    }
    tau.clip(SAMPLE_CLIP);
    cond.apply(&mut tau);
    Ok(tau)
}

/// ε-prediction loss on a tape: for each τ0 draw i ~ U{1..N} and ε ~ N(0, I),
/// then accumulate mean‖ε − ε̂(q_sample(τ0, i, ε), i, cond(τ0))‖². The
/// condition embedding is the learned projection of each window's final row.
pub fn training_loss_on_tape(
    tape: &mut Tape,
    vars: &denoiser::DenoiserVars,
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    batch: &[Trajectory],
    rng: &mut Rng,
) -> Result<TensorId> {
    use rand::Rng as _;
    if batch.is_empty() {
        return Err(Error::runtime("training_loss on an empty batch"));
    }
    let inv_elems = 1.0 / (cfg.horizon * cfg.state_dim) as f32;
    let mut total: Option<TensorId> = None;
    for tau0 in batch {
        let i = rng.gen_range(1..=schedule.n());
        let eps = Tensor::std_normal(vec![cfg.horizon, cfg.state_dim], rng);
        let tau_i = q_sample(schedule, tau0, i, &eps)?;

        let goal = Tensor::from_vec(vec![cfg.state_dim], tau0.row(cfg.horizon - 1).to_vec())?;
        let goal_id = tape.constant(goal);
        let cond = denoiser::embed_goal_on(tape, vars, goal_id)?;

        let tau_id = tape.constant(tau_i.tensor().clone());
        let eps_hat = denoiser::forward(tape, vars, cfg, tau_id, i, cond)?;
        let eps_id = tape.constant(eps);
        let neg = tape.scale(eps_hat, -1.0)?;
        let diff = tape.add(eps_id, neg)?;
        let ss = tape.sum_of_squares(diff)?;
        let l = tape.scale(ss, inv_elems)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f32)
}

/// Evaluate the training loss without recording gradients.
pub fn training_loss(model: &DiffusionModel, batch: &[Trajectory], rng: &mut Rng) -> Result<f32> {
    let mut tape = Tape::inference();
    let vars = denoiser::register(&mut tape, &model.params);
    let id = training_loss_on_tape(&mut tape, &vars, model.cfg(), &model.schedule, batch, rng)?;
    Ok(tape.value(id).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_n2_matches_formula() {
        let s = make_schedule(2, ScheduleKind::Linear).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-12);
        assert!((s.beta(2) - 2e-2).abs() < 1e-12);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-12);
        assert!((s.alpha_bar(2) - 0.9999 * 0.98).abs() < 1e-12);
    }

    #[test]
    fn cosine_alpha_bar_monotone() {
        let s = make_schedule(128, ScheduleKind::Cosine).unwrap();
        for i in 2..=128 {
            assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
        }
        assert!(s.near_total_corruption());
    }

    #[test]
    fn posterior_var_zero_at_first_step() {
        let s = make_schedule(16, ScheduleKind::Cosine).unwrap();
        assert_eq!(s.posterior_var(1), 0.0);
        for i in 2..=16 {
            assert!(s.posterior_var(i) < s.beta(i));
        }
    }

    #[test]
    fn schedule_rejects_n1() {
        assert!(make_schedule(1, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn q_sample_zero_noise() {
        let s = make_schedule(8, ScheduleKind::Linear).unwrap();
        let tau = Trajectory::from_rows(&[vec![1.0, -1.0], vec![0.5, 0.25]]).unwrap();
        let eps = Tensor::zeros(vec![2, 2]);
        let out = q_sample(&s, &tau, 3, &eps).unwrap();
        let scale = s.alpha_bar(3).sqrt() as f32;
        for (o, x) in out.tensor().as_slice().iter().zip(tau.tensor().as_slice()) {
            assert!((o - scale * x).abs() < 1e-6);
        }
    }

    #[test]
    fn q_sample_full_corruption_is_noise() {
        let s = make_schedule(128, ScheduleKind::Cosine).unwrap();
        let tau = Trajectory::from_rows(&[vec![1.0, -1.0], vec![0.5, 0.25]]).unwrap();
        let mut rng = rng::from_seed(3);
        let eps = Tensor::std_normal(vec![2, 2], &mut rng);
        let out = q_sample(&s, &tau, 128, &eps).unwrap();
        for (o, e) in out.tensor().as_slice().iter().zip(eps.as_slice()) {
            assert!((o - e).abs() < 0.15, "{o} vs {e}");
        }
    }

    #[test]
    fn q_sample_step_range() {
        let s = make_schedule(8, ScheduleKind::Linear).unwrap();
        let tau = Trajectory::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let eps = Tensor::zeros(vec![1, 2]);
        assert!(q_sample(&s, &tau, 0, &eps).is_err());
        assert!(q_sample(&s, &tau, 9, &eps).is_err());
    }

    #[test]
    fn posterior_reconstructs_at_step_one() {
        let s = make_schedule(8, ScheduleKind::Linear).unwrap();
        let tau = Trajectory::from_rows(&[vec![0.3, -0.7], vec![0.1, 0.9]]).unwrap();
        let (mean, var) = posterior_params(&s, &tau, &tau, 1).unwrap();
        for (m, x) in mean.tensor().as_slice().iter().zip(tau.tensor().as_slice()) {
            assert!((m - x).abs() < 1e-6);
        }
        assert_eq!(var, 0.0);
    }

    #[test]
    fn posterior_algebra_exact_identities() {
        // β[i] + α[i]·(1−ᾱ[i−1]) = 1−ᾱ[i], and the reconstruction property:
        // the posterior mean of the noiseless forward sample √ᾱ[i]·τ0 is
        // √ᾱ[i−1]·τ0.
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = make_schedule(64, kind).unwrap();
            let tau0 = Trajectory::from_rows(&[vec![0.8, -0.6]]).unwrap();
            for i in 1..=64 {
                let lhs = s.beta(i) + s.alpha(i) * (1.0 - s.alpha_bar_prev(i));
                let rhs = 1.0 - s.alpha_bar(i);
                assert!((lhs - rhs).abs() / rhs < 1e-12, "step {i}");

                let eps = Tensor::zeros(vec![1, 2]);
                let tau_i = q_sample(&s, &tau0, i, &eps).unwrap();
                let (mean, _) = posterior_params(&s, &tau_i, &tau0, i).unwrap();
                let expect = s.alpha_bar_prev(i).sqrt() as f32;
                for (m, x0) in mean.tensor().as_slice().iter().zip(tau0.tensor().as_slice())
                {
                    assert!((m - expect * x0).abs() < 1e-5, "step {i}: {m}");
                }
            }
        }
    }

    #[test]
    fn posterior_rejects_step_zero() {
        let s = make_schedule(8, ScheduleKind::Linear).unwrap();
        let tau = Trajectory::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(posterior_params(&s, &tau, &tau, 0).is_err());
    }

    #[test]
    fn normalize_roundtrip_and_anchors() {
        let stats = NormStats {
            min: vec![0.0, -5.0],
            max: vec![10.0, 5.0],
        };
        assert_eq!(stats.normalize_val(5.0, 0), 0.0);
        assert_eq!(stats.normalize_val(0.0, 0), -1.0);
        assert_eq!(stats.normalize_val(10.0, 0), 1.0);
        for &x in &[0.0f32, 1.3, 7.77, 10.0] {
            let y = stats.normalize_val(x, 0);
            assert!((stats.denormalize_val(y, 0) - x).abs() < 1e-5);
        }
    }

    #[test]
    fn degenerate_dim_maps_to_zero() {
        let stats = NormStats {
            min: vec![2.0],
            max: vec![2.0],
        };
        assert_eq!(stats.degenerate_dims(), vec![0]);
        assert_eq!(stats.normalize_val(2.0, 0), 0.0);
        assert_eq!(stats.denormalize_val(0.0, 0), 2.0);
    }

    fn tiny_model() -> DiffusionModel {
        let cfg = DenoiserConfig {
            horizon: 8,
            state_dim: 4,
            width: 16,
            depth: 2,
            embed_dim: 8,
        };
        DiffusionModel {
            schedule: make_schedule(16, ScheduleKind::Cosine).unwrap(),
            params: crate::denoiser::init_params(cfg, 5).unwrap(),
            norm: NormStats {
                min: vec![-1.0; 4],
                max: vec![1.0; 4],
            },
        }
    }

    #[test]
    fn training_loss_rejects_empty_batch() {
        let model = tiny_model();
        let mut rng = rng::from_seed(0);
        assert!(training_loss(&model, &[], &mut rng).is_err());
    }

    #[test]
    fn untrained_loss_is_order_one() {
        let model = tiny_model();
        let mut rng = rng::from_seed(11);
        let batch: Vec<Trajectory> = (0..16)
            .map(|_| Trajectory::new(Tensor::std_normal(vec![8, 4], &mut rng)).unwrap())
            .collect();
        let loss = training_loss(&model, &batch, &mut rng).unwrap();
        assert!((0.5..4.0).contains(&loss), "loss = {loss}");
    }

    #[test]
    fn sample_plan_pins_and_clips() {
        let model = tiny_model();
        let start = vec![-0.5, -0.5, 0.0, 0.0];
        let goal = vec![0.5, 0.5, 0.0, 0.0];
        let cond = Conditioning::goal_reaching(&start, &goal, 8);
        let mut rng = rng::from_seed(21);
        let plan = sample_plan(&model, &cond, &mut rng).unwrap();
        assert_eq!(plan.row(0), start.as_slice());
        assert_eq!(plan.row(7), goal.as_slice());
        assert!(plan
            .tensor()
            .as_slice()
            .iter()
            .all(|v| v.abs() <= SAMPLE_CLIP));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let model = tiny_model();
        let cond = Conditioning::goal_reaching(&[0.0; 4], &[0.1; 4], 8);
        let a = sample_plan(&model, &cond, &mut rng::from_seed(7)).unwrap();
        let b = sample_plan(&model, &cond, &mut rng::from_seed(7)).unwrap();
        assert_eq!(a.tensor().as_slice(), b.tensor().as_slice());
    }

    #[test]
    fn partial_denoise_degenerate_and_pinning() {
        let model = tiny_model();
        let tau = Trajectory::new(Tensor::zeros(vec![8, 4])).unwrap();
        let cond = Conditioning::goal_reaching(&[0.2; 4], &[0.4; 4], 8);
        let mut rng = rng::from_seed(13);
        let same = partial_denoise(&model, &tau, 0, &cond, &mut rng).unwrap();
        assert_eq!(same.tensor().as_slice(), tau.tensor().as_slice());
        let out = partial_denoise(&model, &tau, 5, &cond, &mut rng).unwrap();
        assert_eq!(out.row(0), &[0.2; 4]);
        assert_eq!(out.row(7), &[0.4; 4]);
        assert!(partial_denoise(&model, &tau, 17, &cond, &mut rng).is_err());
    }
}
