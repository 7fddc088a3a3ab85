//! When-to-replan criterion: noise the partially executed trajectory,
//! measure how far the learned denoising step deviates from the true
//! Gaussian posterior, and map the aggregate KL to a calibrated score in
//! [0, 1] and a replan decision.
//!
//! Both Gaussians share the posterior variance β̃[i], so the per-step KL
//! reduces to a mean term: ‖μ̃ − μ_θ‖² / (2·β̃[i]), averaged per element.
//! Accumulation is f64; β̃ gets tiny at small probe steps.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    self, q_sample, Conditioning, DiffusionModel, Trajectory,
};
use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::rng::Rng;

/// The hybrid trajectory τ_→k: an executed observed prefix plus the
/// remaining planned suffix, with cursor k. The plan is kept separately so
/// the planned state at the cursor stays available for state-distance
/// triggers and logging.
#[derive(Clone, Debug)]
pub struct ExecutionTrace {
    plan: Trajectory,
    observed: Vec<Vec<f32>>,
    /// Normalized goal state; pinned at the last row by replanning.
    pub goal: Vec<f32>,
    /// Executed actions, kept for diagnostics only.
    pub actions: Vec<Vec<f32>>,
}

impl ExecutionTrace {
    /// Start a trace on a fresh plan. `start` is the currently observed
    /// (normalized) state, occupying row 0.
    pub fn new(plan: Trajectory, start: &[f32], goal: &[f32]) -> Result<Self> {
        if start.len() != plan.dim() || goal.len() != plan.dim() {
            return Err(Error::ShapeMismatch {
                op: "execution_trace",
                lhs: vec![start.len()],
                rhs: vec![plan.dim()],
            });
        }
        Ok(ExecutionTrace {
            plan,
            observed: vec![start.to_vec()],
            goal: goal.to_vec(),
            actions: Vec::new(),
        })
    }

    /// Steps executed against the current plan; 0 ≤ k < H.
    pub fn k(&self) -> usize {
        self.observed.len() - 1
    }

    pub fn horizon(&self) -> usize {
        self.plan.horizon()
    }

    pub fn dim(&self) -> usize {
        self.plan.dim()
    }

    pub fn plan(&self) -> &Trajectory {
        &self.plan
    }

    pub fn planned_row(&self, t: usize) -> &[f32] {
        self.plan.row(t)
    }

    pub fn observed_row(&self, t: usize) -> &[f32] {
        &self.observed[t]
    }

    pub fn current(&self) -> &[f32] {
        self.observed.last().expect("observed never empty")
    }

    pub fn exhausted(&self) -> bool {
        self.k() == self.horizon() - 1
    }

    /// Record an observation (and the action that produced it), advancing
    /// the cursor. Errors once the plan is exhausted.
    pub fn advance(&mut self, observed: &[f32], action: &[f32]) -> Result<()> {
        if self.exhausted() {
            return Err(Error::runtime(format!(
                "trace cursor already at horizon end (k = {})",
                self.k()
            )));
        }
        self.observed.push(observed.to_vec());
        self.actions.push(action.to_vec());
        Ok(())
    }

    /// Replace the plan while keeping the executed prefix and cursor; used
    /// by previous-context replanning, whose output pins the executed rows.
    pub fn set_plan_keeping_cursor(&mut self, plan: Trajectory) -> Result<()> {
        if plan.horizon() != self.horizon() || plan.dim() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "set_plan_keeping_cursor",
                lhs: vec![plan.horizon(), plan.dim()],
                rhs: vec![self.horizon(), self.dim()],
            });
        }
        self.plan = plan;
        Ok(())
    }

    /// Swap in a new plan; the cursor resets to 0 at the current state.
    pub fn replace_plan(&mut self, plan: Trajectory) -> Result<()> {
        if plan.horizon() != self.horizon() || plan.dim() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "replace_plan",
                lhs: vec![plan.horizon(), plan.dim()],
                rhs: vec![self.horizon(), self.dim()],
            });
        }
        let current = self.current().to_vec();
        self.plan = plan;
        self.observed = vec![current];
        Ok(())
    }

    /// The full H×D hybrid matrix: rows 0..=k observed, the rest planned.
    pub fn hybrid(&self) -> Trajectory {
        let mut t = self.plan.clone();
        for (i, obs) in self.observed.iter().enumerate() {
            t.set_row(i, obs);
        }
        t
    }
}

/// Which diffusion steps to probe and how many noise draws per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: Vec<usize>,
    pub draws: usize,
}

impl ProbeConfig {
    /// Probe steps scale with the schedule length: {5, 10, 15} at N = 256,
    /// the same fractional depths elsewhere, never below step 2 (the first
    /// step with a nonzero posterior variance).
    pub fn default_for(n: usize) -> Self {
        let mut steps: Vec<usize> = [5usize, 10, 15]
            .iter()
            .map(|&i| (((i * n) as f64 / 256.0).round() as usize).max(2))
            .collect();
        steps.dedup();
        ProbeConfig { steps, draws: 4 }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::config("probe steps must be non-empty"));
        }
        if self.draws == 0 {
            return Err(Error::config("probe draws must be >= 1"));
        }
        for &i in &self.steps {
            if i < 2 || i > n {
                return Err(Error::config(format!(
                    "probe step {i} outside [2, {n}] (steps below 2 have zero posterior variance)"
                )));
            }
        }
        Ok(())
    }
}

/// Mean and spread of KL̄ over fresh model samples; the yardstick that makes
/// thresholds transfer across checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mu: f64,
    pub sigma: f64,
    pub samples: u32,
}

pub const SIGMA_FLOOR: f64 = 1e-6;

/// Replan decision by increasing severity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReplanDecision {
    Continue,
    ReplanFuture,
    ReplanScratch,
}

impl ReplanDecision {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReplanDecision::Continue => "continue",
            ReplanDecision::ReplanFuture => "replan_future",
            ReplanDecision::ReplanScratch => "replan_scratch",
        }
    }
}

/// Outcome of one probe of a trace.
#[derive(Clone, Debug)]
pub struct LikelihoodReport {
    /// Mean KL per probe step (averaged over draws and elements).
    pub per_step: Vec<(usize, f64)>,
    /// Aggregate over steps and draws.
    pub kl_bar: f64,
    /// Calibrated score in [0, 1]; high means the plan looks healthy.
    pub score: f64,
    pub decision: ReplanDecision,
    /// Per-timestep KL profile, for likelihood-curve plots.
    pub profile: Vec<f64>,
}

/// KL between two same-variance Gaussians per element, with a per-timestep
/// breakdown: ‖μ_q − μ_p‖²/(2v) averaged over all elements / per row.
fn kl_from_means(mu_q: &[f32], mu_p: &[f32], var: f64, dim: usize) -> (f64, Vec<f64>) {
    let rows = mu_q.len() / dim;
    let mut profile = vec![0.0f64; rows];
    let mut total = 0.0f64;
    for t in 0..rows {
        let mut row = 0.0f64;
        for j in 0..dim {
            let d = (mu_q[t * dim + j] - mu_p[t * dim + j]) as f64;
            row += d * d;
        }
        profile[t] = row / (2.0 * var * dim as f64);
        total += row;
    }
    (total / (2.0 * var * mu_q.len() as f64), profile)
}

/// One probe draw at diffusion step `i`: noise τ_ref to step i, compare the
/// Gaussian posterior mean against the learned denoising mean.
pub fn kl_step(
    model: &DiffusionModel,
    tau_ref: &Trajectory,
    i: usize,
    cond_embed: &Tensor,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    let var = model.schedule.posterior_var(i);
    if var <= 0.0 {
        return Err(Error::config(format!(
            "probe step {i} has zero posterior variance"
        )));
    }
    let eps = Tensor::std_normal(tau_ref.tensor().shape().to_vec(), rng);
    let tau_i = q_sample(&model.schedule, tau_ref, i, &eps)?;
    let (mu_q, _) = diffusion::posterior_params(&model.schedule, &tau_i, tau_ref, i)?;
    let mu_p = diffusion::p_mean(model, &tau_i, i, cond_embed)?;
    Ok(kl_from_means(
        mu_q.tensor().as_slice(),
        mu_p.tensor().as_slice(),
        var,
        tau_ref.dim(),
    ))
}

/// Probe the trace's full hybrid matrix (executed prefix and planned suffix
/// both included) at every configured step, `draws` times each.
pub fn kl_probe(
    model: &DiffusionModel,
    trace: &ExecutionTrace,
    cfg: &ProbeConfig,
    rng: &mut Rng,
) -> Result<(f64, Vec<(usize, f64)>, Vec<f64>)> {
    cfg.validate(model.n())?;
    let tau_ref = trace.hybrid();
    let cond = Conditioning {
        pins: Vec::new(),
        goal: Some(trace.goal.clone()),
    };
    let cond_embed = cond.embedding(&model.params)?;

    let mut per_step = Vec::with_capacity(cfg.steps.len());
    let mut profile = vec![0.0f64; trace.horizon()];
    let mut total = 0.0f64;
    for &i in &cfg.steps {
        let mut step_sum = 0.0f64;
        for _ in 0..cfg.draws {
            let (kl, prof) = kl_step(model, &tau_ref, i, &cond_embed, rng)?;
            step_sum += kl;
            for (p, q) in profile.iter_mut().zip(&prof) {
                *p += q;
            }
        }
        per_step.push((i, step_sum / cfg.draws as f64));
        total += step_sum;
    }
    let evals = (cfg.steps.len() * cfg.draws) as f64;
    for p in profile.iter_mut() {
        *p /= evals;
    }
    Ok((total / evals, per_step, profile))
}

/// Compute calibration statistics from fresh plans sampled at the given
/// (start, goal) pairs (normalized states). Needs at least 16 pairs.
pub fn calibrate(
    model: &DiffusionModel,
    pairs: &[(Vec<f32>, Vec<f32>)],
    cfg: &ProbeConfig,
    rng: &mut Rng,
) -> Result<Calibration> {
    if pairs.len() < 16 {
        return Err(Error::config(format!(
            "calibration needs >= 16 samples, got {}",
            pairs.len()
        )));
    }
    let h = model.cfg().horizon;
    let mut kls = Vec::with_capacity(pairs.len());
    for (start, goal) in pairs {
        let cond = Conditioning::goal_reaching(start, goal, h);
        let plan = diffusion::sample_plan(model, &cond, rng)?;
        let trace = ExecutionTrace::new(plan, start, goal)?;
        let (kl_bar, _, _) = kl_probe(model, &trace, cfg, rng)?;
        kls.push(kl_bar);
    }
    let m = kls.len() as f64;
    let mu = kls.iter().sum::<f64>() / m;
    let var = kls.iter().map(|k| (k - mu) * (k - mu)).sum::<f64>() / (m - 1.0);
    Ok(Calibration {
        mu,
        sigma: var.sqrt().max(SIGMA_FLOOR),
        samples: pairs.len() as u32,
    })
}

/// Calibrated score: min(1, exp(−max(0, KL̄ − μ)/σ)). Monotone non-increasing
/// in KL̄; 1.0 at or below the calibration mean.
pub fn score(kl_bar: f64, cal: &Calibration) -> f64 {
    let sigma = cal.sigma.max(SIGMA_FLOOR);
    (-((kl_bar - cal.mu).max(0.0)) / sigma).exp().min(1.0)
}

/// Threshold the score: scratch below `theta_scratch`, future-context below
/// `theta_future`, otherwise continue. Requires θ_scratch ≤ θ_future.
pub fn decide(score: f64, theta_future: f64, theta_scratch: f64) -> Result<ReplanDecision> {
    if !(0.0..=1.0).contains(&theta_scratch)
        || !(0.0..=1.0).contains(&theta_future)
        || theta_scratch > theta_future
    {
        return Err(Error::config(format!(
            "thresholds must satisfy 0 <= theta_scratch ({theta_scratch}) <= theta_future ({theta_future}) <= 1"
        )));
    }
    Ok(if score < theta_scratch {
        ReplanDecision::ReplanScratch
    } else if score < theta_future {
        ReplanDecision::ReplanFuture
    } else {
        ReplanDecision::Continue
    })
}

/// Probe, score, and decide in one call.
pub fn probe_and_decide(
    model: &DiffusionModel,
    trace: &ExecutionTrace,
    cfg: &ProbeConfig,
    cal: &Calibration,
    theta_future: f64,
    theta_scratch: f64,
    rng: &mut Rng,
) -> Result<LikelihoodReport> {
    let (kl_bar, per_step, profile) = kl_probe(model, trace, cfg, rng)?;
    let s = score(kl_bar, cal);
    let decision = decide(s, theta_future, theta_scratch)?;
    Ok(LikelihoodReport {
        per_step,
        kl_bar,
        score: s,
        decision,
        profile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_form_unit_gaussians() {
        // N(0, v) vs N(m, v): KL = m²/(2v); m = 1, v = 1 -> 0.5
        let (kl, prof) = kl_from_means(&[0.0], &[1.0], 1.0, 1);
        assert!((kl - 0.5).abs() < 1e-9);
        assert_eq!(prof.len(), 1);
        assert!((prof[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn kl_zero_for_identical_means() {
        let (kl, _) = kl_from_means(&[0.3, -0.7, 0.1], &[0.3, -0.7, 0.1], 0.01, 3);
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn score_formula_anchors() {
        let cal = Calibration {
            mu: 2.0,
            sigma: 0.5,
            samples: 64,
        };
        assert_eq!(score(1.0, &cal), 1.0);
        assert_eq!(score(2.0, &cal), 1.0);
        assert!((score(2.5, &cal) - (-1.0f64).exp()).abs() < 1e-12);
        assert!((score(2.0 + 0.5 * 2.0f64.ln(), &cal) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn score_monotone_in_kl() {
        let cal = Calibration {
            mu: 1.0,
            sigma: 0.3,
            samples: 64,
        };
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let s = score(i as f64 * 0.1, &cal);
            assert!(s <= prev && (0.0..=1.0).contains(&s));
            prev = s;
        }
    }

    #[test]
    fn decide_thresholds() {
        assert_eq!(decide(0.9, 0.7, 0.5).unwrap(), ReplanDecision::Continue);
        assert_eq!(decide(0.6, 0.7, 0.5).unwrap(), ReplanDecision::ReplanFuture);
        assert_eq!(decide(0.3, 0.7, 0.5).unwrap(), ReplanDecision::ReplanScratch);
        assert!(decide(0.5, 0.4, 0.6).is_err());
    }

    #[test]
    fn decision_monotone_in_score() {
        let mut prev = ReplanDecision::ReplanScratch;
        for i in 0..=100 {
            let d = decide(i as f64 / 100.0, 0.7, 0.5).unwrap();
            assert!(d <= prev, "severity must not increase with score");
            prev = d;
        }
    }

    #[test]
    fn probe_config_defaults_scale() {
        assert_eq!(ProbeConfig::default_for(256).steps, vec![5, 10, 15]);
        assert_eq!(ProbeConfig::default_for(128).steps, vec![3, 5, 8]);
        let p64 = ProbeConfig::default_for(64);
        assert!(p64.steps.iter().all(|&i| i >= 2));
        assert!(ProbeConfig::default_for(128).validate(128).is_ok());
    }

    #[test]
    fn probe_config_rejects_step_one() {
        let cfg = ProbeConfig {
            steps: vec![1, 5],
            draws: 2,
        };
        assert!(cfg.validate(64).is_err());
    }

    #[test]
    fn trace_cursor_and_hybrid() {
        let plan = Trajectory::from_rows(&[
            vec![0.0, 0.0],
            vec![0.1, 0.1],
            vec![0.2, 0.2],
            vec![0.3, 0.3],
        ])
        .unwrap();
        let mut trace = ExecutionTrace::new(plan, &[0.0, 0.0], &[0.3, 0.3]).unwrap();
        assert_eq!(trace.k(), 0);
        trace.advance(&[0.11, 0.09], &[1.0, 0.0]).unwrap();
        assert_eq!(trace.k(), 1);
        let hybrid = trace.hybrid();
        assert_eq!(hybrid.row(1), &[0.11, 0.09]);
        assert_eq!(hybrid.row(2), &[0.2, 0.2]);
        // planned value at the cursor still available
        assert_eq!(trace.planned_row(1), &[0.1, 0.1]);
        trace.advance(&[0.2, 0.2], &[0.0, 0.0]).unwrap();
        trace.advance(&[0.3, 0.3], &[0.0, 0.0]).unwrap();
        assert!(trace.exhausted());
        assert!(trace.advance(&[0.4, 0.4], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn sigma_floor_applies() {
        let cal = Calibration {
            mu: 0.0,
            sigma: 0.0,
            samples: 16,
        };
        // does not divide by zero
        let s = score(1.0, &cal);
        assert!((0.0..=1.0).contains(&s));
    }
}
