//! How-to-replan strategies and the adaptive controller, plus the baseline
//! replanning policies used for comparison: fixed-interval, state-distance,
//! and likelihood-triggered previous-context.

use serde::{Deserialize, Serialize};

use crate::diffusion::{self, Conditioning, DiffusionModel, Trajectory};
use crate::error::{Error, Result};
use crate::likelihood::{
    self, Calibration, ExecutionTrace, ProbeConfig, ReplanDecision,
};
use crate::rng::Rng;

/// Diffusion-step prices of the three strategies. Scratch always pays the
/// full schedule length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplanBudget {
    pub n_scratch: usize,
    pub n_prev: usize,
    pub n_future: usize,
}

impl ReplanBudget {
    /// Defaults scale with the schedule: future-context gets 80 steps at
    /// N = 256 (40 at N = 128), previous-context matches future-context so
    /// the strategy comparison stays equal-cost.
    pub fn default_for(n: usize) -> Self {
        let n_future = (((80 * n) as f64 / 256.0).round() as usize).clamp(1, n);
        ReplanBudget {
            n_scratch: n,
            n_prev: n_future,
            n_future,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.n_scratch != n {
            return Err(Error::config(format!(
                "n_scratch ({}) must equal the schedule length ({n})",
                self.n_scratch
            )));
        }
        if self.n_future == 0 || self.n_future > self.n_scratch {
            return Err(Error::config(format!(
                "n_future ({}) must be in [1, n_scratch]",
                self.n_future
            )));
        }
        if self.n_prev == 0 || self.n_prev > self.n_scratch {
            return Err(Error::config(format!(
                "n_prev ({}) must be in [1, n_scratch]",
                self.n_prev
            )));
        }
        Ok(())
    }
}

/// Replanning policy variants. RDM is the adaptive likelihood-driven one;
/// the rest are the comparison baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum ReplanPolicy {
    /// Likelihood-triggered: scratch below θ_scratch, future-context below
    /// θ_future.
    Rdm { theta_future: f64, theta_scratch: f64 },
    /// Fixed intervals: scratch every `interval_scratch` env steps,
    /// future-context every `interval_future` (scratch wins ties).
    DdFixed {
        interval_scratch: usize,
        interval_future: usize,
    },
    /// Future-context replan when ‖observed − planned‖₂ exceeds `delta`
    /// (normalized units).
    Sdm { delta: f64 },
    /// Likelihood-triggered previous-context replanning.
    Rpdm { theta_future: f64, theta_scratch: f64 },
    /// Plan once, never replan except on plan exhaustion.
    OpenLoop,
}

impl ReplanPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ReplanPolicy::Rdm {
                theta_future,
                theta_scratch,
            }
            | ReplanPolicy::Rpdm {
                theta_future,
                theta_scratch,
            } => {
                likelihood::decide(0.5, theta_future, theta_scratch)?;
                Ok(())
            }
            ReplanPolicy::DdFixed {
                interval_scratch,
                interval_future,
            } => {
                if interval_future == 0 || interval_scratch <= interval_future {
                    return Err(Error::config(format!(
                        "fixed intervals must satisfy interval_scratch ({interval_scratch}) > interval_future ({interval_future}) >= 1"
                    )));
                }
                Ok(())
            }
            ReplanPolicy::Sdm { delta } => {
                if delta <= 0.0 {
                    return Err(Error::config(format!(
                        "state-distance threshold must be positive, got {delta}"
                    )));
                }
                Ok(())
            }
            ReplanPolicy::OpenLoop => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReplanPolicy::Rdm { .. } => "rdm",
            ReplanPolicy::DdFixed { .. } => "dd",
            ReplanPolicy::Sdm { .. } => "sdm",
            ReplanPolicy::Rpdm { .. } => "rpdm",
            ReplanPolicy::OpenLoop => "open-loop",
        }
    }

    /// Whether this policy consults the likelihood probe.
    pub fn uses_probe(&self) -> bool {
        matches!(self, ReplanPolicy::Rdm { .. } | ReplanPolicy::Rpdm { .. })
    }
}

/// What the controller actually did at one env step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplanAction {
    None,
    Scratch,
    Future,
    Prev,
}

impl ReplanAction {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReplanAction::None => "none",
            ReplanAction::Scratch => "scratch",
            ReplanAction::Future => "future",
            ReplanAction::Prev => "prev",
        }
    }
}

/// One controller decision, as logged per env step.
#[derive(Clone, Debug)]
pub struct DecisionRow {
    pub env_step: usize,
    pub score: Option<f64>,
    pub kl_per_step: Option<Vec<(usize, f64)>>,
    pub decision: ReplanDecision,
    pub action: ReplanAction,
    /// Whether the action was forced by plan exhaustion rather than policy.
    pub forced: bool,
    pub steps_consumed: usize,
}

/// Replan counts and the exact diffusion-step bill.
#[derive(Clone, Debug, Default)]
pub struct ReplanStats {
    pub scratch_count: usize,
    pub future_count: usize,
    pub prev_count: usize,
    /// Cumulative diffusion steps including the initial plan.
    pub total_steps: usize,
    pub log: Vec<DecisionRow>,
}

impl ReplanStats {
    /// Closed-form bill the totals must match:
    /// N_s·#scratch + N_f·#future + N_p·#prev + N_s (initial plan).
    pub fn expected_total(&self, budget: &ReplanBudget) -> usize {
        budget.n_scratch * self.scratch_count
            + budget.n_future * self.future_count
            + budget.n_prev * self.prev_count
            + budget.n_scratch
    }
}

/// Sample a completely fresh plan from the current state, pinning start and
/// goal. Costs N_s diffusion steps.
pub fn replan_scratch(
    model: &DiffusionModel,
    current: &[f32],
    goal: &[f32],
    rng: &mut Rng,
) -> Result<Trajectory> {
    let cond = Conditioning::goal_reaching(current, goal, model.cfg().horizon);
    diffusion::sample_plan(model, &cond, rng)
}

/// Repair the hybrid trajectory with `n_prev` noise/denoise steps, keeping
/// every executed row (0..=k) and the goal row pinned. The executed prefix
/// is never altered.
pub fn replan_prev_context(
    model: &DiffusionModel,
    trace: &ExecutionTrace,
    n_prev: usize,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let h = trace.horizon();
    if trace.k() >= h - 1 {
        return Err(Error::runtime(format!(
            "previous-context replan with nothing left to replan (k = {})",
            trace.k()
        )));
    }
    let mut pins: Vec<(usize, Vec<f32>)> = (0..=trace.k())
        .map(|t| (t, trace.observed_row(t).to_vec()))
        .collect();
    pins.push((h - 1, trace.goal.clone()));
    let cond = Conditioning {
        pins,
        goal: Some(trace.goal.clone()),
    };
    diffusion::partial_denoise(model, &trace.hybrid(), n_prev, &cond, rng)
}

/// Shift-and-pad the remaining plan so the current state becomes row 0 and
/// the last planned state fills the tail, then refine with `n_future`
/// noise/denoise steps pinning the new start and the goal.
pub fn replan_future_context(
    model: &DiffusionModel,
    trace: &ExecutionTrace,
    n_future: usize,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let shifted = shift_and_pad(trace)?;
    let h = trace.horizon();
    let cond = Conditioning {
        pins: vec![
            (0, trace.current().to_vec()),
            (h - 1, trace.goal.clone()),
        ],
        goal: Some(trace.goal.clone()),
    };
    diffusion::partial_denoise(model, &shifted, n_future, &cond, rng)
}

/// τ̃ construction: row 0 is the current observed state, rows 1.. are the
/// not-yet-executed planned states, and the last planned state repeats to
/// fill the horizon.
pub fn shift_and_pad(trace: &ExecutionTrace) -> Result<Trajectory> {
    let h = trace.horizon();
    let k = trace.k();
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(h);
    rows.push(trace.current().to_vec());
    for j in 1..h {
        let src = (k + j).min(h - 1);
        rows.push(trace.planned_row(src).to_vec());
    }
    Trajectory::from_rows(&rows)
}

/// Per-episode replan controller. Owns the policy, budgets, calibration,
/// cooldown state, and the running stats.
pub struct Controller {
    pub policy: ReplanPolicy,
    pub budget: ReplanBudget,
    pub probe: ProbeConfig,
    pub cal: Calibration,
    /// Env steps after a replan during which decisions are forced to
    /// Continue (0 disables). Applies to trigger-based policies only, not to
    /// the fixed-interval baseline.
    pub cooldown: usize,
    cooldown_left: usize,
    /// Equal-budget cap on total diffusion steps; policy replans that would
    /// exceed it are downgraded or skipped (exhaustion extensions may
    /// overshoot by at most one future replan).
    pub step_cap: Option<usize>,
    pub stats: ReplanStats,
}

/// What happened during one controller step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub decision: ReplanDecision,
    pub action: ReplanAction,
    pub score: Option<f64>,
    pub kl_per_step: Option<Vec<(usize, f64)>>,
    pub replanned: bool,
}

impl Controller {
    pub fn new(
        policy: ReplanPolicy,
        budget: ReplanBudget,
        probe: ProbeConfig,
        cal: Calibration,
        cooldown: usize,
        step_cap: Option<usize>,
    ) -> Result<Self> {
        policy.validate()?;
        if let Some(cap) = step_cap {
            if cap < budget.n_scratch {
                return Err(Error::config(format!(
                    "step cap {cap} smaller than one initial plan ({})",
                    budget.n_scratch
                )));
            }
        }
        Ok(Controller {
            policy,
            budget,
            probe,
            cal,
            cooldown,
            cooldown_left: 0,
            step_cap,
            stats: ReplanStats::default(),
        })
    }

    /// Charge the initial plan and start the post-replan cooldown.
    pub fn charge_initial_plan(&mut self) {
        self.stats.total_steps += self.budget.n_scratch;
        self.cooldown_left = self.cooldown;
    }

    fn within_cap(&self, cost: usize) -> bool {
        match self.step_cap {
            Some(cap) => self.stats.total_steps + cost <= cap,
            None => true,
        }
    }

    /// Exhaustion extensions may start as long as any budget remains.
    fn can_extend(&self) -> bool {
        match self.step_cap {
            Some(cap) => self.stats.total_steps < cap,
            None => true,
        }
    }

    fn perform(
        &mut self,
        action: ReplanAction,
        model: &DiffusionModel,
        trace: &mut ExecutionTrace,
        rng: &mut Rng,
    ) -> Result<usize> {
        let (plan, cost) = match action {
            ReplanAction::Scratch => (
                replan_scratch(model, trace.current(), &trace.goal, rng)?,
                self.budget.n_scratch,
            ),
            ReplanAction::Future => (
                replan_future_context(model, trace, self.budget.n_future, rng)?,
                self.budget.n_future,
            ),
            ReplanAction::Prev => (
                replan_prev_context(model, trace, self.budget.n_prev, rng)?,
                self.budget.n_prev,
            ),
            ReplanAction::None => return Ok(0),
        };
        match action {
            ReplanAction::Scratch => self.stats.scratch_count += 1,
            ReplanAction::Future => self.stats.future_count += 1,
            ReplanAction::Prev => self.stats.prev_count += 1,
            ReplanAction::None => {}
        }
        self.stats.total_steps += cost;
        self.cooldown_left = self.cooldown;
        if action == ReplanAction::Prev {
            // executed history is pinned in the new plan; the cursor stays
            trace.set_plan_keeping_cursor(plan)?;
        } else {
            trace.replace_plan(plan)?;
        }
        Ok(cost)
    }

    /// One control decision at env step `env_t`, possibly replacing the
    /// trace's plan. Exhausted plans force a future-context extension
    /// regardless of policy.
    pub fn step(
        &mut self,
        model: &DiffusionModel,
        trace: &mut ExecutionTrace,
        env_t: usize,
        rng: &mut Rng,
    ) -> Result<StepOutcome> {
        let mut outcome = StepOutcome {
            decision: ReplanDecision::Continue,
            action: ReplanAction::None,
            score: None,
            kl_per_step: None,
            replanned: false,
        };

        if trace.exhausted() {
            if self.can_extend() {
                let consumed = self.perform(ReplanAction::Future, model, trace, rng)?;
                outcome.decision = ReplanDecision::ReplanFuture;
                outcome.action = ReplanAction::Future;
                outcome.replanned = true;
                self.stats.log.push(DecisionRow {
                    env_step: env_t,
                    score: None,
                    kl_per_step: None,
                    decision: outcome.decision,
                    action: outcome.action,
                    forced: true,
                    steps_consumed: consumed,
                });
            } else {
                self.stats.log.push(DecisionRow {
                    env_step: env_t,
                    score: None,
                    kl_per_step: None,
                    decision: ReplanDecision::Continue,
                    action: ReplanAction::None,
                    forced: true,
                    steps_consumed: 0,
                });
            }
            return Ok(outcome);
        }

        let cooldown_applies = !matches!(
            self.policy,
            ReplanPolicy::DdFixed { .. } | ReplanPolicy::OpenLoop
        );
        if cooldown_applies && self.cooldown_left > 0 {
            self.cooldown_left -= 1;
            self.stats.log.push(DecisionRow {
                env_step: env_t,
                score: None,
                kl_per_step: None,
                decision: ReplanDecision::Continue,
                action: ReplanAction::None,
                forced: false,
                steps_consumed: 0,
            });
            return Ok(outcome);
        }

        let policy = self.policy.clone();
        let (decision, wanted): (ReplanDecision, ReplanAction) = match policy {
            ReplanPolicy::OpenLoop => (ReplanDecision::Continue, ReplanAction::None),
            ReplanPolicy::Rdm {
                theta_future,
                theta_scratch,
            } => {
                let report = likelihood::probe_and_decide(
                    model,
                    trace,
                    &self.probe,
                    &self.cal,
                    theta_future,
                    theta_scratch,
                    rng,
                )?;
                outcome.score = Some(report.score);
                outcome.kl_per_step = Some(report.per_step.clone());
                let act = match report.decision {
                    ReplanDecision::Continue => ReplanAction::None,
                    ReplanDecision::ReplanFuture => ReplanAction::Future,
                    ReplanDecision::ReplanScratch => ReplanAction::Scratch,
                };
                (report.decision, act)
            }
            ReplanPolicy::Rpdm {
                theta_future,
                theta_scratch,
            } => {
                let report = likelihood::probe_and_decide(
                    model,
                    trace,
                    &self.probe,
                    &self.cal,
                    theta_future,
                    theta_scratch,
                    rng,
                )?;
                outcome.score = Some(report.score);
                outcome.kl_per_step = Some(report.per_step.clone());
                let act = if report.decision == ReplanDecision::Continue {
                    ReplanAction::None
                } else if trace.k() < trace.horizon() - 1 {
                    ReplanAction::Prev
                } else {
                    ReplanAction::Future
                };
                (report.decision, act)
            }
            ReplanPolicy::DdFixed {
                interval_scratch,
                interval_future,
            } => {
                if env_t > 0 && env_t % interval_scratch == 0 {
                    (ReplanDecision::ReplanScratch, ReplanAction::Scratch)
                } else if env_t > 0 && env_t % interval_future == 0 {
                    (ReplanDecision::ReplanFuture, ReplanAction::Future)
                } else {
                    (ReplanDecision::Continue, ReplanAction::None)
                }
            }
            ReplanPolicy::Sdm { delta } => {
                let k = trace.k();
                let obs = trace.current();
                let planned = trace.planned_row(k);
                let dist: f64 = obs
                    .iter()
                    .zip(planned)
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                outcome.score = Some(dist);
                if dist > delta {
                    (ReplanDecision::ReplanFuture, ReplanAction::Future)
                } else {
                    (ReplanDecision::Continue, ReplanAction::None)
                }
            }
        };
        outcome.decision = decision;

        // equal-budget enforcement: downgrade scratch to future-context when
        // the cap cannot pay for it, drop the replan when nothing fits
        let action = match wanted {
            ReplanAction::Scratch if !self.within_cap(self.budget.n_scratch) => {
                if self.within_cap(self.budget.n_future) {
                    ReplanAction::Future
                } else {
                    ReplanAction::None
                }
            }
            ReplanAction::Future if !self.within_cap(self.budget.n_future) => ReplanAction::None,
            ReplanAction::Prev if !self.within_cap(self.budget.n_prev) => ReplanAction::None,
            a => a,
        };

        let consumed = self.perform(action, model, trace, rng)?;
        outcome.action = action;
        outcome.replanned = action != ReplanAction::None;
        self.stats.log.push(DecisionRow {
            env_step: env_t,
            score: outcome.score,
            kl_per_step: outcome.kl_per_step.clone(),
            decision: outcome.decision,
            action,
            forced: false,
            steps_consumed: consumed,
        });
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_params, DenoiserConfig};
    use crate::diffusion::{make_schedule, NormStats, ScheduleKind};
    use crate::numkit::Tensor;
    use crate::rng;

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
            params: init_params(cfg, 3).unwrap(),
            norm: NormStats {
                min: vec![-1.0; 4],
                max: vec![1.0; 4],
            },
        }
    }

    fn ramp_plan(h: usize) -> Trajectory {
        let rows: Vec<Vec<f32>> = (0..h)
            .map(|t| {
                let v = t as f32 / (h - 1) as f32;
                vec![v, v, 0.0, 0.0]
            })
            .collect();
        Trajectory::from_rows(&rows).unwrap()
    }

    #[test]
    fn budget_defaults_scale_with_n() {
        let b = ReplanBudget::default_for(256);
        assert_eq!((b.n_scratch, b.n_future, b.n_prev), (256, 80, 80));
        let b = ReplanBudget::default_for(128);
        assert_eq!((b.n_scratch, b.n_future, b.n_prev), (128, 40, 40));
    }

    #[test]
    fn shift_and_pad_fixture() {
        // H = 8, k = 2: [s̄2, s3, s4, s5, s6, s7, s7, s7]
        let plan = ramp_plan(8);
        let mut trace =
            ExecutionTrace::new(plan.clone(), &[0.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0])
                .unwrap();
        trace.advance(&[0.15, 0.14, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        trace.advance(&[0.30, 0.29, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(trace.k(), 2);
        let shifted = shift_and_pad(&trace).unwrap();
        assert_eq!(shifted.row(0), &[0.30, 0.29, 0.0, 0.0]);
        for j in 1..=5 {
            assert_eq!(shifted.row(j), plan.row(2 + j), "row {j}");
        }
        assert_eq!(shifted.row(6), plan.row(7));
        assert_eq!(shifted.row(7), plan.row(7));
    }

    #[test]
    fn future_context_zero_steps_is_shift_only() {
        let model = tiny_model();
        let plan = ramp_plan(8);
        let mut trace =
            ExecutionTrace::new(plan, &[0.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        trace.advance(&[0.1, 0.1, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        let mut rng = rng::from_seed(5);
        let out = replan_future_context(&model, &trace, 0, &mut rng).unwrap();
        let expect = shift_and_pad(&trace).unwrap();
        assert_eq!(out.tensor().as_slice(), expect.tensor().as_slice());
    }

    #[test]
    fn prev_context_preserves_prefix_exactly() {
        let model = tiny_model();
        let plan = ramp_plan(8);
        let mut trace =
            ExecutionTrace::new(plan, &[0.0, 0.05, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        trace.advance(&[0.13, 0.12, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        trace.advance(&[0.27, 0.31, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        let mut rng = rng::from_seed(6);
        let out = replan_prev_context(&model, &trace, 4, &mut rng).unwrap();
        for t in 0..=trace.k() {
            assert_eq!(out.row(t), trace.observed_row(t), "row {t}");
        }
        assert_eq!(out.row(7), trace.goal.as_slice());
    }

    #[test]
    fn prev_context_rejects_exhausted_trace() {
        let model = tiny_model();
        let plan = ramp_plan(8);
        let mut trace =
            ExecutionTrace::new(plan, &[0.0; 4], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        for _ in 0..7 {
            trace.advance(&[0.1; 4], &[0.0, 0.0]).unwrap();
        }
        let mut rng = rng::from_seed(7);
        assert!(replan_prev_context(&model, &trace, 4, &mut rng).is_err());
    }

    #[test]
    fn scratch_pins_current_and_goal() {
        let model = tiny_model();
        let current = [0.21f32, -0.4, 0.05, 0.0];
        let goal = [0.9f32, 0.9, 0.0, 0.0];
        let mut rng = rng::from_seed(8);
        let plan = replan_scratch(&model, &current, &goal, &mut rng).unwrap();
        assert_eq!(plan.row(0), &current);
        assert_eq!(plan.row(7), &goal);
    }

    #[test]
    fn dd_fixed_interval_rules() {
        let model = tiny_model();
        let budget = ReplanBudget::default_for(16);
        let probe = ProbeConfig::default_for(16);
        let cal = Calibration {
            mu: 1.0,
            sigma: 1.0,
            samples: 16,
        };
        let policy = ReplanPolicy::DdFixed {
            interval_scratch: 64,
            interval_future: 8,
        };
        let mut ctrl = Controller::new(policy, budget, probe, cal, 2, None).unwrap();
        ctrl.charge_initial_plan();
        let plan = ramp_plan(8);
        let mut trace =
            ExecutionTrace::new(plan, &[0.0; 4], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut rng = rng::from_seed(9);

        // t=0: neither interval fires
        let out = ctrl.step(&model, &mut trace, 0, &mut rng).unwrap();
        assert_eq!(out.action, ReplanAction::None);
        // t=8: future fires
        let out = ctrl.step(&model, &mut trace, 8, &mut rng).unwrap();
        assert_eq!(out.action, ReplanAction::Future);
        // t=64: both divide, scratch takes precedence
        let out = ctrl.step(&model, &mut trace, 64, &mut rng).unwrap();
        assert_eq!(out.action, ReplanAction::Scratch);
        assert_eq!(ctrl.stats.scratch_count, 1);
        assert_eq!(ctrl.stats.future_count, 1);
        assert_eq!(
            ctrl.stats.total_steps,
            ctrl.stats.expected_total(&ctrl.budget)
        );
    }

    #[test]
    fn sdm_triggers_on_distance() {
        let model = tiny_model();
        let budget = ReplanBudget::default_for(16);
        let probe = ProbeConfig::default_for(16);
        let cal = Calibration {
            mu: 1.0,
            sigma: 1.0,
            samples: 16,
        };
        let mut ctrl = Controller::new(
            ReplanPolicy::Sdm { delta: 0.1 },
            budget,
            probe,
            cal,
            0,
            None,
        )
        .unwrap();
        ctrl.charge_initial_plan();
        let plan = ramp_plan(8);
        let mut trace =
            ExecutionTrace::new(plan, &[0.0; 4], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut rng = rng::from_seed(10);

        // tracking error below delta: no replan
        trace.advance(&[1.0 / 7.0, 1.0 / 7.0, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        let out = ctrl.step(&model, &mut trace, 1, &mut rng).unwrap();
        assert_eq!(out.action, ReplanAction::None);
        // big deviation: future-context replan
        trace.advance(&[0.9, 0.0, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        let out = ctrl.step(&model, &mut trace, 2, &mut rng).unwrap();
        assert_eq!(out.action, ReplanAction::Future);
        assert_eq!(trace.k(), 0, "cursor resets after replan");
    }

    #[test]
    fn exhaustion_forces_future_extension() {
        let model = tiny_model();
        let budget = ReplanBudget::default_for(16);
        let probe = ProbeConfig::default_for(16);
        let cal = Calibration {
            mu: 1.0,
            sigma: 1.0,
            samples: 16,
        };
        let mut ctrl =
            Controller::new(ReplanPolicy::OpenLoop, budget, probe, cal, 0, None).unwrap();
        ctrl.charge_initial_plan();
        let plan = ramp_plan(8);
        let mut trace =
            ExecutionTrace::new(plan, &[0.0; 4], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut rng = rng::from_seed(11);
        for t in 0..7 {
            trace.advance(&[0.1; 4], &[0.0, 0.0]).unwrap();
            let _ = ctrl.step(&model, &mut trace, t, &mut rng).unwrap();
        }
        assert!(ctrl.stats.future_count >= 1, "exhaustion must extend");
        assert_eq!(
            ctrl.stats.total_steps,
            ctrl.stats.expected_total(&ctrl.budget)
        );
    }

    #[test]
    fn budget_cap_downgrades_scratch() {
        let model = tiny_model();
        let budget = ReplanBudget::default_for(16);
        let probe = ProbeConfig::default_for(16);
        // calibration that makes any probe look terrible -> scratch wanted
        let cal = Calibration {
            mu: -1.0,
            sigma: 1e-6,
            samples: 16,
        };
        let cap = budget.n_scratch + budget.n_future; // one initial + one future
        let mut ctrl = Controller::new(
            ReplanPolicy::Rdm {
                theta_future: 0.7,
                theta_scratch: 0.5,
            },
            budget,
            probe,
            cal,
            0,
            Some(cap),
        )
        .unwrap();
        ctrl.charge_initial_plan();
        let plan = ramp_plan(8);
        let mut trace =
            ExecutionTrace::new(plan, &[0.0; 4], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut rng = rng::from_seed(12);
        let out = ctrl.step(&model, &mut trace, 0, &mut rng).unwrap();
        assert_eq!(out.decision, ReplanDecision::ReplanScratch);
        assert_eq!(out.action, ReplanAction::Future, "cap downgrades scratch");
        let out = ctrl.step(&model, &mut trace, 1, &mut rng).unwrap();
        assert_eq!(out.action, ReplanAction::None, "budget exhausted");
        assert!(ctrl.stats.total_steps <= cap);
    }

    #[test]
    fn continuity_after_any_replan() {
        let model = tiny_model();
        let plan = ramp_plan(8);
        let current = [0.33f32, 0.41, 0.0, 0.0];
        let mut trace =
            ExecutionTrace::new(plan, &[0.0; 4], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        trace.advance(&current, &[0.0, 0.0]).unwrap();
        let mut rng = rng::from_seed(13);

        let scratch = replan_scratch(&model, trace.current(), &trace.goal, &mut rng).unwrap();
        assert_eq!(scratch.row(0), &current);
        let future = replan_future_context(&model, &trace, 4, &mut rng).unwrap();
        assert_eq!(future.row(0), &current);
    }
}
