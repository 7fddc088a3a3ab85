use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::likelihood::ProbeConfig;
use crate::replan::{ReplanBudget, ReplanPolicy};

/// Flat run configuration. Every field has a default; unknown keys in a
/// config file are rejected. CLI `--set key=value` overrides individual
/// keys after the file loads.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // files
    pub world: String,
    pub out_dir: String,
    pub dataset: String,
    pub checkpoint: String,

    // model
    pub horizon: usize,
    pub state_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub n_diffusion: usize,
    pub schedule: ScheduleKind,

    // dataset generation
    pub episodes: usize,
    pub data_seed: u64,
    pub jitter_frac: f32,

    // training
    pub batch_size: usize,
    pub train_steps: usize,
    pub lr: f32,
    pub train_seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,

    // likelihood probe + calibration
    /// Empty means: scale {5, 10, 15}@256 to the configured N.
    pub probe_steps: Vec<usize>,
    pub probe_draws: usize,
    pub calib_samples: usize,
    pub calib_seed: u64,

    // replan thresholds and budgets
    pub theta_future: f64,
    pub theta_scratch: f64,
    /// 0 means: the schedule length N.
    pub n_scratch: usize,
    /// 0 means: scale 80@256 to the configured N.
    pub n_future: usize,
    /// 0 means: same as n_future.
    pub n_prev: usize,
    pub cooldown: usize,

    // baselines
    /// 0 means: the horizon H.
    pub dd_interval_scratch: usize,
    /// 0 means: max(1, H/8).
    pub dd_interval_future: usize,
    pub sdm_delta: f64,

    // evaluation
    pub policies: Vec<String>,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    /// Negative means: use the world file's epsilon.
    pub epsilon: f32,
    pub equal_budget: bool,
    /// 0 means: 2·N + 2·n_future when equal_budget is set.
    pub budget_cap: usize,
    pub eval_min_path_cells: usize,
    /// 0 means: no upper bound on episode path length.
    pub eval_max_path_cells: usize,
    /// Include wall-clock in metrics JSON (off keeps output byte-stable).
    pub report_timing: bool,

    // sweep axes
    pub sweep_epsilons: Vec<f32>,
    pub sweep_thresholds: Vec<f64>,
    pub sweep_intervals: Vec<usize>,
    pub sweep_replan_steps: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: "worlds/maze8.world".into(),
            out_dir: "out".into(),
            dataset: "out/dataset.bin".into(),
            checkpoint: "out/model.ckpt".into(),

            horizon: 32,
            state_dim: 4,
            width: 128,
            depth: 4,
            embed_dim: 32,
            n_diffusion: 128,
            schedule: ScheduleKind::Cosine,

            episodes: 2000,
            data_seed: 0,
            jitter_frac: 0.05,

            batch_size: 64,
            train_steps: 20_000,
            lr: 1e-3,
            train_seed: 0,
            log_every: 200,
            checkpoint_every: 2000,

            probe_steps: Vec::new(),
            probe_draws: 4,
            calib_samples: 64,
            calib_seed: 0,

            theta_future: 0.7,
            theta_scratch: 0.5,
            n_scratch: 0,
            n_future: 0,
            n_prev: 0,
            cooldown: 2,

            dd_interval_scratch: 0,
            dd_interval_future: 0,
            sdm_delta: 0.1,

            policies: vec!["rdm".into()],
            eval_episodes: 50,
            seeds: Vec::new(),
            epsilon: -1.0,
            equal_budget: false,
            budget_cap: 0,
            eval_min_path_cells: 4,
            eval_max_path_cells: 0,
            report_timing: false,

            sweep_epsilons: vec![0.0, 0.01, 0.03, 0.05, 0.1],
            sweep_thresholds: vec![0.3, 0.5, 0.7, 0.9],
            sweep_intervals: vec![8, 16, 32, 64],
            sweep_replan_steps: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("bad config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides; values parse as JSON, falling back to a
    /// bare string.
    pub fn apply_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut value = serde_json::to_value(&self)?;
        let map = value
            .as_object_mut()
            .expect("config serializes to an object");
        for ov in overrides {
            let (k, v) = ov.split_once('=').ok_or_else(|| {
                Error::config(format!("override `{ov}` must look like key=value"))
            })?;
            if !map.contains_key(k) {
                return Err(Error::config(format!("unknown config key `{k}`")));
            }
            let parsed: serde_json::Value = serde_json::from_str(v)
                .unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
            map.insert(k.to_string(), parsed);
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::config(format!("override: {e}")))?;
        Ok(cfg)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            horizon: self.horizon,
            state_dim: self.state_dim,
            width: self.width,
            depth: self.depth,
            embed_dim: self.embed_dim,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        if self.probe_steps.is_empty() {
            let mut p = ProbeConfig::default_for(self.n_diffusion);
            p.draws = self.probe_draws;
            p
        } else {
            ProbeConfig {
                steps: self.probe_steps.clone(),
                draws: self.probe_draws,
            }
        }
    }

    pub fn replan_budget(&self) -> ReplanBudget {
        let mut b = ReplanBudget::default_for(self.n_diffusion);
        if self.n_future > 0 {
            b.n_future = self.n_future;
            b.n_prev = self.n_future;
        }
        if self.n_prev > 0 {
            b.n_prev = self.n_prev;
        }
        if self.n_scratch > 0 {
            b.n_scratch = self.n_scratch;
        }
        b
    }

    pub fn dd_intervals(&self) -> (usize, usize) {
        let i_s = if self.dd_interval_scratch > 0 {
            self.dd_interval_scratch
        } else {
            self.horizon
        };
        let i_f = if self.dd_interval_future > 0 {
            self.dd_interval_future
        } else {
            (self.horizon / 8).max(1)
        };
        (i_s, i_f)
    }

    pub fn policy_by_name(&self, name: &str) -> Result<ReplanPolicy> {
        let (i_s, i_f) = self.dd_intervals();
        match name {
            "rdm" => Ok(ReplanPolicy::Rdm {
                theta_future: self.theta_future,
                theta_scratch: self.theta_scratch,
            }),
            "dd" => Ok(ReplanPolicy::DdFixed {
                interval_scratch: i_s,
                interval_future: i_f,
            }),
            "sdm" => Ok(ReplanPolicy::Sdm {
                delta: self.sdm_delta,
            }),
            "rpdm" => Ok(ReplanPolicy::Rpdm {
                theta_future: self.theta_future,
                theta_scratch: self.theta_scratch,
            }),
            "open-loop" => Ok(ReplanPolicy::OpenLoop),
            other => Err(Error::config(format!(
                "unknown policy `{other}` (expected rdm, dd, sdm, rpdm, open-loop)"
            ))),
        }
    }

    /// Equal-budget cap when enabled: configured value or 2·(N + n_future).
    pub fn step_cap(&self) -> Option<usize> {
        if !self.equal_budget {
            return None;
        }
        Some(if self.budget_cap > 0 {
            self.budget_cap
        } else {
            2 * (self.n_diffusion + self.replan_budget().n_future)
        })
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        Path::new(&self.out_dir).join(name)
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser_config().validate()?;
        if self.n_diffusion < 2 {
            return Err(Error::config("n_diffusion must be >= 2"));
        }
        self.probe_config().validate(self.n_diffusion)?;
        self.replan_budget().validate(self.n_diffusion)?;
        crate::likelihood::decide(0.5, self.theta_future, self.theta_scratch)?;
        if let Some(cap) = self.step_cap() {
            if cap < self.replan_budget().n_scratch {
                return Err(Error::config(format!(
                    "budget_cap {cap} smaller than one initial plan"
                )));
            }
        }
        for p in &self.policies {
            self.policy_by_name(p)?.validate()?;
        }
        if self.state_dim != crate::envs::STATE_DIM {
            return Err(Error::config(format!(
                "state_dim must be {} for the maze env",
                crate::envs::STATE_DIM
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = r#"{"horizon": 32, "no_such_key": 1}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
    }

    #[test]
    fn overrides_apply_and_reject_unknown() {
        let cfg = RunConfig::default()
            .apply_overrides(&["horizon=16".into(), "schedule=\"linear\"".into()])
            .unwrap();
        assert_eq!(cfg.horizon, 16);
        assert_eq!(cfg.schedule, ScheduleKind::Linear);
        assert!(RunConfig::default()
            .apply_overrides(&["nope=3".into()])
            .is_err());
    }

    #[test]
    fn derived_defaults_scale() {
        let mut cfg = RunConfig::default();
        cfg.n_diffusion = 128;
        assert_eq!(cfg.replan_budget().n_future, 40);
        assert_eq!(cfg.probe_config().steps, vec![3, 5, 8]);
        assert_eq!(cfg.dd_intervals(), (32, 4));
        cfg.equal_budget = true;
        assert_eq!(cfg.step_cap(), Some(2 * (128 + 40)));
    }
}
