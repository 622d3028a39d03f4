//! Experiment configuration: hyperparameters, environment selection, seeds,
//! and output locations. The resolved config is stored verbatim next to the
//! run's results so every run is reproducible from its own directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::critic::TwinReduction;
use crate::error::{Error, Result};

/// Environment variable overriding the output root for runs.
pub const OUT_ROOT_ENV: &str = "FLOWMARL_OUT";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// "landmark", "pure_coordination", "payoff", or "xor".
    pub env: String,
    /// Load this dataset instead of generating one from the env settings.
    pub dataset_path: Option<PathBuf>,
    pub seed: u64,
    pub gradient_steps: usize,
    pub batch_size: usize,
    pub flow_steps: usize,
    /// Behavior-cloning distillation coefficient in the actor objective.
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub adam_eps: f64,
    pub hidden: Vec<usize>,
    /// Steps between evaluation checkpoints; defaults to 2% of the run.
    pub eval_interval: Option<usize>,
    /// Monte-Carlo sample count for the bound checks (exact OT cap: 512).
    pub bound_samples: usize,
    pub lipschitz_pairs: usize,
    /// Finite-sample slack multiplier for the bound checks.
    pub bound_tolerance: f64,
    pub mi_samples: usize,
    pub mi_bins: usize,
    pub eval_episodes: usize,
    pub q_reduction: TwinReduction,
    /// Divide the value-maximization term by the batch mean |Q_tot|.
    pub q_normalization: bool,
    /// Include the value-maximization term in the actor objective; turning
    /// this off leaves pure distillation (the no-Q ablation).
    pub q_max: bool,
    /// Train only the joint flow (skips critics and one-step policies).
    pub flow_only: bool,
    /// Force sequential kernels for bitwise single-thread determinism.
    pub single_thread: bool,
    /// Deployment decode temperature for discrete actions (0 = argmax).
    pub temperature: f64,
    pub out_dir: PathBuf,
    // Generation settings, used when `dataset_path` is absent.
    pub agents: usize,
    pub episodes: usize,
    pub zeta: f64,
    pub epsilon_rare: f64,
    pub mode_std: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: "landmark".into(),
            dataset_path: None,
            seed: 0,
            gradient_steps: 1000,
            batch_size: 64,
            flow_steps: 10,
            alpha: 3.0,
            gamma: 0.995,
            tau: 0.005,
            policy_lr: 3e-4,
            value_lr: 3e-4,
            adam_eps: 1e-5,
            hidden: vec![64, 64],
            eval_interval: None,
            bound_samples: 256,
            lipschitz_pairs: 10_000,
            bound_tolerance: 0.10,
            mi_samples: 2048,
            mi_bins: 4,
            eval_episodes: 200,
            q_reduction: TwinReduction::Mean,
            q_normalization: false,
            q_max: true,
            flow_only: false,
            single_thread: false,
            temperature: 0.0,
            out_dir: PathBuf::from("runs/run"),
            agents: 3,
            episodes: 50,
            zeta: 0.5,
            epsilon_rare: 0.1,
            mode_std: 0.1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gradient_steps == 0 {
            return Err(Error::InvalidArgument("gradient_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.flow_steps == 0 {
            return Err(Error::InvalidArgument("flow_steps must be >= 1".into()));
        }
        for (name, v) in [
            ("policy_lr", self.policy_lr),
            ("value_lr", self.value_lr),
            ("adam_eps", self.adam_eps),
        ] {
            if v <= 0.0 {
                return Err(Error::InvalidArgument(format!("{} must be positive", name)));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument("gamma must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument("tau must lie in [0, 1]".into()));
        }
        if self.bound_samples == 0 || self.bound_samples > 512 {
            return Err(Error::InvalidArgument(
                "bound_samples must lie in 1..=512 (exact-OT cap)".into(),
            ));
        }
        Ok(())
    }

    /// Checkpoint cadence: every 2% of the run, at least one step apart.
    pub fn resolved_eval_interval(&self) -> usize {
        self.eval_interval
            .unwrap_or_else(|| (self.gradient_steps / 50).max(1))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Apply `key=value` overrides; values parse as JSON first, falling
    /// back to plain strings.
    pub fn apply_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let map = value
            .as_object_mut()
            .expect("config serializes to an object");
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("override {:?} is not key=value", item))
            })?;
            if !map.contains_key(key) {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key {:?}",
                    key
                )));
            }
            let parsed: serde_json::Value = match serde_json::from_str(raw) {
                Ok(v) => v,
                Err(_) => serde_json::Value::String(raw.to_string()),
            };
            map.insert(key.to_string(), parsed);
        }
        let cfg: ExperimentConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Output directory with the `FLOWMARL_OUT` root applied when set and
    /// the configured path is relative.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var(OUT_ROOT_ENV) {
            Ok(root) if self.out_dir.is_relative() => PathBuf::from(root).join(&self.out_dir),
            _ => self.out_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_and_reject_unknown_keys() {
        let cfg = ExperimentConfig::default();
        let out = cfg
            .apply_overrides(&[
                "alpha=0.5".into(),
                "hidden=[32,32]".into(),
                "env=payoff".into(),
            ])
            .unwrap();
        assert_eq!(out.alpha, 0.5);
        assert_eq!(out.hidden, vec![32, 32]);
        assert_eq!(out.env, "payoff");
        assert!(cfg.apply_overrides(&["not_a_key=1".into()]).is_err());
        assert!(cfg.apply_overrides(&["alpha".into()]).is_err());
    }

    #[test]
    fn validation_rejects_bad_rates() {
        let mut cfg = ExperimentConfig::default();
        cfg.policy_lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.gradient_steps = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.bound_samples = 1000;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn eval_interval_default_is_two_percent() {
        let mut cfg = ExperimentConfig::default();
        cfg.gradient_steps = 1000;
        assert_eq!(cfg.resolved_eval_interval(), 20);
        cfg.gradient_steps = 10;
        assert_eq!(cfg.resolved_eval_interval(), 1);
    }
}
