//! TOML experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dcp::DcpConfig;
use crate::domain::DynamicsVector;
use crate::envs::{EnvSpec, Family, MotorSettings};
use crate::error::{config_err, Result};
use crate::ppo::PpoConfig;
use crate::sysid::SysidConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub family: Family,
    /// Defaults to the family's nominal parameters.
    #[serde(default)]
    pub base: Option<Vec<f64>>,
    #[serde(default = "default_range")]
    pub range_frac: f64,
    /// Std of the additive Gaussian process noise.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_spread")]
    pub init_spread: f64,
    /// Motor noise present in the environments; absent means none.
    #[serde(default)]
    pub motor: Option<MotorSettings>,
}

fn default_range() -> f64 {
    0.2
}
fn default_noise() -> f64 {
    0.01
}
fn default_dt() -> f64 {
    0.05
}
fn default_horizon() -> usize {
    200
}
fn default_spread() -> f64 {
    1.0
}

impl EnvConfig {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            base: None,
            range_frac: default_range(),
            noise_std: default_noise(),
            dt: default_dt(),
            horizon: default_horizon(),
            init_spread: default_spread(),
            motor: None,
        }
    }

    pub fn base(&self) -> Vec<f64> {
        self.base.clone().unwrap_or_else(|| self.family.base_dynamics().to_vec())
    }

    /// Environment at the base dynamics, carrying the training range.
    pub fn template(&self) -> Result<EnvSpec> {
        let dynamics = DynamicsVector::at_base(self.base(), self.range_frac)?;
        let spec = EnvSpec {
            family: self.family,
            dynamics,
            noise_std: self.noise_std,
            motor: None,
            dt: self.dt,
            horizon: self.horizon,
            init_spread: self.init_spread,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_test_envs: usize,
    /// Deterministic evaluation episodes per test environment.
    pub episodes_per_env: usize,
    /// Random-policy episodes used to estimate each test environment.
    pub offpolicy_episodes: usize,
    pub finetune_episodes: usize,
    /// Training environments and random episodes per environment for the
    /// estimator.
    pub sysid_train_envs: usize,
    pub sysid_train_episodes: usize,
    /// Test range; defaults to the training range.
    pub test_range_frac: Option<f64>,
    /// Condition on one posterior sample instead of the posterior mean.
    pub condition_on_sample: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_test_envs: 50,
            episodes_per_env: 20,
            offpolicy_episodes: 200,
            finetune_episodes: 100,
            sysid_train_envs: 50,
            sysid_train_episodes: 10,
            test_range_frac: None,
            condition_on_sample: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Condition the policy on, and estimate, the motor weights `K·ω`.
    pub noise_mode: bool,
    pub n_seeds: usize,
    pub sweep_ranges: Vec<f64>,
    pub noise_k_values: Vec<f64>,
    /// Feature-network seed of the unknown-noise test setting.
    pub unknown_tau_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            noise_mode: false,
            n_seeds: 3,
            sweep_ranges: vec![0.05, 0.1, 0.2, 0.3],
            noise_k_values: vec![0.0, 0.5, 1.0],
            unknown_tau_seed: 1007,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub env: EnvConfig,
    pub policy: DcpConfig,
    pub ppo: PpoConfig,
    pub sysid: SysidConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
}

impl ExperimentConfig {
    /// Defaults for every block.
    pub fn new(family: Family) -> Self {
        Self {
            seed: 0,
            env: EnvConfig::new(family),
            policy: DcpConfig::default(),
            ppo: PpoConfig::default(),
            sysid: SysidConfig::default(),
            eval: EvalConfig::default(),
            protocol: ProtocolConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.template()?;
        if !(self.env.range_frac >= 0.0 && self.env.range_frac < 1.0) {
            return Err(config_err("env.range_frac must lie in [0, 1)"));
        }
        if let Some(r) = self.eval.test_range_frac {
            if !(0.0..1.0).contains(&r) {
                return Err(config_err("eval.test_range_frac must lie in [0, 1)"));
            }
        }
        if self.eval.offpolicy_episodes == 0 {
            return Err(config_err("eval.offpolicy_episodes must be >= 1"));
        }
        if self.eval.episodes_per_env == 0 {
            return Err(config_err("eval.episodes_per_env must be >= 1"));
        }
        if self.protocol.noise_mode && self.env.motor.is_none() {
            return Err(config_err("protocol.noise_mode requires an [env.motor] block"));
        }
        if self.protocol.sweep_ranges.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(config_err("sweep ranges must lie in [0, 1)"));
        }
        if self.protocol.noise_k_values.iter().any(|k| !(*k >= 0.0)) {
            return Err(config_err("noise multipliers must be >= 0"));
        }
        self.policy.validate()?;
        self.ppo.validate()?;
        self.sysid.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_uses_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "[env]\nfamily = \"point_mass_1d\"\n[policy]\n[ppo]\n[sysid]\n[eval]\n",
        )
        .unwrap();
        assert_eq!(cfg.eval.offpolicy_episodes, 200);
        assert_eq!(cfg.eval.finetune_episodes, 100);
        assert_eq!(cfg.env.base(), vec![1.0, 1.0]);
    }

    #[test]
    fn missing_block_is_rejected() {
        assert!(ExperimentConfig::from_toml("[env]\nfamily = \"pendulum\"\n").is_err());
    }

    #[test]
    fn zero_offpolicy_budget_is_rejected() {
        let mut cfg = ExperimentConfig::new(Family::Pendulum);
        cfg.eval.offpolicy_episodes = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::new(Family::CartPole);
        cfg.env.motor = Some(MotorSettings::default());
        cfg.protocol.noise_mode = true;
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
