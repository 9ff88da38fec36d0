//! Training and test-time pipelines shared by the CLI and the protocols.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::dcp::{conditioning, Dcp};
use crate::diffnum::{Optimizer, ParamStore};
use crate::domain::{read_episodes_jsonl, streams, write_episodes_jsonl, Episode, SeededRng};
use crate::envs::{Env, EnvSampler, EnvSpec, MotorSettings};
use crate::error::{config_err, Error, Result};
use crate::ppo::{self, collect, conditioning_for, eta_scale, deterministic_return, update, FixedSource, RandomizedSource, TrainOutput};
use crate::sysid::{self, datasets_from_episodes, MotorExtension, PosteriorEstimate, SysidModel, SysidTrainOutput};

/// Policy used to gather off-policy data.
pub enum OffPolicy<'a> {
    /// Uniform in the action box.
    Random,
    /// Mean action of a trained policy under a fixed conditioning vector.
    Checkpoint { dcp: &'a Dcp, params: &'a ParamStore, cond: &'a [f64] },
}

/// Runs `episodes` complete episodes of `policy` in `env`.
pub fn collect_offpolicy(
    env: &Env,
    env_id: u64,
    episodes: usize,
    policy: &OffPolicy,
    rng: &mut SeededRng,
) -> Result<Vec<Episode>> {
    if episodes == 0 {
        return Err(config_err("off-policy collection needs at least one episode"));
    }
    let family = env.spec().family;
    let bound = family.action_bound();
    let act_dim = family.act_dim();
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let ep = match policy {
            OffPolicy::Random => {
                let mut prng = SeededRng::new(rng.next_u64(), 0);
                env.run_episode(env_id, rng, |_| Ok((0..act_dim).map(|_| prng.uniform(-bound, bound)).collect()))?
            }
            OffPolicy::Checkpoint { dcp, params, cond } => {
                let z_dyn = dcp.encode_dyn(params, cond)?;
                env.run_episode(env_id, rng, |o| {
                    let lat = dcp.encode_with(params, o, &z_dyn)?;
                    Ok(dcp.policy_forward(params, &lat)?.mean)
                })?
            }
        };
        out.push(ep);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, episodes: &[Episode]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_episodes_jsonl(BufWriter::new(fs::File::create(path)?), episodes)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Episode>> {
    read_episodes_jsonl(BufReader::new(fs::File::open(path)?))
}

/// Reads every `*.jsonl` file of a directory (sorted by name), or one file.
pub fn read_jsonl_dir(path: &Path) -> Result<Vec<Episode>> {
    if path.is_file() {
        return read_jsonl(path);
    }
    let mut files: Vec<_> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut all = Vec::new();
    for f in files {
        all.extend(read_jsonl(&f)?);
    }
    Ok(all)
}

/// A configured experiment: environment population, policy shape and the
/// motor noise of its test environments.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub template: EnvSpec,
    pub dcp: Dcp,
    /// Motor weights appended to the conditioning vector (0 without
    /// noise mode).
    pub motor_slots: usize,
    pub test_motor: Option<MotorSettings>,
}

/// One evaluated test environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub env_index: u64,
    /// Dynamics, followed by `K·ω` in noise mode.
    pub eta_true: Vec<f64>,
    pub eta_hat: Vec<f64>,
    pub eta_hat_std: Vec<f64>,
    pub abs_err: Vec<f64>,
    pub k_used: usize,
    pub zero_shot_mean: f64,
    pub zero_shot_std: f64,
    pub oracle_mean: f64,
    pub oracle_std: f64,
    pub base_mean: f64,
    pub base_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<(u64, String)>,
    pub zero_shot_mean: f64,
    pub oracle_mean: f64,
    pub base_mean: f64,
    pub policy_checksum: String,
    pub sysid_checksum: String,
    pub runtime_secs: f64,
}

impl EvalReport {
    pub fn zero_shot(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.zero_shot_mean).collect()
    }

    /// Per-row metrics; byte-identical for identical inputs.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        writeln!(
            f,
            "env_index,eta_true,eta_hat,eta_hat_std,abs_err,k_used,zero_shot_mean,zero_shot_std,oracle_mean,oracle_std,base_mean,base_std"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.env_index,
                join(&r.eta_true),
                join(&r.eta_hat),
                join(&r.eta_hat_std),
                join(&r.abs_err),
                r.k_used,
                r.zero_shot_mean,
                r.zero_shot_std,
                r.oracle_mean,
                r.oracle_std,
                r.base_mean,
                r.base_std
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

pub(crate) fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    ppo::mean_std(xs).0
}

pub struct FinetuneOutput {
    /// `curve[i]` is the evaluation reward before training on episode `i`.
    pub curve: Vec<f64>,
    pub params: ParamStore,
    pub estimate: PosteriorEstimate,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let template = config.env.template()?;
        let family = config.env.family;
        let motor_slots = match (&config.env.motor, config.protocol.noise_mode) {
            (Some(m), true) => m.weight_count(family.act_dim()),
            _ => 0,
        };
        let dcp = Dcp::new(family.obs_dim(), family.act_dim(), family.dyn_dim() + motor_slots, config.policy.clone())?;
        let test_motor = config.env.motor.clone();
        Ok(Self { config, template, dcp, motor_slots, test_motor })
    }

    /// Conditioning scale fixed by the training range.
    pub fn eta_scale(&self) -> f64 {
        eta_scale(self.config.env.range_frac)
    }

    /// Replaces the motor noise of the test environments.
    pub fn with_test_motor(mut self, motor: Option<MotorSettings>) -> Self {
        self.test_motor = motor;
        self
    }

    pub fn train_sampler(&self, seed: u64) -> EnvSampler {
        EnvSampler {
            template: self.template.clone(),
            range_frac: self.config.env.range_frac,
            motor: self.config.env.motor.clone(),
            seed,
            dynamics_purpose: streams::TRAIN_DYNAMICS,
            omega_purpose: streams::TRAIN_OMEGA,
        }
    }

    pub fn test_sampler(&self, seed: u64) -> EnvSampler {
        EnvSampler {
            template: self.template.clone(),
            range_frac: self.config.eval.test_range_frac.unwrap_or(self.config.env.range_frac),
            motor: self.test_motor.clone(),
            seed,
            dynamics_purpose: streams::TEST_DYNAMICS,
            omega_purpose: streams::TEST_OMEGA,
        }
    }

    /// Dynamics-randomised policy training.
    pub fn train_policy(&self, seed: u64, out: Option<&Path>) -> Result<TrainOutput> {
        let mut source =
            RandomizedSource {
            sampler: self.train_sampler(seed),
            n_envs: self.config.ppo.n_envs,
            motor_slots: self.motor_slots,
            scale: self.eta_scale(),
        };
        let result = ppo::train(&self.dcp, &mut source, &self.config.ppo, seed, out)?;
        if let Some(dir) = out {
            self.save_policy_meta(dir)?;
        }
        Ok(result)
    }

    pub fn save_policy_meta(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("dcp.json"), serde_json::to_vec_pretty(&self.dcp)?)?;
        fs::write(dir.join("config.toml"), self.config.to_toml()?)?;
        Ok(())
    }

    pub fn load_policy(&self, dir: &Path) -> Result<ParamStore> {
        let dcp: Dcp = serde_json::from_slice(&fs::read(dir.join("dcp.json"))?)?;
        if dcp != self.dcp {
            return Err(config_err("policy checkpoint does not match the configured network"));
        }
        ParamStore::load(dir, "policy")
    }

    /// Random-policy episodes from the first `sysid_train_envs` training
    /// environments; environment `i` is recorded with id `i + 1`.
    pub fn sysid_training_episodes(&self, seed: u64) -> Result<Vec<Episode>> {
        let sampler = self.train_sampler(seed);
        let mut all = Vec::new();
        for i in 0..self.config.eval.sysid_train_envs as u64 {
            let env = Env::new(sampler.env(i)?)?;
            let mut rng = SeededRng::stream(seed, streams::OFFPOLICY, i);
            all.extend(collect_offpolicy(&env, i + 1, self.config.eval.sysid_train_episodes, &OffPolicy::Random, &mut rng)?);
        }
        Ok(all)
    }

    pub fn sysid_model(&self) -> Result<SysidModel> {
        let env = &self.config.env;
        let motor = match (&env.motor, self.motor_slots) {
            (Some(m), n) if n > 0 => Some(MotorExtension {
                tau_seed: m.tau_seed,
                phi_dim: m.phi_dim,
                weight_scale: m.k * m.omega_range,
            }),
            _ => None,
        };
        SysidModel::new(env.family, env.dt, env.base(), env.range_frac, motor, env.noise_std, self.config.sysid.clone())
    }

    fn motor_k(&self) -> Option<f64> {
        match (&self.config.env.motor, self.motor_slots) {
            (Some(m), n) if n > 0 => Some(m.k),
            _ => None,
        }
    }

    /// Fits the estimator on labelled off-policy episodes.
    pub fn train_sysid(
        &self,
        episodes: &[Episode],
        seed: u64,
        out: Option<&Path>,
    ) -> Result<(SysidModel, SysidTrainOutput)> {
        let mut model = self.sysid_model()?;
        let data = datasets_from_episodes(episodes, model.config.chunk_len, self.motor_k())?;
        model.fit_normalizer(&data);
        let init = model.init(&mut SeededRng::stream(seed, streams::PARAM_INIT, 1))?;
        let result = sysid::train_sysid(&model, init, &data, seed)?;
        if let Some(dir) = out {
            sysid::save_sysid(dir, &model, &result.params)?;
            let mut f = BufWriter::new(fs::File::create(dir.join("sysid_curve.csv"))?);
            writeln!(f, "step,loss,kl,reconstruction")?;
            for r in &result.curve {
                writeln!(f, "{},{},{},{}", r.step, r.loss, r.kl, r.reconstruction)?;
            }
            f.flush()?;
        }
        Ok((model, result))
    }

    /// Conditioning vector for a physical estimate `η̂` (`++ K·ω̂` in noise
    /// mode).
    pub fn conditioning_from_estimate(&self, physical: &[f64]) -> Vec<f64> {
        let d = self.config.env.family.dyn_dim();
        let base = self.config.env.base();
        let motor = if self.motor_slots > 0 { Some(&physical[d..d + self.motor_slots]) } else { None };
        conditioning(&physical[..d], &base, self.eta_scale(), motor)
    }

    fn base_conditioning(&self) -> Vec<f64> {
        let base = self.config.env.base();
        let motor = vec![0.0; self.motor_slots];
        conditioning(&base, &base, 1.0, if self.motor_slots > 0 { Some(&motor) } else { None })
    }

    fn truth(&self, spec: &EnvSpec) -> Vec<f64> {
        let mut t = spec.dynamics.values().to_vec();
        if self.motor_slots > 0 {
            match &spec.motor {
                Some(m) => t.extend(m.effective_weights()),
                None => t.extend(std::iter::repeat_n(0.0, self.motor_slots)),
            }
        }
        t
    }

    /// Random-policy data of test environment `index` and its posterior.
    pub fn estimate_test_env(
        &self,
        model: &SysidModel,
        sysid_params: &ParamStore,
        env: &Env,
        index: u64,
        seed: u64,
    ) -> Result<PosteriorEstimate> {
        let mut rng = SeededRng::stream(seed, streams::TEST_OFFPOLICY, index);
        let data = collect_offpolicy(env, index + 1, self.config.eval.offpolicy_episodes, &OffPolicy::Random, &mut rng)?;
        model.estimate(sysid_params, &data)
    }

    fn conditioning_for_posterior(&self, est: &PosteriorEstimate, index: u64, seed: u64) -> Vec<f64> {
        if self.config.eval.condition_on_sample {
            let mut rng = SeededRng::stream(seed, streams::EVAL, (1 << 39) + index);
            self.conditioning_from_estimate(&est.posterior.sample(&mut rng))
        } else {
            self.conditioning_from_estimate(&est.posterior.mean)
        }
    }

    /// Mean and std of deterministic returns over `episodes_per_env`
    /// episodes; episode `e` of environment `index` always uses the same
    /// random stream, whatever the conditioning.
    pub fn eval_rewards(&self, params: &ParamStore, env: &Env, cond: &[f64], index: u64, seed: u64) -> Result<(f64, f64)> {
        let n = self.config.eval.episodes_per_env as u64;
        let mut returns = Vec::with_capacity(n as usize);
        for e in 0..n {
            let mut rng = SeededRng::stream(seed, streams::EVAL, index * n + e);
            returns.push(deterministic_return(&self.dcp, params, env, cond, &mut rng)?);
        }
        Ok(ppo::mean_std(&returns))
    }

    /// Zero-shot evaluation on `n_test_envs` unseen environments. No
    /// parameter is modified; this is verified by checksums.
    pub fn evaluate_zero_shot(
        &self,
        policy: &ParamStore,
        model: &SysidModel,
        sysid_params: &ParamStore,
        seed: u64,
    ) -> Result<EvalReport> {
        let start = Instant::now();
        let policy_checksum = policy.checksum();
        let sysid_checksum = sysid_params.checksum();
        let sampler = self.test_sampler(seed);
        let base_cond = self.base_conditioning();
        let mut rows = Vec::new();
        let mut skipped = Vec::new();
        for index in 0..self.config.eval.n_test_envs as u64 {
            let spec = sampler.env(index)?;
            let oracle_cond = conditioning_for(&spec, self.motor_slots, self.eta_scale());
            let truth = self.truth(&spec);
            let env = Env::new(spec)?;
            let est = match self.estimate_test_env(model, sysid_params, &env, index, seed) {
                Ok(e) => e,
                Err(e) => {
                    warn!("test env {index}: estimation failed ({e}); skipped");
                    skipped.push((index, e.to_string()));
                    continue;
                }
            };
            let cond = self.conditioning_for_posterior(&est, index, seed);
            let (zero_shot_mean, zero_shot_std) = self.eval_rewards(policy, &env, &cond, index, seed)?;
            let (oracle_mean, oracle_std) = self.eval_rewards(policy, &env, &oracle_cond, index, seed)?;
            let (base_mean, base_std) = self.eval_rewards(policy, &env, &base_cond, index, seed)?;
            let abs_err = est.posterior.mean.iter().zip(&truth).map(|(a, b)| (a - b).abs()).collect();
            rows.push(EvalRow {
                env_index: index,
                eta_true: truth,
                eta_hat: est.posterior.mean.clone(),
                eta_hat_std: est.posterior.std.clone(),
                abs_err,
                k_used: est.k_used,
                zero_shot_mean,
                zero_shot_std,
                oracle_mean,
                oracle_std,
                base_mean,
                base_std,
            });
        }
        if policy.checksum() != policy_checksum || sysid_params.checksum() != sysid_checksum {
            return Err(Error::Internal("parameters changed during zero-shot evaluation".into()));
        }
        let col = |f: fn(&EvalRow) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
        let report = EvalReport {
            zero_shot_mean: col(|r| r.zero_shot_mean),
            oracle_mean: col(|r| r.oracle_mean),
            base_mean: col(|r| r.base_mean),
            rows,
            skipped,
            policy_checksum,
            sysid_checksum,
            runtime_secs: start.elapsed().as_secs_f64(),
        };
        info!(
            "zero-shot {:.3}, oracle {:.3}, base {:.3} over {} envs",
            report.zero_shot_mean,
            report.oracle_mean,
            report.base_mean,
            report.rows.len()
        );
        Ok(report)
    }

    /// Continues training in test environment `index`, conditioned on its
    /// estimate, one episode per update.
    pub fn finetune(
        &self,
        policy: &ParamStore,
        model: &SysidModel,
        sysid_params: &ParamStore,
        index: u64,
        episodes: usize,
        seed: u64,
    ) -> Result<FinetuneOutput> {
        let spec = self.test_sampler(seed).env(index)?;
        let env = Env::new(spec.clone())?;
        let estimate = self.estimate_test_env(model, sysid_params, &env, index, seed)?;
        let cond = self.conditioning_for_posterior(&estimate, index, seed);
        let mut params = policy.clone();
        let mut opt = Optimizer::new(self.config.ppo.optimizer, &params);
        let mut source = FixedSource { spec, cond: cond.clone() };
        let mut curve = Vec::with_capacity(episodes);
        for i in 0..episodes {
            curve.push(self.eval_rewards(&params, &env, &cond, index, seed)?.0);
            let mut rng = SeededRng::stream(seed, streams::FINETUNE, i as u64);
            let batch = collect(&self.dcp, &params, &mut source, 1, i as u64, &mut rng)?;
            update(&self.dcp, &mut params, &mut opt, &batch, &self.config.ppo, &mut rng)?;
        }
        Ok(FinetuneOutput { curve, params, estimate })
    }
}

pub fn write_finetune_csv(path: &Path, curve: &[f64]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "episode,reward")?;
    for (i, r) in curve.iter().enumerate() {
        writeln!(f, "{i},{r}")?;
    }
    f.flush()?;
    Ok(())
}
