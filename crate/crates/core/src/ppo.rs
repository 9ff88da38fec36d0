//! Clipped-surrogate policy optimisation of a [`Dcp`] under dynamics
//! randomisation. Dynamics are drawn once per episode and the policy is
//! conditioned on them for the whole episode.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dcp::{conditioning, Dcp};
use crate::diffnum::{Gradients, Optimizer, OptimizerConfig, ParamStore, Tape, Tensor};
use crate::domain::{streams, SeededRng};
use crate::envs::{Env, EnvSampler, EnvSpec};
use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// Number of collect/update iterations.
    pub iterations: usize,
    pub episodes_per_iter: usize,
    pub epochs_per_batch: usize,
    /// 0 uses the whole batch as one minibatch.
    pub minibatch_size: usize,
    pub clip_eps: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub optimizer: OptimizerConfig,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    /// Multiplies rewards before advantage estimation.
    pub reward_scale: f64,
    /// Size of a fixed pool of training environments; 0 draws fresh
    /// dynamics for every episode.
    pub n_envs: usize,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            episodes_per_iter: 16,
            epochs_per_batch: 4,
            minibatch_size: 256,
            clip_eps: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.0,
            optimizer: OptimizerConfig::adam(1e-3),
            max_grad_norm: 0.5,
            reward_scale: 1.0,
            n_envs: 0,
            checkpoint_every: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(config_err(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(config_err(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.clip_eps > 0.0) {
            return Err(config_err("clip_eps must be > 0"));
        }
        if self.episodes_per_iter == 0 || self.epochs_per_batch == 0 {
            return Err(config_err("episodes_per_iter and epochs_per_batch must be >= 1"));
        }
        if !(self.optimizer.lr() > 0.0) {
            return Err(config_err("learning rate must be > 0"));
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 || self.max_grad_norm < 0.0 {
            return Err(config_err("loss coefficients and max_grad_norm must be >= 0"));
        }
        Ok(())
    }
}

/// Supplies the environment and conditioning vector for each episode.
pub trait EpisodeSource {
    fn episode_env(&mut self, episode: u64, rng: &mut SeededRng) -> Result<(EnvSpec, Vec<f64>)>;
}

/// Scale mapping relative deviations from the base onto `[-1, 1]` for a
/// training range (1 for a degenerate range).
pub fn eta_scale(range_frac: f64) -> f64 {
    if range_frac > 0.0 {
        1.0 / range_frac
    } else {
        1.0
    }
}

/// Conditioning vector for `spec`: scaled relative dynamics, followed by
/// `motor_slots` motor weights (`K·ω`, or zeros without motor noise).
pub fn conditioning_for(spec: &EnvSpec, motor_slots: usize, scale: f64) -> Vec<f64> {
    let weights = match (&spec.motor, motor_slots) {
        (_, 0) => None,
        (Some(m), _) => Some(m.effective_weights()),
        (None, n) => Some(vec![0.0; n]),
    };
    conditioning(spec.dynamics.values(), spec.dynamics.base(), scale, weights.as_deref())
}

/// Randomised training environments conditioned on their true dynamics.
pub struct RandomizedSource {
    pub sampler: EnvSampler,
    /// 0: a fresh environment per episode; otherwise a pool of this size.
    pub n_envs: usize,
    pub motor_slots: usize,
    /// See [`eta_scale`].
    pub scale: f64,
}

impl EpisodeSource for RandomizedSource {
    fn episode_env(&mut self, episode: u64, rng: &mut SeededRng) -> Result<(EnvSpec, Vec<f64>)> {
        let index = if self.n_envs == 0 { episode } else { rng.below(self.n_envs) as u64 };
        let spec = self.sampler.env(index)?;
        let cond = conditioning_for(&spec, self.motor_slots, self.scale);
        Ok((spec, cond))
    }
}

/// A single environment with a fixed conditioning vector.
pub struct FixedSource {
    pub spec: EnvSpec,
    pub cond: Vec<f64>,
}

impl EpisodeSource for FixedSource {
    fn episode_env(&mut self, _episode: u64, _rng: &mut SeededRng) -> Result<(EnvSpec, Vec<f64>)> {
        Ok((self.spec.clone(), self.cond.clone()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeInfo {
    pub start: usize,
    pub len: usize,
    pub dynamics: Vec<f64>,
    pub total_reward: f64,
    /// `V` of the observation following the last step (time-limit bootstrap).
    pub bootstrap: f64,
}

/// Flat per-step storage; row `i` of every array belongs to the same step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub cond_dim: usize,
    pub obs: Vec<f64>,
    pub next_obs: Vec<f64>,
    /// Input actually fed to `M_ζ` (zeros when the encoding is disabled).
    pub cond: Vec<f64>,
    pub actions: Vec<f64>,
    /// Sampled actions clipped to the action box.
    pub executed: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub episodes: Vec<EpisodeInfo>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn truncate(&mut self, n: usize) {
        self.obs.truncate(n * self.obs_dim);
        self.next_obs.truncate(n * self.obs_dim);
        self.cond.truncate(n * self.cond_dim);
        self.actions.truncate(n * self.act_dim);
        self.executed.truncate(n * self.act_dim);
        self.log_probs.truncate(n);
        self.rewards.truncate(n);
        self.values.truncate(n);
    }
}

fn run_collect_episode(
    dcp: &Dcp,
    store: &ParamStore,
    spec: EnvSpec,
    cond: &[f64],
    rng: &mut SeededRng,
    batch: &mut RolloutBatch,
) -> Result<EpisodeInfo> {
    let env = Env::new(spec)?;
    let cond_in = dcp.conditioning_input(cond)?;
    // M_ζ is evaluated once; the dynamics latent is constant over the episode.
    let z_dyn = dcp.m_zeta.forward(store, &cond_in)?;
    let start = batch.len();
    let mut obs = env.reset(rng);
    let mut total = 0.0;
    for _ in 0..env.spec().horizon {
        let lat = dcp.encode_with(store, &obs, &z_dyn)?;
        let dist = dcp.policy_forward(store, &lat)?;
        let value = dcp.value_forward(store, &lat)?;
        let (action, lp) = crate::dcp::sample_action(&dist, rng);
        let (next, r) = env.step(&obs, &action, rng)?;
        batch.obs.extend_from_slice(&obs);
        batch.next_obs.extend_from_slice(&next);
        batch.cond.extend_from_slice(&cond_in);
        batch.executed.extend(env.spec().family.clip_action(&action));
        batch.actions.extend_from_slice(&action);
        batch.log_probs.push(lp);
        batch.rewards.push(r);
        batch.values.push(value);
        total += r;
        obs = next;
    }
    let lat = dcp.encode_with(store, &obs, &z_dyn)?;
    let bootstrap = dcp.value_forward(store, &lat)?;
    Ok(EpisodeInfo {
        start,
        len: batch.len() - start,
        dynamics: env.spec().dynamics.values().to_vec(),
        total_reward: total,
        bootstrap,
    })
}

/// Rolls out `episodes` stochastic episodes. An environment fault discards
/// only the affected episode.
pub fn collect(
    dcp: &Dcp,
    store: &ParamStore,
    source: &mut dyn EpisodeSource,
    episodes: usize,
    first_episode: u64,
    rng: &mut SeededRng,
) -> Result<RolloutBatch> {
    let mut batch = RolloutBatch {
        obs_dim: dcp.obs_dim,
        act_dim: dcp.act_dim,
        cond_dim: dcp.cond_dim,
        ..RolloutBatch::default()
    };
    let mut last_err = None;
    for e in 0..episodes as u64 {
        let (spec, cond) = source.episode_env(first_episode + e, rng)?;
        let start = batch.len();
        match run_collect_episode(dcp, store, spec, &cond, rng, &mut batch) {
            Ok(info) => batch.episodes.push(info),
            Err(err @ Error::EnvFault(_)) => {
                warn!("episode {} aborted: {err}", first_episode + e);
                batch.truncate(start);
                last_err = Some(err);
            }
            Err(err) => return Err(err),
        }
    }
    if batch.episodes.is_empty() {
        return Err(last_err.unwrap_or_else(|| config_err("no episodes requested")));
    }
    Ok(batch)
}

/// Generalised advantage estimation over one episode.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 == n { bootstrap } else { values[t + 1] };
        let delta = rewards[t] + gamma * next_v - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts to zero mean and scales to unit (population) standard deviation.
/// A constant vector is only centred.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 1e-12 {
            *a /= std;
        }
    }
}

/// Tensors for one gradient step.
#[derive(Clone, Debug)]
pub struct Minibatch {
    pub obs: Tensor,
    pub next_obs: Tensor,
    pub cond: Tensor,
    pub actions: Tensor,
    pub executed: Tensor,
    pub old_log_probs: Tensor,
    pub advantages: Tensor,
    pub returns: Tensor,
}

fn gather(src: &[f64], width: usize, idx: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        data.extend_from_slice(&src[i * width..(i + 1) * width]);
    }
    Tensor::new(idx.len(), width, data)
}

impl Minibatch {
    pub fn gather(batch: &RolloutBatch, adv: &[f64], ret: &[f64], idx: &[usize]) -> Result<Self> {
        Ok(Self {
            obs: gather(&batch.obs, batch.obs_dim, idx)?,
            next_obs: gather(&batch.next_obs, batch.obs_dim, idx)?,
            cond: gather(&batch.cond, batch.cond_dim, idx)?,
            actions: gather(&batch.actions, batch.act_dim, idx)?,
            executed: gather(&batch.executed, batch.act_dim, idx)?,
            old_log_probs: gather(&batch.log_probs, 1, idx)?,
            advantages: gather(adv, 1, idx)?,
            returns: gather(ret, 1, idx)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub inv_loss: f64,
    pub rec_loss: f64,
}

/// Total minibatch loss and its parameter gradient:
/// `−mean(min(rÂ, clip(r)Â)) + c_v·mean((V−R)²) − c_e·mean(H) + w_inv·L_inv + w_rec·L_rec`.
pub fn ppo_loss(
    dcp: &Dcp,
    store: &ParamStore,
    mb: &Minibatch,
    cfg: &PpoConfig,
) -> Result<(LossReport, Gradients)> {
    let mut tape = Tape::new();
    let obs = tape.input(mb.obs.clone());
    let cond = tape.input(mb.cond.clone());
    let out = dcp.forward_tape(&mut tape, store, obs, cond)?;
    let actions = tape.input(mb.actions.clone());
    let lp = dcp.log_prob_tape(&mut tape, out.mean, out.std, actions)?;
    let old = tape.input(mb.old_log_probs.clone());
    let adv = tape.input(mb.advantages.clone());
    let log_ratio = tape.sub(lp, old)?;
    let ratio = tape.exp(log_ratio);
    let s1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let s2 = tape.mul(clipped, adv)?;
    let smin = tape.min(s1, s2)?;
    let surr = tape.mean(smin);
    let surrogate = tape.neg(surr);

    let ret = tape.input(mb.returns.clone());
    let verr = tape.sub(out.value, ret)?;
    let verr = tape.square(verr);
    let value_loss = tape.mean(verr);
    let ent = dcp.entropy_tape(&mut tape, out.std);
    let entropy = tape.mean(ent);

    let vl = tape.scale(value_loss, cfg.value_coef);
    let mut total = tape.add(surrogate, vl)?;
    if cfg.entropy_coef > 0.0 {
        let e = tape.scale(entropy, -cfg.entropy_coef);
        total = tape.add(total, e)?;
    }
    let (w_inv, w_rec) = (dcp.config.w_inv, dcp.config.w_rec);
    let (mut inv_loss, mut rec_loss) = (0.0, 0.0);
    if w_inv > 0.0 || w_rec > 0.0 {
        let next_obs = tape.input(mb.next_obs.clone());
        let executed = tape.input(mb.executed.clone());
        let (inv, rec) = dcp.aux_losses_tape(&mut tape, store, &out, next_obs, cond, obs, executed)?;
        inv_loss = tape.scalar(inv);
        rec_loss = tape.scalar(rec);
        let inv = tape.scale(inv, w_inv);
        let rec = tape.scale(rec, w_rec);
        total = tape.add(total, inv)?;
        total = tape.add(total, rec)?;
    }
    let report = LossReport {
        total: tape.scalar(total),
        surrogate: tape.scalar(surrogate),
        value_loss: tape.scalar(value_loss),
        entropy: tape.scalar(entropy),
        inv_loss,
        rec_loss,
    };
    if !report.total.is_finite() {
        return Err(Error::NonFiniteLoss(format!("{report:?}")));
    }
    let grads = tape.grad(total, store)?;
    Ok((report, grads))
}

/// Advantages (normalised over the batch) and value targets.
pub fn advantages_and_returns(batch: &RolloutBatch, cfg: &PpoConfig) -> (Vec<f64>, Vec<f64>) {
    let mut adv = Vec::with_capacity(batch.len());
    let mut ret = Vec::with_capacity(batch.len());
    for ep in &batch.episodes {
        let r: Vec<f64> = batch.rewards[ep.start..ep.start + ep.len].iter().map(|x| x * cfg.reward_scale).collect();
        let v = &batch.values[ep.start..ep.start + ep.len];
        let (a, rt) = gae(&r, v, ep.bootstrap, cfg.gamma, cfg.lambda);
        adv.extend(a);
        ret.extend(rt);
    }
    normalize_advantages(&mut adv);
    (adv, ret)
}

/// Several epochs of minibatch steps on one batch. On any failure the
/// parameters are restored to their state before the call.
pub fn update(
    dcp: &Dcp,
    store: &mut ParamStore,
    opt: &mut Optimizer,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut SeededRng,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(config_err("cannot update on an empty batch"));
    }
    let snapshot = store.clone();
    let opt_snapshot = opt.clone();
    let result = update_inner(dcp, store, opt, batch, cfg, rng);
    if result.is_err() {
        *store = snapshot;
        *opt = opt_snapshot;
    }
    result
}

fn update_inner(
    dcp: &Dcp,
    store: &mut ParamStore,
    opt: &mut Optimizer,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut SeededRng,
) -> Result<LossReport> {
    let (adv, ret) = advantages_and_returns(batch, cfg);
    let n = batch.len();
    let mb_size = if cfg.minibatch_size == 0 { n } else { cfg.minibatch_size.min(n) };
    let mut idx: Vec<usize> = (0..n).collect();
    let mut sum = LossReport::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs_per_batch {
        rng.shuffle(&mut idx);
        for chunk in idx.chunks(mb_size) {
            let mb = Minibatch::gather(batch, &adv, &ret, chunk)?;
            let (rep, mut grads) = ppo_loss(dcp, store, &mb, cfg)?;
            if cfg.max_grad_norm > 0.0 {
                grads.clip_global_norm(cfg.max_grad_norm);
            }
            opt.step(store, &grads)?;
            sum.total += rep.total;
            sum.surrogate += rep.surrogate;
            sum.value_loss += rep.value_loss;
            sum.entropy += rep.entropy;
            sum.inv_loss += rep.inv_loss;
            sum.rec_loss += rep.rec_loss;
            count += 1.0;
        }
    }
    Ok(LossReport {
        total: sum.total / count,
        surrogate: sum.surrogate / count,
        value_loss: sum.value_loss / count,
        entropy: sum.entropy / count,
        inv_loss: sum.inv_loss / count,
        rec_loss: sum.rec_loss / count,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iter: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub inv_loss: f64,
    pub rec_loss: f64,
}

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "iter,mean_reward,std_reward,surrogate,value_loss,inv_loss,rec_loss")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.iter, r.mean_reward, r.std_reward, r.surrogate, r.value_loss, r.inv_loss, r.rec_loss
        )?;
    }
    Ok(())
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub struct TrainOutput {
    pub params: ParamStore,
    pub curve: Vec<CurveRow>,
}

/// Alternates collection and update for `cfg.iterations` iterations starting
/// from `params`. Checkpoints go to `out` as `policy.*` when given.
pub fn train_from(
    dcp: &Dcp,
    mut params: ParamStore,
    source: &mut dyn EpisodeSource,
    cfg: &PpoConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut opt = Optimizer::new(cfg.optimizer, &params);
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut rng = SeededRng::stream(seed, streams::ROLLOUT, it as u64);
        let first = (it * cfg.episodes_per_iter) as u64;
        let batch = collect(dcp, &params, source, cfg.episodes_per_iter, first, &mut rng)?;
        let mut mb_rng = SeededRng::stream(seed, streams::MINIBATCH, it as u64);
        let rep = update(dcp, &mut params, &mut opt, &batch, cfg, &mut mb_rng)?;
        let rewards: Vec<f64> = batch.episodes.iter().map(|e| e.total_reward).collect();
        let (mean_reward, std_reward) = mean_std(&rewards);
        if it % 10 == 0 || it + 1 == cfg.iterations {
            info!("iter {it}: mean reward {mean_reward:.3} (std {std_reward:.3}), surrogate {:.4}", rep.surrogate);
        }
        curve.push(CurveRow {
            iter: it,
            mean_reward,
            std_reward,
            surrogate: rep.surrogate,
            value_loss: rep.value_loss,
            inv_loss: rep.inv_loss,
            rec_loss: rep.rec_loss,
        });
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                params.save(dir, "policy")?;
            }
        }
    }
    if let Some(dir) = out {
        params.save(dir, "policy")?;
        write_curve_csv(&dir.join("learning_curve.csv"), &curve)?;
    }
    Ok(TrainOutput { params, curve })
}

/// Fresh parameters from the `PARAM_INIT` stream, then [`train_from`].
pub fn train(
    dcp: &Dcp,
    source: &mut dyn EpisodeSource,
    cfg: &PpoConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<TrainOutput> {
    let params = dcp.init(&mut SeededRng::stream(seed, streams::PARAM_INIT, 0))?;
    train_from(dcp, params, source, cfg, seed, out)
}

/// Total reward of one episode acting with the distribution mean.
pub fn deterministic_return(
    dcp: &Dcp,
    store: &ParamStore,
    env: &Env,
    cond: &[f64],
    rng: &mut SeededRng,
) -> Result<f64> {
    let z_dyn = dcp.encode_dyn(store, cond)?;
    let ep = env.run_episode(1, rng, |o| {
        let lat = dcp.encode_with(store, o, &z_dyn)?;
        Ok(dcp.policy_forward(store, &lat)?.mean)
    })?;
    Ok(ep.total_reward())
}
