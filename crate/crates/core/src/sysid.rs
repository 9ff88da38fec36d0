//! Bayesian estimation of dynamics parameters from fixed-length chunks of
//! off-policy transitions.
//!
//! An elemental estimator maps one chunk to a diagonal Gaussian over the
//! (possibly motor-extended) parameter vector. Per-chunk Gaussians are
//! combined in precision space, removing the `k − 1` surplus copies of the
//! prior. Training minimises the negative ELBO
//! `(1/2v²)·E_ε[ΣΣ‖o' − F(o, a; η̂(ε))‖²] + KL(q ‖ prior)` with
//! `η̂(ε) = μ + σε`, differentiating `F` exactly through dual numbers.
//!
//! Estimation happens in per-dimension affine coordinates
//! `u = (η − centre)/scale`, so that all outputs are O(1); posteriors are
//! mapped back to physical units for reporting.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::diffnum::tape::softplus;
use crate::diffnum::{
    Activation, Gradients, Mlp, MlpSpec, Optimizer, OptimizerConfig, ParamStore, Tape, Tensor, Var,
    STD_FLOOR,
};
use crate::domain::{chunk_episode, streams, Chunk, DiagGaussian, Episode, SeededRng};
use crate::envs::{Family, NoiseFeatures};
use crate::error::{config_err, invalid, Error, Result};

/// Lower bound on aggregated precision.
pub const PRECISION_FLOOR: f64 = 1e-6;
/// Candidate dynamics are kept at or above this fraction of their base
/// value when evaluating `F`.
pub const MIN_DYNAMICS_FRAC: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysidConfig {
    pub chunk_len: usize,
    pub eps_samples: usize,
    /// Likelihood noise `v`; `None` uses the environment's process noise
    /// when positive, otherwise 0.05.
    pub noise_std: Option<f64>,
    /// Prior mean and std in estimation coordinates.
    pub prior_mean: f64,
    pub prior_std: f64,
    pub train_prior: bool,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub envs_per_step: usize,
    /// Upper bound on the number of chunks aggregated per training example;
    /// the actual count is drawn uniformly from `1..=max`.
    pub max_chunks: usize,
    pub hidden: Vec<usize>,
    pub embed: usize,
    /// Append pairwise products of the standardised per-step features.
    pub second_order_features: bool,
    pub max_grad_norm: f64,
}

impl Default for SysidConfig {
    fn default() -> Self {
        Self {
            chunk_len: 50,
            eps_samples: 4,
            noise_std: None,
            prior_mean: 0.0,
            prior_std: 1.0,
            train_prior: true,
            optimizer: OptimizerConfig::adam(3e-3),
            steps: 5000,
            envs_per_step: 4,
            max_chunks: 16,
            hidden: vec![64, 64],
            embed: 32,
            second_order_features: true,
            max_grad_norm: 10.0,
        }
    }
}

impl SysidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 || self.eps_samples == 0 || self.embed == 0 {
            return Err(config_err("chunk_len, eps_samples and embed must be >= 1"));
        }
        if self.envs_per_step == 0 || self.max_chunks == 0 {
            return Err(config_err("envs_per_step and max_chunks must be >= 1"));
        }
        if !(self.prior_std > 0.0) {
            return Err(config_err("prior_std must be > 0"));
        }
        if let Some(v) = self.noise_std {
            if !(v > 0.0) {
                return Err(config_err("likelihood noise_std must be > 0"));
            }
        }
        Ok(())
    }

    pub fn likelihood_std(&self, env_noise: f64) -> f64 {
        match self.noise_std {
            Some(v) => v,
            None if env_noise > 0.0 => env_noise,
            None => 0.05,
        }
    }
}

/// Prior `N(f0, g0²)` per dimension, in estimation coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub f0: Vec<f64>,
    pub g0: Vec<f64>,
}

impl PriorParams {
    pub fn new(f0: Vec<f64>, g0: Vec<f64>) -> Result<Self> {
        if f0.len() != g0.len() || g0.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(invalid("prior needs matching lengths and strictly positive g0"));
        }
        Ok(Self { f0, g0 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEstimate {
    pub posterior: DiagGaussian,
    pub k_used: usize,
    pub clamped_dims: Vec<usize>,
}

/// Combines `k` per-chunk Gaussians:
/// `σ⁻² = Σσᵢ⁻² − (k−1)g0⁻²` (floored), `μ = σ²(Σμᵢ/σᵢ² − (k−1)f0/g0²)`.
pub fn aggregate(elementals: &[DiagGaussian], prior: &PriorParams) -> Result<PosteriorEstimate> {
    let k = elementals.len();
    if k == 0 {
        return Err(Error::InsufficientData("aggregation needs at least one chunk".into()));
    }
    let m = prior.f0.len();
    if elementals.iter().any(|e| e.dim() != m) {
        return Err(Error::Shape("elemental and prior dimensions differ".into()));
    }
    // One chunk is its own posterior; skip the round trip through precision
    // space so the identity is exact.
    if k == 1 && elementals[0].std.iter().all(|s| 1.0 / (s * s) >= PRECISION_FLOOR) {
        return Ok(PosteriorEstimate { posterior: elementals[0].clone(), k_used: 1, clamped_dims: Vec::new() });
    }
    let surplus = (k - 1) as f64;
    let mut mean = Vec::with_capacity(m);
    let mut std = Vec::with_capacity(m);
    let mut clamped_dims = Vec::new();
    for j in 0..m {
        let g2 = prior.g0[j] * prior.g0[j];
        let (mut prec, mut weighted) = (0.0, 0.0);
        for e in elementals {
            let p = 1.0 / (e.std[j] * e.std[j]);
            prec += p;
            weighted += e.mean[j] * p;
        }
        prec -= surplus / g2;
        weighted -= surplus * prior.f0[j] / g2;
        if prec < PRECISION_FLOOR {
            prec = PRECISION_FLOOR;
            clamped_dims.push(j);
        }
        let var = 1.0 / prec;
        mean.push(var * weighted);
        std.push(var.sqrt());
    }
    Ok(PosteriorEstimate { posterior: DiagGaussian::new(mean, std)?, k_used: k, clamped_dims })
}

/// `μ + σ·ε`.
pub fn reparam_sample(posterior: &DiagGaussian, eps: &[f64]) -> Vec<f64> {
    posterior.transform(eps)
}

/// Exact `KL(N(μ, σ²) ‖ N(f0, g0²))` summed over dimensions.
pub fn kl_to_prior(posterior: &DiagGaussian, prior: &PriorParams) -> f64 {
    posterior
        .mean
        .iter()
        .zip(&posterior.std)
        .zip(prior.f0.iter().zip(&prior.g0))
        .map(|((m, s), (f, g))| ((m - f) * (m - f) + s * s) / (2.0 * g * g) + (g / s).ln() - 0.5)
        .sum()
}

/// Off-policy chunks from one environment plus its ground-truth parameters
/// (physical units; dynamics followed by motor weights `K·ω` in noise mode).
#[derive(Clone, Debug, PartialEq)]
pub struct EnvDataset {
    pub env_id: u64,
    pub truth: Vec<f64>,
    pub chunks: Vec<Chunk>,
}

/// Groups episodes by environment and chunks them. `motor_k` is the
/// multiplier used to turn recorded `ω` into effective weights.
pub fn datasets_from_episodes(episodes: &[Episode], chunk_len: usize, motor_k: Option<f64>) -> Result<Vec<EnvDataset>> {
    let mut by_env: BTreeMap<u64, EnvDataset> = BTreeMap::new();
    for ep in episodes {
        let mut truth = ep.dynamics.values().to_vec();
        if let Some(k) = motor_k {
            let omega = ep
                .omega
                .as_ref()
                .ok_or_else(|| config_err("noise-mode data must record omega for every episode"))?;
            truth.extend(omega.iter().map(|w| k * w));
        }
        let entry = by_env.entry(ep.env_id).or_insert_with(|| EnvDataset {
            env_id: ep.env_id,
            truth: truth.clone(),
            chunks: Vec::new(),
        });
        if entry.truth != truth {
            return Err(invalid(format!("episodes of env {} disagree on their parameters", ep.env_id)));
        }
        entry.chunks.extend(chunk_episode(ep, chunk_len)?);
    }
    Ok(by_env.into_values().collect())
}

/// Motor-noise extension of the estimated vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotorExtension {
    pub tau_seed: u64,
    pub phi_dim: usize,
    /// Half-width of the effective weights `K·ω` (scale of their coordinates).
    pub weight_scale: f64,
}

/// Everything except trainable weights: shapes, coordinates and feature
/// standardisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SysidModel {
    pub family: Family,
    pub dt: f64,
    pub base: Vec<f64>,
    pub centre: Vec<f64>,
    pub scale: Vec<f64>,
    pub motor: Option<MotorExtension>,
    pub config: SysidConfig,
    /// Likelihood noise used by the ELBO.
    pub noise_std: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub encoder: Mlp,
    pub head: Mlp,
}

pub const F0_NAME: &str = "prior.f0";
pub const G0_NAME: &str = "prior.g0_raw";

fn softplus_inverse(y: f64) -> f64 {
    // y = ln(1 + eˣ) ⇒ x = ln(eʸ − 1), computed stably for large y.
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl SysidModel {
    /// `range_frac` sets the coordinate scale of the dynamics dimensions.
    pub fn new(
        family: Family,
        dt: f64,
        base: Vec<f64>,
        range_frac: f64,
        motor: Option<MotorExtension>,
        env_noise: f64,
        config: SysidConfig,
    ) -> Result<Self> {
        config.validate()?;
        if base.len() != family.dyn_dim() {
            return Err(config_err("base dynamics do not match the family"));
        }
        let mut centre = base.clone();
        let mut scale: Vec<f64> = base.iter().map(|b| b * range_frac.max(0.01)).collect();
        if let Some(m) = &motor {
            let n = family.act_dim() * m.phi_dim;
            centre.extend(std::iter::repeat_n(0.0, n));
            let s = if m.weight_scale > 0.0 { m.weight_scale } else { 1.0 };
            scale.extend(std::iter::repeat_n(s, n));
        }
        let out_dim = centre.len();
        let raw = 2 * family.obs_dim() + family.act_dim();
        let feat = if config.second_order_features { raw + raw * (raw + 1) / 2 } else { raw };
        let encoder = Mlp::new("est.enc", MlpSpec::new(feat, &config.hidden, config.embed, Activation::Tanh))?;
        let head = Mlp::new(
            "est.head",
            MlpSpec::new(config.embed + feat, &config.hidden, 2 * out_dim, Activation::Tanh).with_softplus_tail(out_dim),
        )?;
        let noise_std = config.likelihood_std(env_noise);
        Ok(Self {
            family,
            dt,
            base,
            centre,
            scale,
            motor,
            config,
            noise_std,
            feature_mean: vec![0.0; raw],
            feature_std: vec![1.0; raw],
            encoder,
            head,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.centre.len()
    }

    pub fn raw_feature_dim(&self) -> usize {
        2 * self.family.obs_dim() + self.family.act_dim()
    }

    /// Sets feature standardisation from every transition in `datasets`.
    pub fn fit_normalizer(&mut self, datasets: &[EnvDataset]) {
        let n = self.raw_feature_dim();
        let (mut sum, mut sq, mut count) = (vec![0.0; n], vec![0.0; n], 0.0);
        for c in datasets.iter().flat_map(|d| &d.chunks) {
            for t in 0..c.len() {
                for (j, f) in raw_features(c, t).iter().enumerate() {
                    sum[j] += f;
                    sq[j] += f * f;
                }
                count += 1.0;
            }
        }
        if count == 0.0 {
            return;
        }
        for j in 0..n {
            let m = sum[j] / count;
            let var = (sq[j] / count - m * m).max(0.0);
            self.feature_mean[j] = m;
            self.feature_std[j] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        }
    }

    pub fn init(&self, rng: &mut SeededRng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, rng)?;
        self.head.init(&mut store, rng)?;
        // Start every elemental close to N(0, (prior_std/2)²) so that the
        // aggregated precision is positive for any k from the first step.
        let last = self.head.spec.num_layers() - 1;
        for w in store.get_mut(&self.head.weight_name(last))? {
            *w *= 0.01;
        }
        let m = self.out_dim();
        let raw = softplus_inverse(0.5 * self.config.prior_std - STD_FLOOR);
        store.get_mut(&self.head.bias_name(last))?[m..].fill(raw);
        self.insert_prior(&mut store)?;
        Ok(store)
    }

    pub fn init_zeros(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.encoder.init_zeros(&mut store)?;
        self.head.init_zeros(&mut store)?;
        self.insert_prior(&mut store)?;
        Ok(store)
    }

    fn insert_prior(&self, store: &mut ParamStore) -> Result<()> {
        let m = self.out_dim();
        store.insert(F0_NAME, vec![m], vec![self.config.prior_mean; m])?;
        let raw = softplus_inverse(self.config.prior_std - STD_FLOOR);
        store.insert(G0_NAME, vec![m], vec![raw; m])?;
        Ok(())
    }

    pub fn prior(&self, store: &ParamStore) -> Result<PriorParams> {
        let f0 = store.get(F0_NAME)?.to_vec();
        let g0 = store.get(G0_NAME)?.iter().map(|r| softplus(*r) + STD_FLOOR).collect();
        PriorParams::new(f0, g0)
    }

    /// Standardised per-step features of a chunk (`T × feature_dim`).
    pub fn chunk_features(&self, chunk: &Chunk) -> Result<Tensor> {
        self.check_chunk(chunk)?;
        let n = self.raw_feature_dim();
        let width = self.encoder.spec.input_dim();
        let mut data = Vec::with_capacity(chunk.len() * width);
        for t in 0..chunk.len() {
            let raw = raw_features(chunk, t);
            let z: Vec<f64> = (0..n).map(|j| (raw[j] - self.feature_mean[j]) / self.feature_std[j]).collect();
            data.extend_from_slice(&z);
            if self.config.second_order_features {
                for i in 0..n {
                    for j in i..n {
                        data.push(z[i] * z[j]);
                    }
                }
            }
        }
        Tensor::new(chunk.len(), width, data)
    }

    fn check_chunk(&self, chunk: &Chunk) -> Result<()> {
        if chunk.len() != self.config.chunk_len {
            return Err(Error::Config(format!(
                "chunk has {} steps, estimator expects {}",
                chunk.len(),
                self.config.chunk_len
            )));
        }
        if chunk.obs_dim() != self.family.obs_dim() || chunk.act_dim() != self.family.act_dim() {
            return Err(Error::Config("chunk dimensions do not match the environment family".into()));
        }
        Ok(())
    }

    /// Per-chunk `(μᵢ, σᵢ)` rows on the tape for stacked chunk features.
    fn elementals_tape(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<(Var, Var)> {
        let h = self.encoder.forward_tape(tape, store, features)?;
        let pooled = tape.segment_mean(h, self.config.chunk_len)?;
        let stats = tape.segment_mean(features, self.config.chunk_len)?;
        let joined = tape.concat_cols(&[pooled, stats])?;
        let out = self.head.forward_tape(tape, store, joined)?;
        let m = self.out_dim();
        Ok((tape.slice_cols(out, 0, m)?, tape.slice_cols(out, m, 2 * m)?))
    }

    /// Elemental posterior in estimation coordinates.
    pub fn elemental_posterior(&self, store: &ParamStore, chunk: &Chunk) -> Result<DiagGaussian> {
        Ok(self.elementals(store, std::slice::from_ref(chunk))?.remove(0))
    }

    pub fn elementals(&self, store: &ParamStore, chunks: &[Chunk]) -> Result<Vec<DiagGaussian>> {
        let feats = chunks.iter().map(|c| self.chunk_features(c)).collect::<Result<Vec<_>>>()?;
        self.elementals_from_features(store, &feats)
    }

    fn elementals_from_features(&self, store: &ParamStore, feats: &[Tensor]) -> Result<Vec<DiagGaussian>> {
        let mut data = Vec::new();
        for f in feats {
            data.extend_from_slice(f.data());
        }
        let x = Tensor::new(feats.len() * self.config.chunk_len, self.encoder.spec.input_dim(), data)?;
        let h = self.encoder.forward_batch(store, &x)?;
        let pooled = segment_mean(&h, self.config.chunk_len)?;
        let stats = segment_mean(&x, self.config.chunk_len)?;
        let out = self.head.forward_batch(store, &concat_cols(&pooled, &stats)?)?;
        let m = self.out_dim();
        (0..out.rows())
            .map(|r| {
                let row = out.row_slice(r);
                DiagGaussian::new(row[..m].to_vec(), row[m..].to_vec())
            })
            .collect()
    }

    /// Posterior in estimation coordinates from already-chunked data.
    pub fn posterior_coords(&self, store: &ParamStore, chunks: &[Chunk]) -> Result<PosteriorEstimate> {
        if chunks.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no complete chunk of {} steps; collect longer or more episodes",
                self.config.chunk_len
            )));
        }
        aggregate(&self.elementals(store, chunks)?, &self.prior(store)?)
    }

    pub fn to_physical(&self, q: &DiagGaussian) -> Result<DiagGaussian> {
        let mean = q.mean.iter().zip(&self.centre).zip(&self.scale).map(|((u, c), s)| c + s * u).collect();
        let std = q.std.iter().zip(&self.scale).map(|(sd, s)| sd * s).collect();
        DiagGaussian::new(mean, std)
    }

    pub fn to_coords(&self, physical: &[f64]) -> Vec<f64> {
        physical.iter().zip(&self.centre).zip(&self.scale).map(|((p, c), s)| (p - c) / s).collect()
    }

    /// Chunks every episode and returns the aggregated posterior in
    /// physical units.
    pub fn estimate(&self, store: &ParamStore, episodes: &[Episode]) -> Result<PosteriorEstimate> {
        let mut chunks = Vec::new();
        for ep in episodes {
            chunks.extend(chunk_episode(ep, self.config.chunk_len)?);
        }
        let est = self.posterior_coords(store, &chunks)?;
        Ok(PosteriorEstimate { posterior: self.to_physical(&est.posterior)?, ..est })
    }

    /// Sum over chunks and steps of `‖o' − F(o, a; η)‖²` and its gradient
    /// with respect to the estimation coordinates `u` of `η`.
    pub fn reconstruction(
        &self,
        features: Option<&NoiseFeatures>,
        chunks: &[&Chunk],
        u: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let m = self.out_dim();
        let d = self.family.dyn_dim();
        let mut params: Vec<f64> = u.iter().zip(&self.centre).zip(&self.scale).map(|((u, c), s)| c + s * u).collect();
        let mut live = vec![1.0; m];
        for j in 0..d {
            let lo = MIN_DYNAMICS_FRAC * self.base[j];
            if params[j] < lo {
                params[j] = lo;
                live[j] = 0.0;
            }
        }
        let (mut total, mut grad) = (0.0, vec![0.0; m]);
        for c in chunks {
            for t in 0..c.len() {
                let (pred, jac) = self.family.predict_jet(self.dt, &params, features, c.obs(t), c.action(t))?;
                for (i, (p, y)) in pred.iter().zip(&c.y[t]).enumerate() {
                    let r = y - p;
                    total += r * r;
                    for j in 0..m {
                        grad[j] -= 2.0 * r * jac[i * m + j];
                    }
                }
            }
        }
        for j in 0..m {
            grad[j] *= self.scale[j] * live[j];
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss("reconstruction error is not finite".into()));
        }
        Ok((total, grad))
    }

    pub fn noise_features(&self) -> Option<NoiseFeatures> {
        self.motor.as_ref().map(|m| NoiseFeatures::build(m.tau_seed, self.family.obs_dim(), m.phi_dim))
    }

    /// Negative ELBO of one environment's chunks and its gradient. `eps`
    /// holds one standard-normal vector per Monte-Carlo sample.
    pub fn elbo_loss(
        &self,
        store: &ParamStore,
        chunks: &[&Chunk],
        eps: &[Vec<f64>],
    ) -> Result<(ElboReport, Gradients)> {
        let feats = chunks.iter().map(|c| self.chunk_features(c)).collect::<Result<Vec<_>>>()?;
        let features = self.noise_features();
        self.elbo_from_features(store, chunks, &feats, eps, features.as_ref())
    }

    fn elbo_from_features(
        &self,
        store: &ParamStore,
        chunks: &[&Chunk],
        feats: &[Tensor],
        eps: &[Vec<f64>],
        features: Option<&NoiseFeatures>,
    ) -> Result<(ElboReport, Gradients)> {
        let k = chunks.len();
        if k == 0 {
            return Err(Error::InsufficientData("ELBO needs at least one chunk".into()));
        }
        if chunks.iter().any(|c| c.env_id != chunks[0].env_id) {
            return Err(invalid("ELBO chunks must all come from one environment"));
        }
        if eps.is_empty() {
            return Err(config_err("at least one Monte-Carlo sample is required"));
        }
        let m = self.out_dim();
        let mut data = Vec::new();
        for f in feats {
            data.extend_from_slice(f.data());
        }
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(k * self.config.chunk_len, self.encoder.spec.input_dim(), data)?);
        let (mu_i, sd_i) = self.elementals_tape(&mut tape, store, x)?;

        let f0 = tape.param(store, F0_NAME)?;
        let g_raw = tape.param(store, G0_NAME)?;
        let g0 = tape.softplus(g_raw);
        let g0 = tape.offset(g0, STD_FLOOR);
        let prior_prec = {
            let g2 = tape.square(g0);
            tape.recip(g2)
        };
        let (mu, var) = aggregate_tape(&mut tape, mu_i, sd_i, f0, prior_prec, k)?;
        let sd = tape.sqrt(var);

        // KL(q ‖ p) = Σ ((μ−f0)² + σ²)·p/2 + ln g0 − ½ln σ² − ½
        let diff = tape.sub(mu, f0)?;
        let d2 = tape.square(diff);
        let num = tape.add(d2, var)?;
        let t1 = tape.mul(num, prior_prec)?;
        let t1 = tape.scale(t1, 0.5);
        let lg = tape.ln(g0);
        let lv = tape.ln(var);
        let lv = tape.scale(lv, -0.5);
        let kl = tape.add(t1, lg)?;
        let kl = tape.add(kl, lv)?;
        let kl = tape.sum(kl);
        let kl = tape.offset(kl, -0.5 * m as f64);

        let coef = 1.0 / (2.0 * self.noise_std * self.noise_std * eps.len() as f64);
        let mut recon_sum = 0.0;
        let mut loss = kl;
        for e in eps {
            if e.len() != m {
                return Err(Error::Shape(format!("epsilon has {} entries, expected {m}", e.len())));
            }
            let ev = tape.input(Tensor::row(e.clone()));
            let noise = tape.mul(sd, ev)?;
            let u = tape.add(mu, noise)?;
            let (r, g) = self.reconstruction(features, chunks, tape.value(u).data())?;
            recon_sum += r;
            let rv = tape.external(u, Tensor::scalar(r), g)?;
            let rv = tape.scale(rv, coef);
            loss = tape.add(loss, rv)?;
        }
        let report = ElboReport {
            loss: tape.scalar(loss),
            kl: tape.scalar(kl),
            reconstruction: recon_sum / eps.len() as f64,
            k,
        };
        if !report.loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!("{report:?}")));
        }
        let mut grads = tape.grad(loss, store)?;
        if !self.config.train_prior {
            grads.zero(store.id(F0_NAME)?);
            grads.zero(store.id(G0_NAME)?);
        }
        Ok((report, grads))
    }
}

/// Aggregation on the tape; returns `(μ, σ²)` as `1×m` rows. The precision
/// floor is a clamp, so floored dimensions pass no gradient to the precision.
fn aggregate_tape(
    tape: &mut Tape,
    mu_i: Var,
    sd_i: Var,
    f0: Var,
    prior_prec: Var,
    k: usize,
) -> Result<(Var, Var)> {
    let surplus = (k - 1) as f64;
    let v = tape.square(sd_i);
    let p = tape.recip(v);
    let psum = tape.sum_rows(p);
    let pp = tape.scale(prior_prec, surplus);
    let prec = tape.sub(psum, pp)?;
    let prec = tape.clamp(prec, PRECISION_FLOOR, f64::INFINITY);
    let var = tape.recip(prec);
    let wm = tape.mul(mu_i, p)?;
    let wsum = tape.sum_rows(wm);
    let fp = tape.mul(f0, prior_prec)?;
    let fp = tape.scale(fp, surplus);
    let w = tape.sub(wsum, fp)?;
    let mu = tape.mul(var, w)?;
    Ok((mu, var))
}

fn segment_mean(t: &Tensor, seg: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.input(t.clone());
    let y = tape.segment_mean(x, seg)?;
    Ok(tape.value(y).clone())
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for r in 0..a.rows() {
        data.extend_from_slice(a.row_slice(r));
        data.extend_from_slice(b.row_slice(r));
    }
    Tensor::new(a.rows(), a.cols() + b.cols(), data)
}

/// `[o_t, a_t, o_{t+1} − o_t]`.
fn raw_features(c: &Chunk, t: usize) -> Vec<f64> {
    let o = c.obs(t);
    let mut f = c.x[t].clone();
    f.extend(c.y[t].iter().zip(o).map(|(y, x)| y - x));
    f
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub loss: f64,
    pub kl: f64,
    pub reconstruction: f64,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SysidCurveRow {
    pub step: usize,
    pub loss: f64,
    pub kl: f64,
    pub reconstruction: f64,
}

pub struct SysidTrainOutput {
    pub params: ParamStore,
    pub curve: Vec<SysidCurveRow>,
}

/// Minimises the negative ELBO over randomly chosen environments and chunk
/// subsets. Datasets without chunks are skipped.
pub fn train_sysid(
    model: &SysidModel,
    mut params: ParamStore,
    datasets: &[EnvDataset],
    seed: u64,
) -> Result<SysidTrainOutput> {
    let cfg = &model.config;
    let usable: Vec<&EnvDataset> = datasets
        .iter()
        .filter(|d| {
            if d.chunks.is_empty() {
                warn!("environment {} has no complete chunk; skipped", d.env_id);
            }
            !d.chunks.is_empty()
        })
        .collect();
    if usable.is_empty() && cfg.steps > 0 {
        return Err(Error::InsufficientData("no environment has a complete chunk".into()));
    }
    let features = model.noise_features();
    let feats: Vec<Vec<Tensor>> = usable
        .iter()
        .map(|d| d.chunks.iter().map(|c| model.chunk_features(c)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut opt = Optimizer::new(cfg.optimizer, &params);
    let mut curve = Vec::with_capacity(cfg.steps);
    let m = model.out_dim();
    for step in 0..cfg.steps {
        let mut rng = SeededRng::stream(seed, streams::SYSID_TRAIN, step as u64);
        let mut total: Option<Gradients> = None;
        let mut row = SysidCurveRow { step, loss: 0.0, kl: 0.0, reconstruction: 0.0 };
        for _ in 0..cfg.envs_per_step {
            let e = rng.below(usable.len());
            let ds = usable[e];
            let n = ds.chunks.len();
            let k = 1 + rng.below(cfg.max_chunks.min(n));
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            order.truncate(k);
            let chunks: Vec<&Chunk> = order.iter().map(|&i| &ds.chunks[i]).collect();
            let fs: Vec<Tensor> = order.iter().map(|&i| feats[e][i].clone()).collect();
            let eps: Vec<Vec<f64>> = (0..cfg.eps_samples).map(|_| (0..m).map(|_| rng.normal()).collect()).collect();
            let (rep, g) = model.elbo_from_features(&params, &chunks, &fs, &eps, features.as_ref())?;
            // Per-transition scale keeps step sizes comparable across k.
            let norm = 1.0 / (k * cfg.chunk_len) as f64;
            row.loss += rep.loss * norm;
            row.kl += rep.kl;
            row.reconstruction += rep.reconstruction * norm;
            let mut g = g;
            g.scale(norm);
            match &mut total {
                Some(t) => t.add(&g),
                None => total = Some(g),
            }
        }
        let inv = 1.0 / cfg.envs_per_step as f64;
        row.loss *= inv;
        row.kl *= inv;
        row.reconstruction *= inv;
        if let Some(mut g) = total {
            g.scale(inv);
            if cfg.max_grad_norm > 0.0 {
                g.clip_global_norm(cfg.max_grad_norm);
            }
            opt.step(&mut params, &g)?;
        }
        if step % 100 == 0 || step + 1 == cfg.steps {
            info!("sysid step {step}: loss/transition {:.4}, kl {:.3}", row.loss, row.kl);
        }
        curve.push(row);
    }
    Ok(SysidTrainOutput { params, curve })
}

/// Writes `sysid.json` (model description) and `sysid.*` weights.
pub fn save_sysid(dir: &Path, model: &SysidModel, params: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("sysid.json"), serde_json::to_vec_pretty(model)?)?;
    params.save(dir, "sysid")
}

pub fn load_sysid(dir: &Path) -> Result<(SysidModel, ParamStore)> {
    let model: SysidModel = serde_json::from_slice(&std::fs::read(dir.join("sysid.json"))?)?;
    let params = ParamStore::load(dir, "sysid")?;
    Ok((model, params))
}

/// `posterior.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorFile {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub k_used: usize,
    pub clamped_dims: Vec<usize>,
}

impl From<&PosteriorEstimate> for PosteriorFile {
    fn from(p: &PosteriorEstimate) -> Self {
        Self {
            mean: p.posterior.mean.clone(),
            std: p.posterior.std.clone(),
            k_used: p.k_used,
            clamped_dims: p.clamped_dims.clone(),
        }
    }
}

/// Exact posterior of the gain `η` of `o' = η·o + a + N(0, v²)` under the
/// prior `N(f0, g0²)` from the given chunks.
pub fn linear_gaussian_posterior(chunks: &[&Chunk], f0: f64, g0: f64, v: f64) -> DiagGaussian {
    let mut prec = 1.0 / (g0 * g0);
    let mut lin = f0 / (g0 * g0);
    for c in chunks {
        for t in 0..c.len() {
            let o = c.obs(t)[0];
            let target = c.y[t][0] - c.action(t)[0];
            prec += o * o / (v * v);
            lin += o * target / (v * v);
        }
    }
    DiagGaussian { mean: vec![lin / prec], std: vec![prec.recip().sqrt()] }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(m: f64, s: f64) -> DiagGaussian {
        DiagGaussian::new(vec![m], vec![s]).unwrap()
    }

    #[test]
    fn single_elemental_is_returned_unchanged() {
        let prior = PriorParams::new(vec![0.3], vec![2.0]).unwrap();
        let e = g(1.25, 0.4);
        let p = aggregate(std::slice::from_ref(&e), &prior).unwrap();
        assert_eq!(p.posterior, e);
        assert_eq!(p.k_used, 1);
        assert!(p.clamped_dims.is_empty());
    }

    #[test]
    fn two_prior_copies_give_the_prior() {
        let prior = PriorParams::new(vec![0.3], vec![2.0]).unwrap();
        let p = aggregate(&[g(0.3, 2.0), g(0.3, 2.0)], &prior).unwrap();
        assert!((p.posterior.mean[0] - 0.3).abs() < 1e-12);
        assert!((p.posterior.std[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn wide_elementals_are_floored_and_reported() {
        let prior = PriorParams::new(vec![0.0], vec![1.0]).unwrap();
        let p = aggregate(&[g(0.0, 3.0), g(0.0, 3.0), g(0.0, 3.0)], &prior).unwrap();
        assert_eq!(p.clamped_dims, vec![0]);
        assert!((p.posterior.std[0] - PRECISION_FLOOR.powf(-0.5)).abs() < 1e-6);
    }

    #[test]
    fn empty_aggregation_is_an_error() {
        let prior = PriorParams::new(vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(aggregate(&[], &prior), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn kl_closed_forms() {
        let prior = PriorParams::new(vec![0.5], vec![1.0]).unwrap();
        assert!(kl_to_prior(&g(0.5, 1.0), &prior).abs() < 1e-15);
        assert!((kl_to_prior(&g(1.5, 1.0), &prior) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reparam_closed_forms() {
        assert_eq!(reparam_sample(&g(0.7, 3.0), &[0.0]), vec![0.7]);
        assert_eq!(reparam_sample(&g(0.0, 2.0), &[1.0]), vec![2.0]);
    }
}
