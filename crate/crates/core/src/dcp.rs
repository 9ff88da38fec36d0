//! Dynamics-conditioned policy.
//!
//! `z = [f_φ(o), M_ζ(c)]` where `c` is the conditioning vector (normalised
//! dynamics, optionally followed by motor-noise weights). `g_θ(z)` gives a
//! diagonal Gaussian over actions, `value(z)` the state value, `g_inv` and
//! `f_rec` are the auxiliary inverse-dynamics and reconstruction heads.

use serde::{Deserialize, Serialize};

use crate::diffnum::{Activation, Mlp, MlpSpec, ParamStore, Tape, Tensor, Var};
use crate::domain::{DiagGaussian, SeededRng, LN_2PI};
use crate::error::{config_err, invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcpConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Width of `f_φ(o)`.
    pub obs_latent: usize,
    /// Width of `M_ζ(c)`.
    pub dyn_latent: usize,
    /// When false the conditioning input is replaced by zeros.
    pub use_eta_encoding: bool,
    pub w_inv: f64,
    pub w_rec: f64,
}

impl Default for DcpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            obs_latent: 32,
            dyn_latent: 16,
            use_eta_encoding: true,
            w_inv: 0.1,
            w_rec: 0.1,
        }
    }
}

impl DcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_latent == 0 || self.dyn_latent == 0 {
            return Err(config_err("latent widths must be >= 1"));
        }
        check_weights(self.w_inv, self.w_rec)
    }
}

fn check_weights(w_inv: f64, w_rec: f64) -> Result<()> {
    if !(w_inv >= 0.0 && w_rec >= 0.0) || !w_inv.is_finite() || !w_rec.is_finite() {
        return Err(invalid(format!("auxiliary weights must be finite and >= 0, got {w_inv}, {w_rec}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z_obs: Vec<f64>,
    pub z_dyn: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dcp {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub cond_dim: usize,
    pub config: DcpConfig,
    pub f_phi: Mlp,
    pub m_zeta: Mlp,
    pub g_theta: Mlp,
    pub value: Mlp,
    pub g_inv: Mlp,
    pub f_rec: Mlp,
}

/// Differentiable outputs for a batch of rows.
pub struct TapedPolicy {
    pub z_obs: Var,
    pub z: Var,
    pub mean: Var,
    pub std: Var,
    pub value: Var,
}

impl Dcp {
    pub fn new(obs_dim: usize, act_dim: usize, cond_dim: usize, config: DcpConfig) -> Result<Self> {
        config.validate()?;
        if obs_dim == 0 || act_dim == 0 || cond_dim == 0 {
            return Err(config_err("policy dimensions must be >= 1"));
        }
        let (h, act) = (&config.hidden, config.activation);
        let z = config.obs_latent + config.dyn_latent;
        Ok(Self {
            obs_dim,
            act_dim,
            cond_dim,
            f_phi: Mlp::new("f_phi", MlpSpec::new(obs_dim, h, config.obs_latent, act))?,
            m_zeta: Mlp::new("m_zeta", MlpSpec::new(cond_dim, h, config.dyn_latent, act))?,
            g_theta: Mlp::new("g_theta", MlpSpec::new(z, h, 2 * act_dim, act).with_softplus_tail(act_dim))?,
            value: Mlp::new("value", MlpSpec::new(z, h, 1, act))?,
            g_inv: Mlp::new("g_inv", MlpSpec::new(2 * z, h, act_dim, act))?,
            f_rec: Mlp::new("f_rec", MlpSpec::new(config.obs_latent, h, obs_dim, act))?,
            config,
        })
    }

    fn networks(&self) -> [&Mlp; 6] {
        [&self.f_phi, &self.m_zeta, &self.g_theta, &self.value, &self.g_inv, &self.f_rec]
    }

    pub fn init(&self, rng: &mut SeededRng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for n in self.networks() {
            n.init(&mut store, rng)?;
        }
        Ok(store)
    }

    pub fn init_zeros(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for n in self.networks() {
            n.init_zeros(&mut store)?;
        }
        Ok(store)
    }

    /// The conditioning input actually fed to `M_ζ`.
    pub fn conditioning_input(&self, cond: &[f64]) -> Result<Vec<f64>> {
        if cond.len() != self.cond_dim {
            return Err(Error::Config(format!(
                "conditioning vector has {} entries, policy expects {}",
                cond.len(),
                self.cond_dim
            )));
        }
        Ok(if self.config.use_eta_encoding { cond.to_vec() } else { vec![0.0; self.cond_dim] })
    }

    pub fn encode_dyn(&self, store: &ParamStore, cond: &[f64]) -> Result<Vec<f64>> {
        self.m_zeta.forward(store, &self.conditioning_input(cond)?)
    }

    pub fn encode_with(&self, store: &ParamStore, obs: &[f64], z_dyn: &[f64]) -> Result<LatentState> {
        let z_obs = self.f_phi.forward(store, obs)?;
        let mut z = z_obs.clone();
        z.extend_from_slice(z_dyn);
        Ok(LatentState { z_obs, z_dyn: z_dyn.to_vec(), z })
    }

    pub fn encode(&self, store: &ParamStore, obs: &[f64], cond: &[f64]) -> Result<LatentState> {
        let z_dyn = self.encode_dyn(store, cond)?;
        self.encode_with(store, obs, &z_dyn)
    }

    pub fn policy_forward(&self, store: &ParamStore, z: &LatentState) -> Result<DiagGaussian> {
        let out = self.g_theta.forward(store, &z.z)?;
        let (mean, std) = out.split_at(self.act_dim);
        DiagGaussian::new(mean.to_vec(), std.to_vec())
    }

    pub fn value_forward(&self, store: &ParamStore, z: &LatentState) -> Result<f64> {
        Ok(self.value.forward(store, &z.z)?[0])
    }

    pub fn inverse_dynamics_loss(
        &self,
        store: &ParamStore,
        z_t: &LatentState,
        z_next: &LatentState,
        action: &[f64],
    ) -> Result<f64> {
        let mut input = z_next.z.clone();
        input.extend_from_slice(&z_t.z);
        let pred = self.g_inv.forward(store, &input)?;
        Ok(pred.iter().zip(action).map(|(p, a)| (p - a) * (p - a)).sum())
    }

    pub fn reconstruction_loss(&self, store: &ParamStore, obs: &[f64]) -> Result<f64> {
        let z_obs = self.f_phi.forward(store, obs)?;
        let rec = self.f_rec.forward(store, &z_obs)?;
        Ok(rec.iter().zip(obs).map(|(r, o)| (r - o) * (r - o)).sum())
    }

    /// `w_inv·mean(L_inv) + w_rec·mean(L_rec)` over a batch of steps.
    pub fn aux_loss(&self, store: &ParamStore, batch: &AuxBatch, w_inv: f64, w_rec: f64) -> Result<f64> {
        check_weights(w_inv, w_rec)?;
        let n = batch.len();
        if n == 0 {
            return Ok(0.0);
        }
        let (mut inv, mut rec) = (0.0, 0.0);
        for i in 0..n {
            let zt = self.encode(store, batch.obs.row_slice(i), batch.cond.row_slice(i))?;
            let zn = self.encode(store, batch.next_obs.row_slice(i), batch.cond.row_slice(i))?;
            inv += self.inverse_dynamics_loss(store, &zt, &zn, batch.action.row_slice(i))?;
            rec += self.reconstruction_loss(store, batch.obs.row_slice(i))?;
        }
        Ok(w_inv * inv / n as f64 + w_rec * rec / n as f64)
    }

    /// Batched differentiable forward pass. `obs` is `n×obs_dim`, `cond`
    /// is `n×cond_dim` (already passed through [`Self::conditioning_input`]).
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, obs: Var, cond: Var) -> Result<TapedPolicy> {
        let z_obs = self.f_phi.forward_tape(tape, store, obs)?;
        let z_dyn = self.m_zeta.forward_tape(tape, store, cond)?;
        let z = tape.concat_cols(&[z_obs, z_dyn])?;
        let head = self.g_theta.forward_tape(tape, store, z)?;
        let mean = tape.slice_cols(head, 0, self.act_dim)?;
        let std = tape.slice_cols(head, self.act_dim, 2 * self.act_dim)?;
        let value = self.value.forward_tape(tape, store, z)?;
        Ok(TapedPolicy { z_obs, z, mean, std, value })
    }

    /// Per-row diagonal-Gaussian log density (`n×1`).
    pub fn log_prob_tape(&self, tape: &mut Tape, mean: Var, std: Var, actions: Var) -> Result<Var> {
        let diff = tape.sub(actions, mean)?;
        let zs = tape.div(diff, std)?;
        let sq = tape.square(zs);
        let quad = tape.sum_cols(sq);
        let quad = tape.scale(quad, -0.5);
        let ls = tape.ln(std);
        let ls = tape.sum_cols(ls);
        let lp = tape.sub(quad, ls)?;
        Ok(tape.offset(lp, -0.5 * self.act_dim as f64 * LN_2PI))
    }

    /// Per-row entropy (`n×1`).
    pub fn entropy_tape(&self, tape: &mut Tape, std: Var) -> Var {
        let ls = tape.ln(std);
        let s = tape.sum_cols(ls);
        tape.offset(s, 0.5 * self.act_dim as f64 * (1.0 + LN_2PI))
    }

    /// Mean inverse-dynamics and reconstruction losses on the tape, given
    /// the latent of the current rows.
    pub fn aux_losses_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        current: &TapedPolicy,
        next_obs: Var,
        cond: Var,
        obs: Var,
        action: Var,
    ) -> Result<(Var, Var)> {
        let z_next_obs = self.f_phi.forward_tape(tape, store, next_obs)?;
        let z_dyn = self.m_zeta.forward_tape(tape, store, cond)?;
        let z_next = tape.concat_cols(&[z_next_obs, z_dyn])?;
        let inv_in = tape.concat_cols(&[z_next, current.z])?;
        let pred = self.g_inv.forward_tape(tape, store, inv_in)?;
        let r = tape.sub(pred, action)?;
        let r = tape.square(r);
        let r = tape.sum_cols(r);
        let inv = tape.mean(r);
        let rec = self.f_rec.forward_tape(tape, store, current.z_obs)?;
        let e = tape.sub(rec, obs)?;
        let e = tape.square(e);
        let e = tape.sum_cols(e);
        let rec = tape.mean(e);
        Ok((inv, rec))
    }
}

/// Rows of consecutive-step data for the auxiliary losses.
#[derive(Clone, Debug)]
pub struct AuxBatch {
    pub obs: Tensor,
    pub next_obs: Tensor,
    pub cond: Tensor,
    pub action: Tensor,
}

impl AuxBatch {
    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `a = mean + std⊙ε` and returns it with its exact log density.
pub fn sample_action(dist: &DiagGaussian, rng: &mut SeededRng) -> (Vec<f64>, f64) {
    let a = dist.sample(rng);
    let lp = dist.log_prob(&a);
    (a, lp)
}

/// Conditioning vector: `scale·(values/base − 1)`, followed by motor weights
/// when present. A scale of `1/range_frac` maps the training interval onto
/// `[-1, 1]`.
pub fn conditioning(values: &[f64], base: &[f64], scale: f64, motor_weights: Option<&[f64]>) -> Vec<f64> {
    let mut c: Vec<f64> = values.iter().zip(base).map(|(v, b)| scale * (v / b - 1.0)).collect();
    if let Some(w) = motor_weights {
        c.extend_from_slice(w);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::STD_FLOOR;

    fn small() -> Dcp {
        let cfg = DcpConfig { hidden: vec![8], obs_latent: 4, dyn_latent: 3, ..DcpConfig::default() };
        Dcp::new(2, 1, 2, cfg).unwrap()
    }

    #[test]
    fn zero_networks_give_zero_latent_and_unit_ish_std() {
        let d = small();
        let s = d.init_zeros().unwrap();
        let z = d.encode(&s, &[0.3, -0.2], &[0.1, 0.05]).unwrap();
        assert!(z.z.iter().all(|&x| x == 0.0));
        assert_eq!(z.z.len(), 7);
        let dist = d.policy_forward(&s, &z).unwrap();
        assert_eq!(dist.mean, vec![0.0]);
        assert!((dist.std[0] - (2f64.ln() + STD_FLOOR)).abs() < 1e-15);
    }

    #[test]
    fn dynamics_only_affect_dynamics_latent() {
        let d = small();
        let s = d.init(&mut SeededRng::new(1, 1)).unwrap();
        let a = d.encode(&s, &[0.3, -0.2], &[0.1, 0.05]).unwrap();
        let b = d.encode(&s, &[0.3, -0.2], &[-0.2, 0.0]).unwrap();
        assert_eq!(a.z_obs, b.z_obs);
        assert_ne!(a.z_dyn, b.z_dyn);
    }

    #[test]
    fn disabled_encoding_ignores_dynamics() {
        let cfg = DcpConfig { use_eta_encoding: false, hidden: vec![8], ..DcpConfig::default() };
        let d = Dcp::new(2, 1, 2, cfg).unwrap();
        let s = d.init(&mut SeededRng::new(1, 1)).unwrap();
        assert_eq!(d.encode_dyn(&s, &[0.1, 0.2]).unwrap(), d.encode_dyn(&s, &[-0.3, 0.0]).unwrap());
    }

    #[test]
    fn aux_losses_closed_forms() {
        let d = small();
        let s = d.init_zeros().unwrap();
        let z = d.encode(&s, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(d.inverse_dynamics_loss(&s, &z, &z, &[2.0]).unwrap(), 4.0);
        assert_eq!(d.reconstruction_loss(&s, &[1.0, 1.0]).unwrap(), 2.0);
        let batch = AuxBatch {
            obs: Tensor::row(vec![1.0, 1.0]),
            next_obs: Tensor::row(vec![0.0, 1.0]),
            cond: Tensor::row(vec![0.0, 0.0]),
            action: Tensor::row(vec![2.0]),
        };
        assert_eq!(d.aux_loss(&s, &batch, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(d.aux_loss(&s, &batch, 1.0, 0.5).unwrap(), 4.0 + 1.0);
        assert!(d.aux_loss(&s, &batch, -1.0, 0.0).is_err());
    }

    #[test]
    fn taped_log_prob_matches_closed_form() {
        let d = small();
        let mut tape = Tape::new();
        let m = tape.input(Tensor::row(vec![0.0]));
        let sd = tape.input(Tensor::row(vec![1.0]));
        let a = tape.input(Tensor::row(vec![0.0]));
        let lp = d.log_prob_tape(&mut tape, m, sd, a).unwrap();
        assert!((tape.scalar(lp) + 0.918_938_533_204_672_7).abs() < 1e-15);
    }
}
