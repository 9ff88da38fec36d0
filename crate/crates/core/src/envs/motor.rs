//! State-dependent motor noise `a + K·ω·Φ_τ(o)` where `Φ_τ` is a fixed,
//! randomly weighted one-hidden-layer tanh network rebuilt from `tau_seed`.

use serde::{Deserialize, Serialize};

use super::dual::Scalar;
use crate::domain::SeededRng;
use crate::error::{invalid, Result};

pub const PHI_HIDDEN: usize = 16;

/// Weights of `Φ_τ`; a pure function of `(tau_seed, obs_dim, phi_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseFeatures {
    obs_dim: usize,
    phi_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
}

impl NoiseFeatures {
    pub fn build(tau_seed: u64, obs_dim: usize, phi_dim: usize) -> Self {
        let mut rng = SeededRng::new(tau_seed, 0);
        let lim1 = (6.0 / (obs_dim + PHI_HIDDEN) as f64).sqrt();
        let lim2 = (6.0 / (PHI_HIDDEN + phi_dim) as f64).sqrt();
        let w1 = (0..obs_dim * PHI_HIDDEN).map(|_| rng.uniform(-lim1, lim1)).collect();
        let b1 = (0..PHI_HIDDEN).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let w2 = (0..PHI_HIDDEN * phi_dim).map(|_| rng.uniform(-lim2, lim2)).collect();
        Self { obs_dim, phi_dim, w1, b1, w2 }
    }

    pub fn phi_dim(&self) -> usize {
        self.phi_dim
    }

    pub fn eval(&self, obs: &[f64]) -> Vec<f64> {
        let mut h = self.b1.clone();
        for (i, o) in obs.iter().enumerate().take(self.obs_dim) {
            for (j, hj) in h.iter_mut().enumerate() {
                *hj += o * self.w1[i * PHI_HIDDEN + j];
            }
        }
        let mut out = vec![0.0; self.phi_dim];
        for (j, hj) in h.iter().enumerate() {
            let t = hj.tanh();
            for (k, ok) in out.iter_mut().enumerate() {
                *ok += t * self.w2[j * self.phi_dim + k];
            }
        }
        out
    }
}

/// `a + W·phi` with `W` row-major `[act_dim × phi_dim]`.
pub fn perturb<S: Scalar>(weights: &[S], phi: &[f64], action: &[S]) -> Vec<S> {
    let pd = phi.len();
    action
        .iter()
        .enumerate()
        .map(|(r, &a)| {
            phi.iter().enumerate().fold(a, |acc, (c, &p)| acc + weights[r * pd + c].scale(p))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotorNoiseSpec {
    pub tau_seed: u64,
    pub phi_dim: usize,
    /// Row-major `[act_dim × phi_dim]`.
    pub omega: Vec<f64>,
    pub k: f64,
}

impl MotorNoiseSpec {
    pub fn new(tau_seed: u64, phi_dim: usize, omega: Vec<f64>, k: f64, act_dim: usize) -> Result<Self> {
        if phi_dim == 0 {
            return Err(invalid("motor noise feature dimension must be >= 1"));
        }
        if omega.len() != act_dim * phi_dim || omega.iter().any(|w| !w.is_finite()) {
            return Err(invalid(format!(
                "omega must hold {} finite values, got {}",
                act_dim * phi_dim,
                omega.len()
            )));
        }
        if !(k >= 0.0 && k.is_finite()) {
            return Err(invalid(format!("noise multiplier must be >= 0, got {k}")));
        }
        Ok(Self { tau_seed, phi_dim, omega, k })
    }

    /// `K·ω`, the weights that actually multiply `Φ_τ(o)`.
    pub fn effective_weights(&self) -> Vec<f64> {
        self.omega.iter().map(|w| self.k * w).collect()
    }

    pub fn features(&self, obs_dim: usize) -> NoiseFeatures {
        NoiseFeatures::build(self.tau_seed, obs_dim, self.phi_dim)
    }
}

/// How motor noise is generated for a population of environments: a shared
/// feature network and multiplier, with per-environment `ω` drawn uniformly
/// from `[-omega_range, omega_range]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotorSettings {
    pub tau_seed: u64,
    pub phi_dim: usize,
    pub k: f64,
    pub omega_range: f64,
}

impl Default for MotorSettings {
    fn default() -> Self {
        Self { tau_seed: 7, phi_dim: 4, k: 0.5, omega_range: 1.0 }
    }
}

impl MotorSettings {
    pub fn sample(&self, act_dim: usize, rng: &mut SeededRng) -> Result<MotorNoiseSpec> {
        let r = self.omega_range;
        if !(r >= 0.0 && r.is_finite()) {
            return Err(invalid(format!("omega_range must be finite and >= 0, got {r}")));
        }
        let omega = (0..act_dim * self.phi_dim)
            .map(|_| if r > 0.0 { rng.uniform(-r, r) } else { 0.0 })
            .collect();
        MotorNoiseSpec::new(self.tau_seed, self.phi_dim, omega, self.k, act_dim)
    }

    /// Number of motor weights per environment.
    pub fn weight_count(&self, act_dim: usize) -> usize {
        act_dim * self.phi_dim
    }
}

/// Returns `a + K·ω·Φ_τ(o)` (unclipped).
pub fn apply_motor_noise(motor: &MotorNoiseSpec, obs: &[f64], action: &[f64]) -> Vec<f64> {
    let phi = motor.features(obs.len()).eval(obs);
    perturb(&motor.effective_weights(), &phi, action)
}
