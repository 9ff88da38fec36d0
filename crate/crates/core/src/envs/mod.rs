//! Analytic, parameter-conditioned environments.
//!
//! Families are integrated with semi-implicit Euler, except the pendulum,
//! which uses a kick-drift-kick step to keep its energy. The deterministic
//! transition `F(o, a; η)` is written once over [`Scalar`] so the same code
//! produces values (`f64`) and exact Jacobians ([`Dual`]). Process noise
//! `N(0, v²)` is added to each physical state coordinate; for the families
//! whose observation carries `(cos θ, sin θ)` the angle is perturbed before
//! the observation is formed, which keeps the pair on the unit circle.

pub mod dual;
pub mod motor;

use serde::{Deserialize, Serialize};

pub use dual::{Dual, Scalar, MAX_TANGENTS};
pub use motor::{apply_motor_noise, perturb, MotorNoiseSpec, MotorSettings, NoiseFeatures};

use crate::domain::{sample_dynamics, DynamicsVector, Episode, SeededRng, Transition};
use crate::error::{invalid, Error, Result};

pub const POINT_MASS_GOAL: f64 = 1.0;
pub const PENDULUM_MAX_TORQUE: f64 = 3.0;
pub const CART_POLE_FORCE: f64 = 10.0;
pub const CART_POLE_ANGLE_LIMIT: f64 = 0.4;
pub const CART_POLE_POSITION_LIMIT: f64 = 2.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[serde(rename = "point_mass_1d")]
    PointMass1d,
    Pendulum,
    CartPole,
    LinearGaussian,
}

impl Family {
    pub const ALL: [Family; 4] =
        [Family::PointMass1d, Family::Pendulum, Family::CartPole, Family::LinearGaussian];

    pub fn name(self) -> &'static str {
        match self {
            Family::PointMass1d => "point_mass_1d",
            Family::Pendulum => "pendulum",
            Family::CartPole => "cart_pole",
            Family::LinearGaussian => "linear_gaussian",
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            Family::PointMass1d => 2,
            Family::Pendulum => 3,
            Family::CartPole => 5,
            Family::LinearGaussian => 1,
        }
    }

    pub fn act_dim(self) -> usize {
        1
    }

    /// Number of physical state coordinates (angles unwrapped from their
    /// cosine/sine pair).
    pub fn phys_dim(self) -> usize {
        match self {
            Family::PointMass1d => 2,
            Family::Pendulum => 2,
            Family::CartPole => 4,
            Family::LinearGaussian => 1,
        }
    }

    pub fn dyn_dim(self) -> usize {
        self.base_dynamics().len()
    }

    pub fn dynamics_names(self) -> &'static [&'static str] {
        match self {
            Family::PointMass1d => &["mass", "friction"],
            Family::Pendulum => &["mass", "length", "gravity", "damping"],
            Family::CartPole => &["cart_mass", "pole_mass", "pole_length", "gravity", "joint_stiffness"],
            Family::LinearGaussian => &["gain"],
        }
    }

    pub fn base_dynamics(self) -> Vec<f64> {
        match self {
            Family::PointMass1d => vec![1.0, 1.0],
            Family::Pendulum => vec![1.0, 1.0, 9.8, 0.1],
            Family::CartPole => vec![1.0, 0.1, 1.0, 9.8, 0.05],
            Family::LinearGaussian => vec![0.7],
        }
    }

    /// Symmetric action box `[-bound, bound]` per dimension.
    pub fn action_bound(self) -> f64 {
        match self {
            Family::Pendulum => PENDULUM_MAX_TORQUE,
            _ => 1.0,
        }
    }

    pub fn reward_upper_bound(self) -> f64 {
        match self {
            Family::CartPole => 1.0,
            _ => 0.0,
        }
    }

    /// Centre and half-widths of the initial-state box in physical coordinates.
    pub fn initial_box(self) -> (Vec<f64>, Vec<f64>) {
        use std::f64::consts::PI;
        match self {
            Family::PointMass1d => (vec![0.0, 0.0], vec![0.1, 0.1]),
            Family::Pendulum => (vec![PI, 0.0], vec![0.2, 0.2]),
            Family::CartPole => (vec![0.0, 0.0, PI, 0.0], vec![0.05, 0.05, 0.05, 0.05]),
            Family::LinearGaussian => (vec![1.0], vec![0.5]),
        }
    }

    pub fn clip_action(self, a: &[f64]) -> Vec<f64> {
        let b = self.action_bound();
        a.iter().map(|x| x.clamp(-b, b)).collect()
    }

    /// Physical state from an observation.
    pub fn obs_to_phys(self, obs: &[f64]) -> Vec<f64> {
        match self {
            Family::Pendulum => vec![obs[1].atan2(obs[0]), obs[2]],
            Family::CartPole => vec![obs[0], obs[1], obs[3].atan2(obs[2]), obs[4]],
            _ => obs.to_vec(),
        }
    }

    pub fn phys_to_obs<S: Scalar>(self, x: &[S]) -> Vec<S> {
        match self {
            Family::Pendulum => vec![x[0].cos(), x[0].sin(), x[1]],
            Family::CartPole => vec![x[0], x[1], x[2].cos(), x[2].sin(), x[3]],
            _ => x.to_vec(),
        }
    }

    /// One integration step in physical coordinates. `u` must already lie
    /// inside the action box.
    pub fn integrate<S: Scalar>(self, dt: f64, eta: &[S], x: &[f64], u: &[S]) -> Vec<S> {
        let c = S::cst;
        match self {
            Family::PointMass1d => {
                let (m, fr) = (eta[0], eta[1]);
                let v = c(x[1]);
                let v_next = v + (u[0] / m - fr * v).scale(dt);
                let p_next = c(x[0]) + v_next.scale(dt);
                vec![p_next, v_next]
            }
            Family::Pendulum => {
                let (m, l, g, b) = (eta[0], eta[1], eta[2], eta[3]);
                // Kick-drift-kick: second order, so energy stays within a
                // fraction of a percent where a plain Euler step oscillates.
                let inertia = m * l * l;
                let acc = |th: S, w: S| (u[0] - b * w - m * g * l * th.sin()) / inertia;
                let th = c(x[0]);
                let w_half = c(x[1]) + acc(th, c(x[1])).scale(0.5 * dt);
                let th_next = th + w_half.scale(dt);
                let w_next = w_half + acc(th_next, w_half).scale(0.5 * dt);
                vec![th_next, w_next]
            }
            Family::CartPole => {
                // Angle measured from hanging down; upright is θ = π.
                let (mc, mp, len, g, ks) = (eta[0], eta[1], eta[2], eta[3], eta[4]);
                let half = len.scale(0.5);
                let total = mc + mp;
                let phi = c(x[2] - std::f64::consts::PI);
                let phid = c(x[3]);
                let (sp, cp) = (phi.sin(), phi.cos());
                let force = u[0].scale(CART_POLE_FORCE);
                let temp = (force + mp * half * phid * phid * sp) / total;
                let phidd = (g * sp - cp * temp - ks * sp / (mp * half))
                    / (half * (c(4.0 / 3.0) - mp * cp * cp / total));
                let xdd = temp - mp * half * phidd * cp / total;
                let xd_next = c(x[1]) + xdd.scale(dt);
                let phid_next = phid + phidd.scale(dt);
                vec![c(x[0]) + xd_next.scale(dt), xd_next, c(x[2]) + phid_next.scale(dt), phid_next]
            }
            Family::LinearGaussian => vec![eta[0].scale(x[0]) + u[0]],
        }
    }

    /// `F(o, a; η)` with optional motor weights `W` (`[act_dim × phi_dim]`)
    /// applied to precomputed features `phi = Φ_τ(o)` before clipping.
    pub fn predict<S: Scalar>(
        self,
        dt: f64,
        eta: &[S],
        motor: Option<(&[S], &[f64])>,
        obs: &[f64],
        action: &[f64],
    ) -> Vec<S> {
        let a: Vec<S> = action.iter().map(|&x| S::cst(x)).collect();
        let a = match motor {
            Some((w, phi)) => perturb(w, phi, &a),
            None => a,
        };
        let b = self.action_bound();
        let u: Vec<S> = a.into_iter().map(|x| x.clip(-b, b)).collect();
        let x = self.obs_to_phys(obs);
        self.phys_to_obs(&self.integrate(dt, eta, &x, &u))
    }

    /// Value and Jacobian of `F` with respect to `params = η ++ W`, where the
    /// motor weights are present only if `features` is given.
    /// Jacobian is row-major `[obs_dim × params.len()]`.
    pub fn predict_jet(
        self,
        dt: f64,
        params: &[f64],
        features: Option<&NoiseFeatures>,
        obs: &[f64],
        action: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = params.len();
        if n > MAX_TANGENTS {
            return Err(invalid(format!("{n} differentiated parameters exceed {MAX_TANGENTS}")));
        }
        let p: Vec<Dual> = params.iter().enumerate().map(|(i, &v)| Dual::var(v, i)).collect();
        let d = self.dyn_dim();
        let phi;
        let motor = match features {
            Some(f) => {
                phi = f.eval(obs);
                Some((&p[d..], phi.as_slice()))
            }
            None => None,
        };
        let out = self.predict(dt, &p[..d], motor, obs, action);
        let value = out.iter().map(|x| x.v).collect();
        let mut jac = Vec::with_capacity(out.len() * n);
        for x in &out {
            jac.extend_from_slice(&x.d[..n]);
        }
        Ok((value, jac))
    }

    /// Reward of taking (clipped) action `a` in observation `obs`.
    pub fn reward(self, obs: &[f64], a: &[f64]) -> f64 {
        let a = self.clip_action(a);
        let a2: f64 = a.iter().map(|x| x * x).sum();
        match self {
            Family::PointMass1d => -(obs[0] - POINT_MASS_GOAL).abs() - 0.01 * a2,
            Family::Pendulum => {
                let off = upright_offset(obs[0], obs[1]);
                -off * off - 0.1 * obs[2] * obs[2] - 0.001 * a2
            }
            Family::CartPole => {
                let off = upright_offset(obs[2], obs[3]);
                let alive = off.abs() < CART_POLE_ANGLE_LIMIT && obs[0].abs() < CART_POLE_POSITION_LIMIT;
                f64::from(u8::from(alive)) - 0.01 * a2
            }
            Family::LinearGaussian => -obs[0] * obs[0] - 0.01 * a2,
        }
    }
}

/// Signed angle from upright given `(cos θ, sin θ)` with θ measured from
/// hanging down; lies in `(-π, π]`.
pub fn upright_offset(cos_th: f64, sin_th: f64) -> f64 {
    (-sin_th).atan2(-cos_th)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub family: Family,
    pub dynamics: DynamicsVector,
    pub noise_std: f64,
    pub motor: Option<MotorNoiseSpec>,
    pub dt: f64,
    pub horizon: usize,
    /// Scale of the initial-state box; 0 always starts at the nominal state.
    pub init_spread: f64,
}

impl EnvSpec {
    pub fn new(family: Family, dynamics: DynamicsVector) -> Result<Self> {
        let spec = Self {
            family,
            dynamics,
            noise_std: 0.0,
            motor: None,
            dt: 0.05,
            horizon: 200,
            init_spread: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn nominal(family: Family) -> Self {
        let dynamics = DynamicsVector::at_base(family.base_dynamics(), 0.0).expect("positive base");
        Self::new(family, dynamics).expect("nominal spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dynamics.dim() != self.family.dyn_dim() {
            return Err(invalid(format!(
                "{} expects {} dynamics parameters, got {}",
                self.family.name(),
                self.family.dyn_dim(),
                self.dynamics.dim()
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid("noise_std must be finite and >= 0"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt must be positive"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon must be >= 1"));
        }
        if !(self.init_spread >= 0.0 && self.init_spread.is_finite()) {
            return Err(invalid("init_spread must be finite and >= 0"));
        }
        if let Some(m) = &self.motor {
            MotorNoiseSpec::new(m.tau_seed, m.phi_dim, m.omega.clone(), m.k, self.family.act_dim())?;
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.family.obs_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.family.act_dim()
    }
}

fn check_finite(family: Family, obs: &[f64], a: &[f64], next: &[f64]) -> Result<()> {
    if next.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::EnvFault(format!(
            "{} produced non-finite state {next:?} from obs {obs:?} with action {a:?}",
            family.name()
        )))
    }
}

fn check_inputs(spec: &EnvSpec, s: &[f64], a: &[f64]) -> Result<()> {
    if s.len() != spec.obs_dim() || a.len() != spec.act_dim() {
        return Err(Error::Shape(format!(
            "{} expects obs {} / action {}, got {} / {}",
            spec.family.name(),
            spec.obs_dim(),
            spec.act_dim(),
            s.len(),
            a.len()
        )));
    }
    if s.iter().chain(a).any(|x| !x.is_finite()) {
        return Err(Error::EnvFault(format!("non-finite input obs {s:?} action {a:?}")));
    }
    Ok(())
}

/// `F(o, a; η)`: the noiseless transition with the action clipped to the box.
/// Motor noise is not part of `F`.
pub fn step_deterministic(spec: &EnvSpec, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    check_inputs(spec, s, a)?;
    let next = spec.family.predict::<f64>(spec.dt, spec.dynamics.values(), None, s, a);
    check_finite(spec.family, s, a, &next)?;
    Ok(next)
}

/// `F(o, a; η) + R` with `R ~ N(0, v²)` on each physical coordinate.
pub fn step(spec: &EnvSpec, s: &[f64], a: &[f64], rng: &mut SeededRng) -> Result<Vec<f64>> {
    check_inputs(spec, s, a)?;
    let fam = spec.family;
    let u = fam.clip_action(a);
    let mut x = fam.integrate::<f64>(spec.dt, spec.dynamics.values(), &fam.obs_to_phys(s), &u);
    if spec.noise_std > 0.0 {
        for xi in &mut x {
            *xi += spec.noise_std * rng.normal();
        }
    }
    let next = fam.phys_to_obs(&x);
    check_finite(fam, s, a, &next)?;
    Ok(next)
}

/// Jacobian of [`step_deterministic`] with respect to the dynamics values,
/// row-major `[obs_dim × d]`.
pub fn dstep_deta(spec: &EnvSpec, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    check_inputs(spec, s, a)?;
    Ok(spec.family.predict_jet(spec.dt, spec.dynamics.values(), None, s, a)?.1)
}

pub fn reward(spec: &EnvSpec, s: &[f64], a: &[f64]) -> f64 {
    spec.family.reward(s, a)
}

/// Uniform draw from the family's initial box scaled by `init_spread`.
pub fn reset(spec: &EnvSpec, rng: &mut SeededRng) -> Vec<f64> {
    let (centre, half) = spec.family.initial_box();
    let x: Vec<f64> = centre
        .iter()
        .zip(&half)
        .map(|(c, h)| {
            let w = h * spec.init_spread;
            if w > 0.0 {
                rng.uniform(c - w, c + w)
            } else {
                *c
            }
        })
        .collect();
    spec.family.phys_to_obs(&x)
}

/// An [`EnvSpec`] with its motor-noise network built once.
#[derive(Clone, Debug)]
pub struct Env {
    spec: EnvSpec,
    features: Option<NoiseFeatures>,
    weights: Vec<f64>,
}

impl Env {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let (features, weights) = match &spec.motor {
            Some(m) => (Some(m.features(spec.obs_dim())), m.effective_weights()),
            None => (None, Vec::new()),
        };
        Ok(Self { spec, features, weights })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn reset(&self, rng: &mut SeededRng) -> Vec<f64> {
        reset(&self.spec, rng)
    }

    /// Action actually delivered to the plant, before clipping.
    pub fn disturbed_action(&self, obs: &[f64], a: &[f64]) -> Vec<f64> {
        match &self.features {
            Some(f) => perturb(&self.weights, &f.eval(obs), a),
            None => a.to_vec(),
        }
    }

    /// Full transition: motor noise, clipping, integration and process noise.
    /// The reward is computed from the commanded action.
    pub fn step(&self, obs: &[f64], a: &[f64], rng: &mut SeededRng) -> Result<(Vec<f64>, f64)> {
        let applied = self.disturbed_action(obs, a);
        let next = step(&self.spec, obs, &applied, rng)?;
        Ok((next, self.spec.family.reward(obs, a)))
    }

    /// Runs one full-horizon episode; `policy` maps an observation to an
    /// action. `rng` drives the initial state and process noise.
    pub fn run_episode<P>(&self, env_id: u64, rng: &mut SeededRng, mut policy: P) -> Result<Episode>
    where
        P: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let mut obs = self.reset(rng);
        let mut transitions = Vec::with_capacity(self.spec.horizon);
        for t in 0..self.spec.horizon {
            let action = policy(&obs)?;
            let (next, r) = self.step(&obs, &action, rng)?;
            transitions.push(Transition {
                obs: obs.clone(),
                action,
                next_obs: next.clone(),
                reward: r,
                step_index: t + 1,
            });
            obs = next;
        }
        Ok(Episode {
            env_id,
            dynamics: self.spec.dynamics.clone(),
            omega: self.spec.motor.as_ref().map(|m| m.omega.clone()),
            transitions,
        })
    }
}

/// Deterministic generator of randomised environments: the `i`-th
/// environment depends only on `(seed, purpose, i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSampler {
    /// Shape of every generated environment; its dynamics supply the base.
    pub template: EnvSpec,
    pub range_frac: f64,
    pub motor: Option<MotorSettings>,
    pub seed: u64,
    pub dynamics_purpose: u32,
    pub omega_purpose: u32,
}

impl EnvSampler {
    pub fn env(&self, index: u64) -> Result<EnvSpec> {
        let mut rng = SeededRng::stream(self.seed, self.dynamics_purpose, index);
        let dynamics = sample_dynamics(&self.template.dynamics, self.range_frac, &mut rng)?;
        let motor = match &self.motor {
            Some(m) => {
                let mut rng = SeededRng::stream(self.seed, self.omega_purpose, index);
                Some(m.sample(self.template.act_dim(), &mut rng)?)
            }
            None => None,
        };
        let spec = EnvSpec { dynamics, motor, ..self.template.clone() };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_closed_form_step() {
        // Friction plays no role when v = 0.
        let spec = EnvSpec::nominal(Family::PointMass1d);
        let next = step_deterministic(&spec, &[0.0, 0.0], &[1.0]).unwrap();
        assert!((next[1] - 0.05).abs() < 1e-15);
        assert!((next[0] - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn linear_gaussian_closed_form() {
        let dynamics = DynamicsVector::new(vec![2.0], vec![1.5], 0.5).unwrap();
        let spec = EnvSpec::new(Family::LinearGaussian, dynamics).unwrap();
        assert_eq!(step_deterministic(&spec, &[1.0], &[0.5]).unwrap(), vec![2.5]);
        assert_eq!(dstep_deta(&spec, &[3.0], &[0.5]).unwrap(), vec![3.0]);
    }

    #[test]
    fn pendulum_rest_is_an_equilibrium() {
        let spec = EnvSpec::nominal(Family::Pendulum);
        let s = [1.0, 0.0, 0.0];
        assert_eq!(step_deterministic(&spec, &s, &[0.0]).unwrap(), s.to_vec());
    }

    #[test]
    fn point_mass_mass_derivative() {
        let spec = EnvSpec::nominal(Family::PointMass1d);
        let j = dstep_deta(&spec, &[0.0, 0.0], &[1.0]).unwrap();
        // rows: p', v'; cols: m, c
        assert!((j[2] + 0.05).abs() < 1e-15);
    }

    #[test]
    fn action_is_clipped_to_box() {
        let spec = EnvSpec::nominal(Family::PointMass1d);
        let a = step_deterministic(&spec, &[0.0, 0.0], &[5.0]).unwrap();
        let b = step_deterministic(&spec, &[0.0, 0.0], &[1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_step_is_deterministic_step() {
        for fam in Family::ALL {
            let spec = EnvSpec::nominal(fam);
            let mut rng = SeededRng::new(3, 0);
            let s = reset(&spec, &mut rng);
            let a = vec![0.3; fam.act_dim()];
            assert_eq!(step(&spec, &s, &a, &mut rng).unwrap(), step_deterministic(&spec, &s, &a).unwrap());
        }
    }

    #[test]
    fn rewards_at_their_maxima() {
        let pm = EnvSpec::nominal(Family::PointMass1d);
        assert_eq!(reward(&pm, &[1.0, 0.3], &[0.0]), 0.0);
        let pend = EnvSpec::nominal(Family::Pendulum);
        assert_eq!(reward(&pend, &[-1.0, 0.0, 0.0], &[0.0]), 0.0);
    }

    #[test]
    fn zero_spread_resets_to_nominal() {
        for fam in Family::ALL {
            let spec = EnvSpec { init_spread: 0.0, ..EnvSpec::nominal(fam) };
            let (c, _) = fam.initial_box();
            assert_eq!(reset(&spec, &mut SeededRng::new(1, 1)), fam.phys_to_obs(&c));
        }
    }

    #[test]
    fn non_finite_state_is_a_fault() {
        let spec = EnvSpec::nominal(Family::PointMass1d);
        assert!(matches!(step_deterministic(&spec, &[f64::NAN, 0.0], &[0.0]), Err(Error::EnvFault(_))));
    }
}
