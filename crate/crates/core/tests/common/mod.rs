//! Helpers shared by the integration and acceptance tests: independent
//! oracles and finite-difference gradient cases.
#![allow(dead_code)]

use dynacon::dcp::{Dcp, DcpConfig};
use dynacon::diffnum::{finite_difference, rel_err, Activation, Mlp, MlpSpec, ParamStore, Tape, Tensor};
use dynacon::domain::{chunk_episode, Chunk, DynamicsVector, Episode, SeededRng};
use dynacon::envs::{Env, EnvSpec, Family};
use dynacon::ppo::{ppo_loss, Minibatch, PpoConfig};
use dynacon::sysid::{SysidConfig, SysidModel};

pub const FD_STEP: f64 = 1e-5;
/// The ELBO sums over every transition, so it is O(10-100) in magnitude.
/// Plain central differences then have no usable step: round-off swamps
/// coordinates with O(1e-7) gradients below 1e-4, while strongly curved
/// coordinates show O(h²) truncation above it. Richardson extrapolation at
/// this step removes the h² term and keeps round-off near 1e-11.
pub const ELBO_FD_STEP: f64 = 2e-3;

/// Largest relative error between an analytic gradient and central
/// differences of `f`.
pub fn max_fd_error<F>(store: &ParamStore, analytic: &[f64], f: F) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    max_fd_error_with(store, analytic, FD_STEP, f)
}

/// Richardson-extrapolated central differences, `(4·D(h/2) − D(h)) / 3`.
pub fn max_richardson_error<F>(store: &ParamStore, analytic: &[f64], step: f64, mut f: F) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let coarse = finite_difference(store, step, &mut f);
    let fine = finite_difference(store, 0.5 * step, &mut f);
    assert_eq!(coarse.len(), analytic.len());
    analytic
        .iter()
        .zip(coarse.iter().zip(&fine))
        .map(|(a, (c, h))| rel_err(*a, (4.0 * h - c) / 3.0))
        .fold(0.0, f64::max)
}

pub fn max_fd_error_with<F>(store: &ParamStore, analytic: &[f64], step: f64, f: F) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let numeric = finite_difference(store, step, f);
    assert_eq!(numeric.len(), analytic.len());
    analytic.iter().zip(&numeric).map(|(a, n)| rel_err(*a, *n)).fold(0.0, f64::max)
}

fn random_tensor(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Seeded two-hidden-layer MLP with a squared-error loss.
pub fn mlp_case(seed: u64, activation: Activation) -> f64 {
    let mut rng = SeededRng::new(seed, 100);
    let mlp = Mlp::new("net", MlpSpec::new(3, &[5, 4], 2, activation)).unwrap();
    let mut store = ParamStore::new();
    mlp.init(&mut store, &mut rng).unwrap();
    for id in 0..store.len() {
        let name = store.entry(id).name.clone();
        for b in store.get_mut(&name).unwrap() {
            *b += 0.1 * rng.normal();
        }
    }
    let x = random_tensor(6, 3, 1.0, &mut rng);
    let y = random_tensor(6, 2, 1.0, &mut rng);
    let loss = |s: &ParamStore, tape: &mut Tape| {
        let xi = tape.input(x.clone());
        let yi = tape.input(y.clone());
        let out = mlp.forward_tape(tape, s, xi).unwrap();
        let d = tape.sub(out, yi).unwrap();
        let sq = tape.square(d);
        tape.mean(sq)
    };
    let mut tape = Tape::new();
    let l = loss(&store, &mut tape);
    let g = tape.grad(l, &store).unwrap().flat();
    max_fd_error(&store, &g, |s| {
        let mut t = Tape::new();
        let l = loss(s, &mut t);
        t.scalar(l)
    })
}

/// Small policy with both auxiliary losses active, for gradient checks.
pub fn toy_dcp() -> Dcp {
    let cfg = DcpConfig { hidden: vec![6], obs_latent: 4, dyn_latent: 3, w_inv: 0.3, w_rec: 0.2, ..DcpConfig::default() };
    Dcp::new(2, 1, 2, cfg).unwrap()
}

/// A 10-row toy minibatch whose old log-probabilities put the ratios both
/// inside and outside the clip interval.
pub fn toy_minibatch(dcp: &Dcp, store: &ParamStore, rng: &mut SeededRng) -> Minibatch {
    let n = 10;
    let obs = random_tensor(n, dcp.obs_dim, 1.0, rng);
    let next_obs = random_tensor(n, dcp.obs_dim, 1.0, rng);
    let cond = random_tensor(n, dcp.cond_dim, 0.5, rng);
    let actions = random_tensor(n, dcp.act_dim, 1.0, rng);
    let mut old = Vec::with_capacity(n);
    for i in 0..n {
        let z = dcp.encode(store, obs.row_slice(i), cond.row_slice(i)).unwrap();
        let lp = dcp.policy_forward(store, &z).unwrap().log_prob(actions.row_slice(i));
        old.push(lp + rng.uniform(-0.6, 0.6));
    }
    Minibatch {
        obs,
        next_obs,
        cond,
        executed: actions.clone(),
        actions,
        old_log_probs: Tensor::new(n, 1, old).unwrap(),
        advantages: random_tensor(n, 1, 1.0, rng),
        returns: random_tensor(n, 1, 1.0, rng),
    }
}

/// Full PPO loss (surrogate, value, entropy and auxiliary terms) against
/// central differences over every policy parameter.
pub fn policy_case(seed: u64) -> f64 {
    let dcp = toy_dcp();
    let mut rng = SeededRng::new(seed, 200);
    let store = dcp.init(&mut rng).unwrap();
    let mb = toy_minibatch(&dcp, &store, &mut rng);
    let cfg = PpoConfig { entropy_coef: 0.01, ..PpoConfig::default() };
    let (_, g) = ppo_loss(&dcp, &store, &mb, &cfg).unwrap();
    max_fd_error(&store, &g.flat(), |s| ppo_loss(&dcp, s, &mb, &cfg).unwrap().0.total)
}

pub fn small_sysid_config(chunk_len: usize) -> SysidConfig {
    SysidConfig { chunk_len, hidden: vec![6], embed: 3, eps_samples: 2, ..SysidConfig::default() }
}

/// Random-action episodes in one environment.
pub fn random_episodes(spec: &EnvSpec, env_id: u64, n: usize, seed: u64) -> Vec<Episode> {
    let env = Env::new(spec.clone()).unwrap();
    let bound = spec.family.action_bound();
    (0..n)
        .map(|i| {
            let mut rng = SeededRng::new(seed, 1000 + i as u64);
            let mut prng = SeededRng::new(seed, 5000 + i as u64);
            env.run_episode(env_id, &mut rng, |_| Ok(vec![prng.uniform(-bound, bound)])).unwrap()
        })
        .collect()
}

/// Negative ELBO of a small estimator on a few chunks of `family` data with
/// fixed Monte-Carlo draws, against extrapolated central differences over
/// estimator and prior parameters.
pub fn elbo_case(seed: u64, family: Family) -> f64 {
    let mut rng = SeededRng::new(seed, 300);
    let range = 0.2;
    let base = family.base_dynamics();
    let values: Vec<f64> = base.iter().map(|b| b * (1.0 + rng.uniform(-range, range))).collect();
    let mut spec = EnvSpec::new(family, DynamicsVector::new(values, base.clone(), range).unwrap()).unwrap();
    spec.noise_std = 0.05;
    spec.horizon = 24;
    let chunk_len = 8;
    let episodes = random_episodes(&spec, 1, 1, seed);
    let chunks: Vec<Chunk> = chunk_episode(&episodes[0], chunk_len).unwrap();
    let refs: Vec<&Chunk> = chunks.iter().collect();
    let model = SysidModel::new(family, spec.dt, base, range, None, spec.noise_std, small_sysid_config(chunk_len)).unwrap();
    let mut store = model.init(&mut rng).unwrap();
    // Move away from the near-degenerate initial head so every path carries
    // gradient.
    for id in 0..store.len() {
        let name = store.entry(id).name.clone();
        for w in store.get_mut(&name).unwrap() {
            *w += 0.05 * rng.normal();
        }
    }
    let m = model.out_dim();
    let eps: Vec<Vec<f64>> = (0..2).map(|_| (0..m).map(|_| rng.normal()).collect()).collect();
    let (_, g) = model.elbo_loss(&store, &refs, &eps).unwrap();
    max_richardson_error(&store, &g.flat(), ELBO_FD_STEP, |s| model.elbo_loss(s, &refs, &eps).unwrap().0.loss)
}

/// Conjugate posterior of the gain of `o' = η·o + a + N(0, v²)` under the
/// prior `N(f0, g0²)`, written out from sufficient statistics.
pub fn conjugate_posterior(chunks: &[&Chunk], f0: f64, g0: f64, v: f64) -> (f64, f64) {
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for c in chunks {
        for (x, y) in c.x.iter().zip(&c.y) {
            let (o, a) = (x[0], x[1]);
            sxx += o * o;
            sxy += o * (y[0] - a);
        }
    }
    let prec = 1.0 / (g0 * g0) + sxx / (v * v);
    let mean = (f0 / (g0 * g0) + sxy / (v * v)) / prec;
    (mean, prec.recip().sqrt())
}

/// Linear-Gaussian chunks with gain `eta` and noise `v`.
pub fn linear_gaussian_chunks(eta: f64, v: f64, k: usize, t: usize, rng: &mut SeededRng) -> Vec<Chunk> {
    (0..k)
        .map(|_| {
            let mut o = rng.uniform(-1.5, 1.5);
            let mut x = Vec::with_capacity(t);
            let mut y = Vec::with_capacity(t);
            for _ in 0..t {
                let a = rng.uniform(-1.0, 1.0);
                let next = eta * o + a + v * rng.normal();
                x.push(vec![o, a]);
                y.push(vec![next]);
                o = next.clamp(-3.0, 3.0);
            }
            Chunk { env_id: 1, x, y }
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn pass_line(id: &str, name: &str, ok: bool, detail: &str) {
    println!("[{}] criterion {id} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

/// A configuration small enough for a full pipeline run in seconds.
pub fn tiny_config(family: Family) -> dynacon::harness::ExperimentConfig {
    let mut cfg = dynacon::harness::ExperimentConfig::new(family);
    cfg.env.horizon = 30;
    cfg.policy = DcpConfig { hidden: vec![8], obs_latent: 4, dyn_latent: 3, ..DcpConfig::default() };
    cfg.ppo = PpoConfig { iterations: 2, episodes_per_iter: 2, minibatch_size: 32, epochs_per_batch: 1, ..PpoConfig::default() };
    cfg.sysid = SysidConfig { steps: 5, ..small_sysid_config(10) };
    cfg.eval.n_test_envs = 3;
    cfg.eval.episodes_per_env = 2;
    cfg.eval.offpolicy_episodes = 2;
    cfg.eval.finetune_episodes = 3;
    cfg.eval.sysid_train_envs = 3;
    cfg.eval.sysid_train_episodes = 2;
    cfg.protocol.n_seeds = 1;
    cfg
}
