mod common;

use dynacon::dcp::{Dcp, DcpConfig};
use dynacon::diffnum::{Optimizer, Tensor};
use dynacon::domain::{streams, DynamicsVector, SeededRng};
use dynacon::envs::{EnvSampler, EnvSpec, Family};
use dynacon::ppo::{
    collect, eta_scale, normalize_advantages, ppo_loss, train, update, PpoConfig, RandomizedSource, RolloutBatch,
};
use proptest::prelude::*;

fn source(family: Family, range: f64, seed: u64) -> RandomizedSource {
    let mut template = EnvSpec::nominal(family);
    template.dynamics = DynamicsVector::at_base(family.base_dynamics(), range).unwrap();
    template.noise_std = 0.01;
    RandomizedSource {
        sampler: EnvSampler {
            template,
            range_frac: range,
            motor: None,
            seed,
            dynamics_purpose: streams::TRAIN_DYNAMICS,
            omega_purpose: streams::TRAIN_OMEGA,
        },
        n_envs: 0,
        motor_slots: 0,
        scale: eta_scale(range),
    }
}

fn small_dcp(family: Family) -> Dcp {
    let cfg = DcpConfig { hidden: vec![16], obs_latent: 8, dyn_latent: 4, ..DcpConfig::default() };
    Dcp::new(family.obs_dim(), family.act_dim(), family.dyn_dim(), cfg).unwrap()
}

fn short_batch(dcp: &Dcp, episodes: usize, seed: u64) -> (RolloutBatch, dynacon::diffnum::ParamStore) {
    let store = dcp.init(&mut SeededRng::new(seed, 0)).unwrap();
    let mut src = source(Family::PointMass1d, 0.3, seed);
    src.sampler.template.horizon = 30;
    let batch = collect(dcp, &store, &mut src, episodes, 0, &mut SeededRng::new(seed, 1)).unwrap();
    (batch, store)
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let e = common::policy_case(seed);
        assert!(e <= 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn zero_advantages_give_zero_policy_gradient() {
    let dcp = common::toy_dcp();
    let mut rng = SeededRng::new(4, 0);
    let store = dcp.init(&mut rng).unwrap();
    let mut mb = common::toy_minibatch(&dcp, &store, &mut rng);
    mb.advantages = Tensor::zeros(10, 1);
    let dcp = Dcp::new(2, 1, 2, DcpConfig { w_inv: 0.0, w_rec: 0.0, ..dcp.config.clone() }).unwrap();
    let cfg = PpoConfig { value_coef: 0.0, ..PpoConfig::default() };
    let (_, g) = ppo_loss(&dcp, &store, &mb, &cfg).unwrap();
    assert!(g.flat().iter().all(|v| *v == 0.0));
    let mut after = store.clone();
    Optimizer::new(cfg.optimizer, &after).step(&mut after, &g).unwrap();
    assert_eq!(after, store);
    // The value loss never reaches the action head.
    let cfg = PpoConfig::default();
    let (_, g) = ppo_loss(&dcp, &store, &mb, &cfg).unwrap();
    for l in 0..dcp.g_theta.spec.num_layers() {
        assert!(g.by_name(&store, &dcp.g_theta.weight_name(l)).unwrap().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn unit_ratio_surrogate_is_minus_mean_advantage() {
    let dcp = common::toy_dcp();
    let mut rng = SeededRng::new(6, 0);
    let store = dcp.init(&mut rng).unwrap();
    let mut mb = common::toy_minibatch(&dcp, &store, &mut rng);
    let mut lp = Vec::new();
    for i in 0..10 {
        let z = dcp.encode(&store, mb.obs.row_slice(i), mb.cond.row_slice(i)).unwrap();
        lp.push(dcp.policy_forward(&store, &z).unwrap().log_prob(mb.actions.row_slice(i)));
    }
    mb.old_log_probs = Tensor::new(10, 1, lp).unwrap();
    let (rep, _) = ppo_loss(&dcp, &store, &mb, &PpoConfig::default()).unwrap();
    let mean_adv = mb.advantages.data().iter().sum::<f64>() / 10.0;
    assert!((rep.surrogate + mean_adv).abs() < 1e-12);
}

#[test]
fn zero_iterations_return_the_initial_parameters() {
    let dcp = small_dcp(Family::PointMass1d);
    let cfg = PpoConfig { iterations: 0, ..PpoConfig::default() };
    let out = train(&dcp, &mut source(Family::PointMass1d, 0.0, 0), &cfg, 3, None).unwrap();
    assert!(out.curve.is_empty());
    assert_eq!(out.params, dcp.init(&mut SeededRng::stream(3, streams::PARAM_INIT, 0)).unwrap());
}

#[test]
fn curve_has_one_row_per_iteration() {
    let dcp = small_dcp(Family::PointMass1d);
    let mut src = source(Family::PointMass1d, 0.2, 0);
    src.sampler.template.horizon = 20;
    let cfg = PpoConfig { iterations: 3, episodes_per_iter: 2, ..PpoConfig::default() };
    let out = train(&dcp, &mut src, &cfg, 1, None).unwrap();
    assert_eq!(out.curve.len(), 3);
    assert!(out.params.is_finite());
    assert!(out.curve.iter().all(|r| r.mean_reward.is_finite()));
}

#[test]
fn non_finite_loss_leaves_parameters_untouched() {
    let dcp = small_dcp(Family::PointMass1d);
    let (mut batch, store) = short_batch(&dcp, 2, 0);
    batch.rewards[3] = f64::NAN;
    let mut params = store.clone();
    let mut opt = Optimizer::new(PpoConfig::default().optimizer, &params);
    let err = update(&dcp, &mut params, &mut opt, &batch, &PpoConfig::default(), &mut SeededRng::new(0, 0));
    assert!(err.is_err());
    assert_eq!(params, store);
}

#[test]
fn dynamics_change_only_between_episodes() {
    let dcp = small_dcp(Family::PointMass1d);
    let (batch, _) = short_batch(&dcp, 6, 2);
    let c = batch.cond_dim;
    for ep in &batch.episodes {
        let first = &batch.cond[ep.start * c..(ep.start + 1) * c];
        for t in ep.start..ep.start + ep.len {
            assert_eq!(&batch.cond[t * c..(t + 1) * c], first);
        }
    }
    let distinct: std::collections::BTreeSet<u64> = batch.episodes.iter().map(|e| e.dynamics[0].to_bits()).collect();
    assert_eq!(distinct.len(), 6);
}

/// Asymptotic Kolmogorov distribution tail.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..200 {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        p += sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
    }
    (2.0 * p).clamp(0.0, 1.0)
}

#[test]
fn episode_dynamics_are_uniform_over_the_interval() {
    let dcp = small_dcp(Family::PointMass1d);
    let store = dcp.init(&mut SeededRng::new(0, 0)).unwrap();
    let range = 0.3;
    let mut src = source(Family::PointMass1d, range, 21);
    src.sampler.template.horizon = 1;
    let batch = collect(&dcp, &store, &mut src, 1000, 0, &mut SeededRng::new(1, 1)).unwrap();
    for j in 0..2 {
        let mut u: Vec<f64> =
            batch.episodes.iter().map(|e| (e.dynamics[j] - (1.0 - range)) / (2.0 * range)).collect();
        u.sort_by(f64::total_cmp);
        let n = u.len();
        let d = u
            .iter()
            .enumerate()
            .map(|(i, x)| ((i + 1) as f64 / n as f64 - x).max(x - i as f64 / n as f64))
            .fold(0.0, f64::max);
        let p = ks_p_value(d, n);
        assert!(p > 0.01, "component {j}: D={d}, p={p}");
    }
}

#[test]
fn point_mass_learning_progress() {
    let family = Family::PointMass1d;
    let cfg = PpoConfig { iterations: 100, ..PpoConfig::default() };
    let dcp = Dcp::new(2, 1, 2, DcpConfig { hidden: vec![32, 32], ..DcpConfig::default() }).unwrap();
    let (mut early, mut late) = (0.0, 0.0);
    for seed in 0..3 {
        let out = train(&dcp, &mut source(family, 0.0, seed), &cfg, seed, None).unwrap();
        let r: Vec<f64> = out.curve.iter().map(|c| c.mean_reward).collect();
        early += common::mean(&r[..50]) / 3.0;
        late += common::mean(&r[50..]) / 3.0;
    }
    println!("first 50 iterations {early:.3}, last 50 iterations {late:.3}");
    assert!(late > early);
}

proptest! {
    #[test]
    fn normalized_advantages_have_zero_mean_unit_std(xs in prop::collection::vec(-1e3f64..1e3, 2..200)) {
        let mut a = xs.clone();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let m = a.iter().sum::<f64>() / n;
        let s = (a.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
        prop_assert!(m.abs() < 1e-10);
        let spread = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - xs.iter().copied().fold(f64::INFINITY, f64::min);
        if spread > 1e-6 {
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
