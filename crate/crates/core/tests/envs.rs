use dynacon::domain::{DynamicsVector, SeededRng};
use dynacon::envs::{
    dstep_deta, reset, reward, step, step_deterministic, Env, EnvSpec, Family, MotorNoiseSpec, NoiseFeatures,
};
use proptest::prelude::*;

fn random_spec(family: Family, rng: &mut SeededRng) -> EnvSpec {
    let base = family.base_dynamics();
    let values = base.iter().map(|b| b * rng.uniform(0.7, 1.3)).collect();
    EnvSpec::new(family, DynamicsVector::new(values, base, 0.3).unwrap()).unwrap()
}

fn random_obs(family: Family, rng: &mut SeededRng) -> Vec<f64> {
    let x: Vec<f64> = (0..family.phys_dim()).map(|_| rng.uniform(-2.0, 2.0)).collect();
    family.phys_to_obs(&x)
}

#[test]
fn process_noise_has_the_configured_variance() {
    let v = 0.01;
    for family in Family::ALL {
        let mut spec = EnvSpec::nominal(family);
        spec.noise_std = v;
        let mut rng = SeededRng::new(3, 9);
        let s = random_obs(family, &mut rng);
        let a = vec![0.3];
        let det = family.obs_to_phys(&step_deterministic(&spec, &s, &a).unwrap());
        let n = 100_000;
        let dim = det.len();
        let (mut sum, mut sq) = (vec![0.0; dim], vec![0.0; dim]);
        for _ in 0..n {
            let x = family.obs_to_phys(&step(&spec, &s, &a, &mut rng).unwrap());
            for j in 0..dim {
                let mut r = x[j] - det[j];
                // Angles come back wrapped; residuals are tiny.
                if r > std::f64::consts::PI {
                    r -= 2.0 * std::f64::consts::PI;
                } else if r < -std::f64::consts::PI {
                    r += 2.0 * std::f64::consts::PI;
                }
                sum[j] += r;
                sq[j] += r * r;
            }
        }
        for j in 0..dim {
            let m = sum[j] / n as f64;
            let var = sq[j] / n as f64 - m * m;
            assert!(m.abs() < 5.0 * v / (n as f64).sqrt(), "{family:?} mean {m}");
            assert!((var / (v * v) - 1.0).abs() < 0.03, "{family:?} coord {j} var {var}");
        }
    }
}

#[test]
fn jacobian_matches_finite_differences_for_all_families() {
    let h = 1e-6;
    for family in Family::ALL {
        let mut rng = SeededRng::new(17, family as u64);
        for _ in 0..100 {
            let spec = random_spec(family, &mut rng);
            let s = random_obs(family, &mut rng);
            let a = vec![rng.uniform(-1.2, 1.2) * family.action_bound()];
            let jac = dstep_deta(&spec, &s, &a).unwrap();
            let d = family.dyn_dim();
            for j in 0..d {
                let shifted = |delta: f64| {
                    let mut vals = spec.dynamics.values().to_vec();
                    vals[j] += delta;
                    let dynamics = DynamicsVector::new(vals, spec.dynamics.base().to_vec(), 0.5).unwrap();
                    step_deterministic(&EnvSpec { dynamics, ..spec.clone() }, &s, &a).unwrap()
                };
                let (up, down) = (shifted(h), shifted(-h));
                for i in 0..family.obs_dim() {
                    let fd = (up[i] - down[i]) / (2.0 * h);
                    let an = jac[i * d + j];
                    let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                    assert!(err <= 1e-5, "{family:?} d{i}/d{j}: analytic {an} fd {fd}");
                }
            }
        }
    }
}

#[test]
fn jacobian_closed_forms() {
    let spec = EnvSpec::nominal(Family::PointMass1d);
    let j = dstep_deta(&spec, &[0.0, 0.0], &[1.0]).unwrap();
    // Row 1 (velocity), column 0 (mass).
    assert!((j[2] + 0.05).abs() < 1e-15);
    let spec = EnvSpec::nominal(Family::LinearGaussian);
    assert_eq!(dstep_deta(&spec, &[3.0], &[0.0]).unwrap(), vec![3.0]);
}

#[test]
fn resets_stay_in_the_documented_box() {
    for family in Family::ALL {
        let spec = EnvSpec::nominal(family);
        let (centre, half) = family.initial_box();
        let mut rng = SeededRng::new(5, 0);
        for _ in 0..10_000 {
            let x = family.obs_to_phys(&reset(&spec, &mut rng));
            for j in 0..x.len() {
                let mut d = x[j] - centre[j];
                if d > std::f64::consts::PI {
                    d -= 2.0 * std::f64::consts::PI;
                } else if d < -std::f64::consts::PI {
                    d += 2.0 * std::f64::consts::PI;
                }
                assert!(d.abs() <= half[j] + 1e-12, "{family:?} coord {j}: {d}");
            }
        }
        let a = reset(&spec, &mut SeededRng::new(8, 8));
        let b = reset(&spec, &mut SeededRng::new(8, 8));
        assert_eq!(a, b);
    }
}

#[test]
fn undamped_pendulum_conserves_energy() {
    let base = vec![1.0, 1.0, 9.8, 1e-12];
    let mut spec = EnvSpec::new(Family::Pendulum, DynamicsVector::at_base(base, 0.0).unwrap()).unwrap();
    spec.dt = 0.01;
    let energy = |obs: &[f64]| {
        let x = Family::Pendulum.obs_to_phys(obs);
        0.5 * x[1] * x[1] + 9.8 * (1.0 - x[0].cos())
    };
    let mut obs = Family::Pendulum.phys_to_obs(&[1.0, 0.0]);
    let e0 = energy(&obs);
    for _ in 0..spec.horizon {
        obs = step_deterministic(&spec, &obs, &[0.0]).unwrap();
        let e = energy(&obs);
        assert!((e - e0).abs() / e0 < 0.01, "energy drift {e} vs {e0}");
    }
}

#[test]
fn motor_noise_examples() {
    let feats = NoiseFeatures::build(7, 3, 4);
    let obs = [0.3, -0.2, 1.1];
    let phi = feats.eval(&obs);
    assert_eq!(phi, NoiseFeatures::build(7, 3, 4).eval(&obs));
    assert_ne!(phi, NoiseFeatures::build(8, 3, 4).eval(&obs));
    let omega = vec![0.5, -0.25, 1.0, 0.1];
    let spec = |tau, k| {
        let mut s = EnvSpec::nominal(Family::Pendulum);
        s.motor = Some(MotorNoiseSpec::new(tau, 4, omega.clone(), k, 1).unwrap());
        Env::new(s).unwrap()
    };
    assert_eq!(spec(7, 0.0).disturbed_action(&obs, &[0.4]), vec![0.4]);
    assert_eq!(spec(9, 0.0).disturbed_action(&obs, &[0.4]), vec![0.4]);
    let a = spec(7, 1.0).disturbed_action(&obs, &[0.4]);
    let expected: f64 = 0.4 + omega.iter().zip(&phi).map(|(w, p)| w * p).sum::<f64>();
    assert!((a[0] - expected).abs() < 1e-14);
    assert_ne!(a, spec(9, 1.0).disturbed_action(&obs, &[0.4]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rewards_never_exceed_the_family_bound(fam in 0usize..4, seed in any::<u64>(), a in -10.0f64..10.0) {
        let family = Family::ALL[fam];
        let mut rng = SeededRng::new(seed, 0);
        let spec = random_spec(family, &mut rng);
        let s = random_obs(family, &mut rng);
        prop_assert!(reward(&spec, &s, &[a]) <= family.reward_upper_bound());
    }

    #[test]
    fn seeded_trajectories_repeat(fam in 0usize..4, seed in any::<u64>()) {
        let family = Family::ALL[fam];
        let mut spec = EnvSpec::nominal(family);
        spec.noise_std = 0.02;
        spec.horizon = 20;
        let env = Env::new(spec).unwrap();
        let run = || env.run_episode(1, &mut SeededRng::new(seed, 1), |o| Ok(vec![o[0].sin()])).unwrap();
        prop_assert_eq!(run(), run());
    }
}
