//! Domain types shared by every module: dynamics vectors, transitions,
//! episodes, fixed-length chunks, diagonal Gaussians and seeded random streams.

use std::io::{BufRead, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative slack allowed when checking that a value lies inside its range.
const RANGE_SLACK: f64 = 1e-9;

/// Environment parameter vector together with its base values and the
/// fractional randomization range it was drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDynamics")]
pub struct DynamicsVector {
    values: Vec<f64>,
    base: Vec<f64>,
    range_frac: f64,
}

#[derive(Deserialize)]
struct RawDynamics {
    values: Vec<f64>,
    base: Vec<f64>,
    range_frac: f64,
}

impl TryFrom<RawDynamics> for DynamicsVector {
    type Error = Error;

    fn try_from(raw: RawDynamics) -> Result<Self> {
        DynamicsVector::new(raw.values, raw.base, raw.range_frac)
    }
}

impl DynamicsVector {
    pub fn new(values: Vec<f64>, base: Vec<f64>, range_frac: f64) -> Result<Self> {
        if base.is_empty() {
            return Err(invalid("dynamics vector must have at least one component"));
        }
        if values.len() != base.len() {
            return Err(invalid(format!(
                "dynamics values have {} components, base has {}",
                values.len(),
                base.len()
            )));
        }
        if !(0.0..1.0).contains(&range_frac) {
            return Err(invalid(format!("range_frac {range_frac} outside [0, 1)")));
        }
        for (j, (&v, &b)) in values.iter().zip(&base).enumerate() {
            if !(b.is_finite() && b > 0.0) {
                return Err(invalid(format!("base[{j}] = {b} must be finite and positive")));
            }
            let lo = b * (1.0 - range_frac);
            let hi = b * (1.0 + range_frac);
            let slack = RANGE_SLACK * b;
            if !v.is_finite() || v < lo - slack || v > hi + slack {
                return Err(invalid(format!("values[{j}] = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(Self { values, base, range_frac })
    }

    /// The vector sitting exactly at its base values.
    pub fn at_base(base: Vec<f64>, range_frac: f64) -> Result<Self> {
        Self::new(base.clone(), base, range_frac)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn range_frac(&self) -> f64 {
        self.range_frac
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.base.clone(), self.range_frac)
    }

    pub fn with_range(&self, range_frac: f64) -> Result<Self> {
        Self::new(self.values.clone(), self.base.clone(), range_frac)
    }
}

/// Draws every component independently and uniformly from
/// `[base·(1−x), base·(1+x)]`.
pub fn sample_dynamics(
    base: &DynamicsVector,
    range_frac: f64,
    rng: &mut SeededRng,
) -> Result<DynamicsVector> {
    if !(0.0..1.0).contains(&range_frac) {
        return Err(invalid(format!(
            "range_frac {range_frac} must lie in [0, 1); larger ranges admit non-positive parameters"
        )));
    }
    let values = base
        .base()
        .iter()
        .map(|&b| {
            if range_frac == 0.0 {
                b
            } else {
                rng.uniform(b * (1.0 - range_frac), b * (1.0 + range_frac))
            }
        })
        .collect();
    DynamicsVector::new(values, base.base().to_vec(), range_frac)
}

/// Zero-centred fractional deviation from base, `values/base − 1`.
pub fn normalize_dynamics(eta: &DynamicsVector) -> Vec<f64> {
    eta.values().iter().zip(eta.base()).map(|(v, b)| v / b - 1.0).collect()
}

/// Inverse of [`normalize_dynamics`] for an arbitrary base.
pub fn denormalize_dynamics(base: &[f64], normalized: &[f64]) -> Vec<f64> {
    base.iter().zip(normalized).map(|(b, u)| b * (1.0 + u)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub reward: f64,
    pub step_index: usize,
}

/// One rollout in a single environment. `omega` carries the motor-noise
/// weights when the environment has motor noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub env_id: u64,
    pub dynamics: DynamicsVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<Vec<f64>>,
    pub transitions: Vec<Transition>,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        if self.env_id < 1 {
            return Err(invalid("episode env_id must be >= 1"));
        }
        for (i, t) in self.transitions.iter().enumerate() {
            if t.step_index < 1 {
                return Err(invalid(format!("transition {i} has step_index 0")));
            }
            if t.obs.iter().chain(&t.next_obs).any(|x| !x.is_finite()) {
                return Err(invalid(format!("transition {i} has a non-finite observation")));
            }
        }
        for (i, pair) in self.transitions.windows(2).enumerate() {
            if pair[0].next_obs != pair[1].obs {
                return Err(invalid(format!(
                    "transition {i} next_obs does not match transition {} obs",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

/// A fixed-length window of consecutive transitions from one environment.
/// `x[t]` is `obs ++ action`, `y[t]` is the next observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub env_id: u64,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.y.first().map_or(0, Vec::len)
    }

    pub fn act_dim(&self) -> usize {
        self.x.first().map_or(0, |x| x.len() - self.obs_dim())
    }

    pub fn obs(&self, t: usize) -> &[f64] {
        &self.x[t][..self.obs_dim()]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.x[t][self.obs_dim()..]
    }
}

/// Splits an episode into `floor(len/T)` consecutive, non-overlapping chunks.
/// The trailing remainder shorter than `T` is dropped.
pub fn chunk_episode(ep: &Episode, chunk_len: usize) -> Result<Vec<Chunk>> {
    if chunk_len == 0 {
        return Err(invalid("chunk length must be >= 1"));
    }
    Ok(ep
        .transitions
        .chunks_exact(chunk_len)
        .map(|window| Chunk {
            env_id: ep.env_id,
            x: window
                .iter()
                .map(|t| t.obs.iter().chain(&t.action).copied().collect())
                .collect(),
            y: window.iter().map(|t| t.next_obs.clone()).collect(),
        })
        .collect())
}

/// Per-dimension Gaussian with diagonal covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(invalid(format!(
                "mean has {} entries, std has {}",
                mean.len(),
                std.len()
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(invalid("Gaussian mean must be finite"));
        }
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(invalid("Gaussian std must be finite and strictly positive"));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.std)
            .zip(x)
            .map(|((m, s), x)| {
                let z = (x - m) / s;
                -0.5 * z * z - s.ln() - 0.5 * LN_2PI
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.std.iter().map(|s| s.ln() + 0.5 * (1.0 + LN_2PI)).sum()
    }

    /// Returns `mean + std ⊙ ε` for the supplied standard-normal draw.
    pub fn transform(&self, eps: &[f64]) -> Vec<f64> {
        self.mean.iter().zip(&self.std).zip(eps).map(|((m, s), e)| m + s * e).collect()
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.normal()).collect();
        self.transform(&eps)
    }
}

/// Well-known stream purposes. A stream id combines a purpose with an index
/// (episode, environment or iteration number).
pub mod streams {
    pub const PARAM_INIT: u32 = 1;
    pub const TRAIN_DYNAMICS: u32 = 2;
    pub const TEST_DYNAMICS: u32 = 3;
    pub const TRAIN_OMEGA: u32 = 4;
    pub const TEST_OMEGA: u32 = 5;
    pub const ROLLOUT: u32 = 6;
    pub const MINIBATCH: u32 = 7;
    pub const OFFPOLICY: u32 = 8;
    pub const SYSID_TRAIN: u32 = 9;
    pub const EVAL: u32 = 10;
    pub const ENV_POOL: u32 = 11;
    pub const FINETUNE: u32 = 12;
    pub const TEST_OFFPOLICY: u32 = 13;
}

/// Counter-based random stream. Identical `(seed, stream_id)` pairs always
/// yield identical draw sequences.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { seed, stream_id, inner }
    }

    /// Stream for a `(purpose, index)` pair under `seed`.
    pub fn stream(seed: u64, purpose: u32, index: u64) -> Self {
        assert!(index < (1 << 40), "stream index out of range");
        Self::new(seed, (u64::from(purpose) << 40) | index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Writes episodes as one JSON object per line.
pub fn write_episodes_jsonl<W: Write>(mut out: W, episodes: &[Episode]) -> Result<()> {
    for ep in episodes {
        serde_json::to_writer(&mut out, ep)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_episodes_jsonl<R: BufRead>(input: R) -> Result<Vec<Episode>> {
    let mut episodes = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line)?;
        ep.validate()?;
        episodes.push(ep);
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(len: usize) -> Episode {
        let transitions = (0..len)
            .map(|i| Transition {
                obs: vec![i as f64],
                action: vec![0.5],
                next_obs: vec![(i + 1) as f64],
                reward: 0.0,
                step_index: i + 1,
            })
            .collect();
        Episode {
            env_id: 1,
            dynamics: DynamicsVector::at_base(vec![1.0], 0.1).unwrap(),
            omega: None,
            transitions,
        }
    }

    #[test]
    fn zero_range_returns_base() {
        let base = DynamicsVector::at_base(vec![1.0, 9.8], 0.0).unwrap();
        let mut rng = SeededRng::new(3, 0);
        let eta = sample_dynamics(&base, 0.0, &mut rng).unwrap();
        assert_eq!(eta.values(), &[1.0, 9.8]);
    }

    #[test]
    fn samples_stay_inside_interval() {
        let base = DynamicsVector::at_base(vec![1.0, 9.8], 0.05).unwrap();
        for seed in 0..50 {
            let mut rng = SeededRng::new(seed, 7);
            let eta = sample_dynamics(&base, 0.05, &mut rng).unwrap();
            for (v, b) in eta.values().iter().zip(base.base()) {
                assert!(*v >= 0.95 * b && *v <= 1.05 * b);
            }
        }
    }

    #[test]
    fn range_of_one_is_rejected() {
        let base = DynamicsVector::at_base(vec![1.0], 0.0).unwrap();
        let mut rng = SeededRng::new(0, 0);
        assert!(sample_dynamics(&base, 1.0, &mut rng).is_err());
        assert!(sample_dynamics(&base, 1.5, &mut rng).is_err());
    }

    #[test]
    fn monte_carlo_moments_of_uniform_draws() {
        let base = DynamicsVector::at_base(vec![1.0, 9.8], 0.3).unwrap();
        let mut rng = SeededRng::new(11, 0);
        let n = 10_000;
        let mut sum = [0.0; 2];
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for _ in 0..n {
            let eta = sample_dynamics(&base, 0.3, &mut rng).unwrap();
            for j in 0..2 {
                let v = eta.values()[j];
                sum[j] += v;
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        for j in 0..2 {
            let b = base.base()[j];
            assert!((sum[j] / n as f64 - b).abs() <= 0.01 * b);
            assert!((min[j] - 0.7 * b).abs() <= 0.005 * 0.7 * b);
            assert!((max[j] - 1.3 * b).abs() <= 0.005 * 1.3 * b);
        }
    }

    #[test]
    fn normalize_closed_forms() {
        let eta = DynamicsVector::at_base(vec![1.0, 2.0], 0.1).unwrap();
        assert_eq!(normalize_dynamics(&eta), vec![0.0, 0.0]);
        let eta = DynamicsVector::new(vec![1.05], vec![1.0], 0.1).unwrap();
        assert!((normalize_dynamics(&eta)[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn chunk_counts_drop_remainder() {
        assert_eq!(chunk_episode(&episode(150), 50).unwrap().len(), 3);
        assert_eq!(chunk_episode(&episode(49), 50).unwrap().len(), 0);
        let chunks = chunk_episode(&episode(120), 50).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[1].y.last().unwrap(), &vec![100.0]);
        assert!(chunk_episode(&episode(0), 50).unwrap().is_empty());
        assert!(chunk_episode(&episode(10), 0).is_err());
    }

    #[test]
    fn episode_continuity_is_checked() {
        let mut ep = episode(3);
        assert!(ep.validate().is_ok());
        ep.transitions[1].obs = vec![42.0];
        assert!(ep.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let eps = vec![episode(4), episode(2)];
        let mut buf = Vec::new();
        write_episodes_jsonl(&mut buf, &eps).unwrap();
        let back = read_episodes_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, eps);
    }

    #[test]
    fn gaussian_log_prob_closed_form() {
        let g = DiagGaussian::new(vec![0.0], vec![1.0]).unwrap();
        assert!((g.log_prob(&[0.0]) + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn identical_streams_draw_identically() {
        let mut a = SeededRng::stream(5, streams::ROLLOUT, 9);
        let mut b = SeededRng::stream(5, streams::ROLLOUT, 9);
        let mut c = SeededRng::stream(5, streams::ROLLOUT, 10);
        let xa: Vec<f64> = (0..8).map(|_| a.normal()).collect();
        let xb: Vec<f64> = (0..8).map(|_| b.normal()).collect();
        let xc: Vec<f64> = (0..8).map(|_| c.normal()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }
}
