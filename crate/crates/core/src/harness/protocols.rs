//! Multi-seed comparison protocols: regulariser ablation, range sweep and
//! motor-noise evaluation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::pipeline::{EvalReport, Experiment};
use crate::dcp::DcpConfig;
use crate::envs::MotorSettings;
use crate::error::{config_err, Result};
use crate::ppo::mean_std;

/// Policy variants compared by the ablation; they differ only in the
/// auxiliary weights and the dynamics encoding switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoReg,
    OnlyInv,
    OnlyRec,
    Ff,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoReg, Variant::OnlyInv, Variant::OnlyRec, Variant::Ff];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoReg => "no_reg",
            Variant::OnlyInv => "only_inv",
            Variant::OnlyRec => "only_rec",
            Variant::Ff => "ff",
        }
    }

    /// `base` with this variant's flags; the weights of `base` are the
    /// ones switched on.
    pub fn apply(self, base: &DcpConfig) -> DcpConfig {
        let (inv, rec, eta) = match self {
            Variant::Full => (base.w_inv, base.w_rec, true),
            Variant::NoReg => (0.0, 0.0, true),
            Variant::OnlyInv => (base.w_inv, 0.0, true),
            Variant::OnlyRec => (0.0, base.w_rec, true),
            Variant::Ff => (0.0, 0.0, false),
        };
        DcpConfig { w_inv: inv, w_rec: rec, use_eta_encoding: eta, ..base.clone() }
    }
}

fn seeds(cfg: &ExperimentConfig) -> Result<Vec<u64>> {
    if cfg.protocol.n_seeds == 0 {
        return Err(config_err("protocol.n_seeds must be >= 1"));
    }
    Ok((0..cfg.protocol.n_seeds as u64).map(|s| cfg.seed + s).collect())
}

fn with_variant(cfg: &ExperimentConfig, v: Variant) -> ExperimentConfig {
    ExperimentConfig { policy: v.apply(&cfg.policy), ..cfg.clone() }
}

/// Trains the estimator and every requested variant for one seed and
/// evaluates them on the same test environments.
pub fn train_and_evaluate(cfg: &ExperimentConfig, variants: &[Variant], seed: u64) -> Result<Vec<EvalReport>> {
    let base = Experiment::new(cfg.clone())?;
    let episodes = base.sysid_training_episodes(seed)?;
    let (model, sysid) = base.train_sysid(&episodes, seed, None)?;
    variants
        .iter()
        .map(|&v| {
            let exp = Experiment::new(with_variant(cfg, v))?;
            let policy = exp.train_policy(seed, None)?;
            let report = exp.evaluate_zero_shot(&policy.params, &model, &sysid.params, seed)?;
            info!("seed {seed} {}: zero-shot {:.3}", v.name(), report.zero_shot_mean);
            Ok(report)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub n_seeds: usize,
    /// Mean over seeds of the per-seed mean zero-shot reward.
    pub zero_shot_mean: f64,
    /// Std over seeds.
    pub zero_shot_std: f64,
    pub oracle_mean: f64,
    pub base_mean: f64,
    pub per_seed: Vec<f64>,
}

pub fn run_ablation_suite(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let seeds = seeds(cfg)?;
    let mut reports: Vec<Vec<EvalReport>> = vec![Vec::new(); Variant::ALL.len()];
    for &seed in &seeds {
        for (i, r) in train_and_evaluate(cfg, &Variant::ALL, seed)?.into_iter().enumerate() {
            reports[i].push(r);
        }
    }
    let rows: Vec<AblationRow> = Variant::ALL
        .iter()
        .zip(&reports)
        .map(|(&variant, reps)| {
            let per_seed: Vec<f64> = reps.iter().map(|r| r.zero_shot_mean).collect();
            let (zero_shot_mean, zero_shot_std) = mean_std(&per_seed);
            AblationRow {
                variant,
                n_seeds: seeds.len(),
                zero_shot_mean,
                zero_shot_std,
                oracle_mean: mean_std(&reps.iter().map(|r| r.oracle_mean).collect::<Vec<_>>()).0,
                base_mean: mean_std(&reps.iter().map(|r| r.base_mean).collect::<Vec<_>>()).0,
                per_seed,
            }
        })
        .collect();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(fs::File::create(dir.join("ablation.csv"))?);
        writeln!(f, "variant,n_seeds,zero_shot_mean,zero_shot_std,oracle_mean,base_mean")?;
        for r in &rows {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                r.variant.name(),
                r.n_seeds,
                r.zero_shot_mean,
                r.zero_shot_std,
                r.oracle_mean,
                r.base_mean
            )?;
        }
        f.flush()?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub range_frac: f64,
    pub n_seeds: usize,
    pub full_mean: f64,
    pub full_std: f64,
    pub ff_mean: f64,
    pub ff_std: f64,
    /// `full − ff`, per seed, then mean and std.
    pub gap_mean: f64,
    pub gap_std: f64,
}

/// Full train and evaluation at every range, with matched train and test
/// ranges.
pub fn run_range_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    let seeds = seeds(cfg)?;
    let mut rows = Vec::new();
    for &range in &cfg.protocol.sweep_ranges {
        let mut c = cfg.clone();
        c.env.range_frac = range;
        c.eval.test_range_frac = None;
        let (mut full, mut ff) = (Vec::new(), Vec::new());
        for &seed in &seeds {
            let reps = train_and_evaluate(&c, &[Variant::Full, Variant::Ff], seed)?;
            full.push(reps[0].zero_shot_mean);
            ff.push(reps[1].zero_shot_mean);
        }
        let gaps: Vec<f64> = full.iter().zip(&ff).map(|(a, b)| a - b).collect();
        let (full_mean, full_std) = mean_std(&full);
        let (ff_mean, ff_std) = mean_std(&ff);
        let (gap_mean, gap_std) = mean_std(&gaps);
        rows.push(SweepRow { range_frac: range, n_seeds: seeds.len(), full_mean, full_std, ff_mean, ff_std, gap_mean, gap_std });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(fs::File::create(dir.join("range_sweep.csv"))?);
        writeln!(f, "range_frac,n_seeds,full_mean,full_std,ff_mean,ff_std,gap_mean,gap_std")?;
        for r in &rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                r.range_frac, r.n_seeds, r.full_mean, r.full_std, r.ff_mean, r.ff_std, r.gap_mean, r.gap_std
            )?;
        }
        f.flush()?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    /// `known` or `unknown` feature network.
    pub tau: String,
    pub k: f64,
    /// `noise` (conditions on estimated `K·ω̂`) or `no_noise` (same noisy
    /// training, dynamics-only conditioning).
    pub variant: String,
    pub n_seeds: usize,
    /// Number of pooled (seed, test environment) rewards.
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub sem: f64,
}

/// Compares two policies trained with motor noise of multiplier
/// `max(k_values)`: one conditioned on estimated motor weights, one on the
/// dynamics only. Tested under the training feature network and an unseen
/// one.
pub fn run_noise_eval(cfg: &ExperimentConfig, k_values: &[f64], out: Option<&Path>) -> Result<Vec<NoiseRow>> {
    if k_values.is_empty() || k_values.iter().any(|k| !(*k >= 0.0)) {
        return Err(config_err("noise evaluation needs non-negative multipliers"));
    }
    let seeds = seeds(cfg)?;
    let motor = cfg.env.motor.clone().unwrap_or_default();
    let k_train = k_values.iter().cloned().fold(0.0, f64::max);
    let mut noisy = cfg.clone();
    noisy.env.motor = Some(MotorSettings { k: k_train, ..motor.clone() });
    noisy.protocol.noise_mode = true;
    // Same noisy training environments, but no motor weights in the
    // conditioning vector and none estimated.
    let mut plain = noisy.clone();
    plain.protocol.noise_mode = false;

    let settings: Vec<(&str, u64)> = vec![("known", motor.tau_seed), ("unknown", cfg.protocol.unknown_tau_seed)];
    // [setting][k][variant] → pooled per-environment zero-shot rewards.
    let mut pooled = vec![vec![[Vec::new(), Vec::new()]; k_values.len()]; settings.len()];
    for &seed in &seeds {
        let mut trained = Vec::new();
        for c in [&noisy, &plain] {
            let exp = Experiment::new(c.clone())?;
            let episodes = exp.sysid_training_episodes(seed)?;
            let (model, sysid) = exp.train_sysid(&episodes, seed, None)?;
            let policy = exp.train_policy(seed, None)?;
            trained.push((exp, model, sysid.params, policy.params));
        }
        for (si, &(_, tau_seed)) in settings.iter().enumerate() {
            for (ki, &k) in k_values.iter().enumerate() {
                let test_motor = MotorSettings { k, tau_seed, ..motor.clone() };
                for (vi, (exp, model, sysid, policy)) in trained.iter().enumerate() {
                    let exp = exp.clone().with_test_motor(Some(test_motor.clone()));
                    let report = exp.evaluate_zero_shot(policy, model, sysid, seed)?;
                    pooled[si][ki][vi].extend(report.zero_shot());
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (si, &(tau, _)) in settings.iter().enumerate() {
        for (ki, &k) in k_values.iter().enumerate() {
            for (vi, variant) in ["noise", "no_noise"].iter().enumerate() {
                let xs = &pooled[si][ki][vi];
                let (mean, std) = mean_std(xs);
                rows.push(NoiseRow {
                    tau: tau.to_string(),
                    k,
                    variant: variant.to_string(),
                    n_seeds: seeds.len(),
                    n: xs.len(),
                    mean,
                    std,
                    sem: std / (xs.len() as f64).sqrt(),
                });
            }
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(fs::File::create(dir.join("noise_eval.csv"))?);
        writeln!(f, "tau,k,variant,n_seeds,n,mean,std,sem")?;
        for r in &rows {
            writeln!(f, "{},{},{},{},{},{},{},{}", r.tau, r.k, r.variant, r.n_seeds, r.n, r.mean, r.std, r.sem)?;
        }
        f.flush()?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_differ_only_in_flags() {
        let base = DcpConfig::default();
        for v in Variant::ALL {
            let c = v.apply(&base);
            let normalised = DcpConfig { w_inv: base.w_inv, w_rec: base.w_rec, use_eta_encoding: true, ..c.clone() };
            assert_eq!(normalised, base, "{}", v.name());
        }
        let ff = Variant::Ff.apply(&base);
        assert_eq!((ff.w_inv, ff.w_rec, ff.use_eta_encoding), (0.0, 0.0, false));
    }
}
