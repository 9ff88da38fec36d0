use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dynacon::domain::{streams, SeededRng};
use dynacon::envs::Env;
use dynacon::harness::{
    collect_offpolicy, read_jsonl_dir, run_ablation_suite, run_noise_eval, run_range_sweep, write_finetune_csv,
    write_jsonl, Experiment, ExperimentConfig, OffPolicy,
};
use dynacon::sysid::{load_sysid, PosteriorFile};

#[derive(Parser)]
#[command(name = "dynacon", version, about = "Train and evaluate dynamics-conditioned policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading config {}", self.config.display()))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Dynamics-randomised PPO training; writes a checkpoint directory.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Records off-policy episodes as JSONL.
    CollectOffpolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
        /// First environment index of the split.
        #[arg(long, default_value_t = 0)]
        first: u64,
        /// Number of environments [default: eval.sysid_train_envs for train, 1 for test].
        #[arg(long)]
        envs: Option<u64>,
        /// Episodes per environment [default: eval.sysid_train_episodes for train,
        /// eval.offpolicy_episodes for test].
        #[arg(long)]
        episodes: Option<usize>,
        /// Use the mean action of this policy checkpoint, conditioned on the
        /// base dynamics, instead of uniform random actions.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Fits the estimator on labelled off-policy episodes.
    TrainSysid {
        #[command(flatten)]
        common: Common,
        /// JSONL file or directory of JSONL files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Posterior over the dynamics of one environment's episodes.
    Estimate {
        /// Estimator checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot evaluation on unseen test environments; writes a metrics CSV.
    EvaluateZeroShot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        sysid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continues training in one test environment; writes the reward curve.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        sysid: PathBuf,
        #[arg(long, default_value_t = 0)]
        env_index: u64,
        /// [default: eval.finetune_episodes]
        #[arg(long)]
        episodes: Option<usize>,
        /// Reward-curve CSV.
        #[arg(long)]
        out: PathBuf,
        /// Also save the fine-tuned parameters here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compares the full model with its ablated variants over seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full and feed-forward variants at every configured range.
    SweepRanges {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Motor-noise comparison across noise multipliers.
    NoiseEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated multipliers [default: protocol.noise_k_values].
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<f64>>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse().command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainPolicy { common, out } => {
            let cfg = common.load()?;
            let exp = Experiment::new(cfg.clone())?;
            let result = exp.train_policy(cfg.seed, Some(&out))?;
            let last = result.curve.last().map_or(f64::NAN, |r| r.mean_reward);
            println!("trained {} iterations, last mean reward {last:.4}", result.curve.len());
            println!("checkpoint {} ({})", out.display(), result.params.checksum());
        }
        Command::CollectOffpolicy { common, out, split, first, envs, episodes, policy } => {
            let cfg = common.load()?;
            let exp = Experiment::new(cfg.clone())?;
            let (sampler, purpose, default_envs, default_eps) = match split {
                Split::Train => (
                    exp.train_sampler(cfg.seed),
                    streams::OFFPOLICY,
                    cfg.eval.sysid_train_envs as u64,
                    cfg.eval.sysid_train_episodes,
                ),
                Split::Test => (exp.test_sampler(cfg.seed), streams::TEST_OFFPOLICY, 1, cfg.eval.offpolicy_episodes),
            };
            let params = policy.as_deref().map(|p| exp.load_policy(p)).transpose()?;
            let cond = exp.conditioning_from_estimate(&base_estimate(&exp));
            let off = match &params {
                Some(p) => OffPolicy::Checkpoint { dcp: &exp.dcp, params: p, cond: &cond },
                None => OffPolicy::Random,
            };
            let mut all = Vec::new();
            for i in first..first + envs.unwrap_or(default_envs) {
                let env = Env::new(sampler.env(i)?)?;
                let mut rng = SeededRng::stream(cfg.seed, purpose, i);
                all.extend(collect_offpolicy(&env, i + 1, episodes.unwrap_or(default_eps), &off, &mut rng)?);
            }
            write_jsonl(&out, &all)?;
            println!("wrote {} episodes to {}", all.len(), out.display());
        }
        Command::TrainSysid { common, data, out } => {
            let cfg = common.load()?;
            let exp = Experiment::new(cfg.clone())?;
            let episodes = read_jsonl_dir(&data).with_context(|| format!("reading {}", data.display()))?;
            if episodes.is_empty() {
                bail!("no episodes found in {}", data.display());
            }
            let (_, result) = exp.train_sysid(&episodes, cfg.seed, Some(&out))?;
            let last = result.curve.last().map_or(f64::NAN, |r| r.loss);
            println!("trained {} steps, last loss/transition {last:.4}", result.curve.len());
            println!("checkpoint {} ({})", out.display(), result.params.checksum());
        }
        Command::Estimate { model, data, out } => {
            let (model, params) = load_sysid(&model).with_context(|| format!("loading {}", model.display()))?;
            let episodes = read_jsonl_dir(&data)?;
            let est = model.estimate(&params, &episodes)?;
            write_json(&out, &PosteriorFile::from(&est))?;
            println!("posterior mean {:?}, std {:?} from {} chunks", est.posterior.mean, est.posterior.std, est.k_used);
        }
        Command::EvaluateZeroShot { common, policy, sysid, out } => {
            let cfg = common.load()?;
            let exp = Experiment::new(cfg.clone())?;
            let params = exp.load_policy(&policy)?;
            let (model, sysid_params) = load_sysid(&sysid)?;
            let report = exp.evaluate_zero_shot(&params, &model, &sysid_params, cfg.seed)?;
            ensure_parent(&out)?;
            report.write_csv(&out)?;
            println!(
                "zero-shot {:.4}, oracle {:.4}, base {:.4} over {} environments ({} skipped)",
                report.zero_shot_mean,
                report.oracle_mean,
                report.base_mean,
                report.rows.len(),
                report.skipped.len()
            );
        }
        Command::Finetune { common, policy, sysid, env_index, episodes, out, checkpoint } => {
            let cfg = common.load()?;
            let exp = Experiment::new(cfg.clone())?;
            let params = exp.load_policy(&policy)?;
            let (model, sysid_params) = load_sysid(&sysid)?;
            let n = episodes.unwrap_or(cfg.eval.finetune_episodes);
            let result = exp.finetune(&params, &model, &sysid_params, env_index, n, cfg.seed)?;
            ensure_parent(&out)?;
            write_finetune_csv(&out, &result.curve)?;
            if let Some(dir) = checkpoint {
                result.params.save(&dir, "policy")?;
                exp.save_policy_meta(&dir)?;
            }
            println!("fine-tuned {n} episodes in test environment {env_index}");
        }
        Command::Ablate { common, out } => {
            for r in run_ablation_suite(&common.load()?, Some(&out))? {
                println!("{:<9} {:>10.4} ± {:.4}", r.variant.name(), r.zero_shot_mean, r.zero_shot_std);
            }
        }
        Command::SweepRanges { common, out } => {
            for r in run_range_sweep(&common.load()?, Some(&out))? {
                println!("range {:<5} gap {:>9.4} ± {:.4}", r.range_frac, r.gap_mean, r.gap_std);
            }
        }
        Command::NoiseEval { common, out, k } => {
            let cfg = common.load()?;
            let k = k.unwrap_or_else(|| cfg.protocol.noise_k_values.clone());
            for r in run_noise_eval(&cfg, &k, Some(&out))? {
                println!("{:<8} K={:<4} {:<9} {:>10.4} ± {:.4}", r.tau, r.k, r.variant, r.mean, r.sem);
            }
        }
    }
    Ok(())
}

/// The base dynamics followed by zero motor weights.
fn base_estimate(exp: &Experiment) -> Vec<f64> {
    let mut v = exp.config.env.base();
    v.extend(std::iter::repeat_n(0.0, exp.motor_slots));
    v
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &PosteriorFile) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

