//! Experiment orchestration: configuration, pipelines and protocols.

pub mod config;
pub mod pipeline;
pub mod protocols;

pub use config::{EnvConfig, EvalConfig, ExperimentConfig, ProtocolConfig};
pub use pipeline::{
    collect_offpolicy, read_jsonl, read_jsonl_dir, write_finetune_csv, write_jsonl, EvalReport, EvalRow, Experiment,
    FinetuneOutput, OffPolicy,
};
pub use protocols::{
    run_ablation_suite, run_noise_eval, run_range_sweep, train_and_evaluate, AblationRow, NoiseRow, SweepRow, Variant,
};
