//! Optimization, learning-rate schedules, synthetic data, the training and
//! evaluation loops, and compute benchmarks.

pub mod adam;
pub mod bench;
pub mod model;
pub mod schedule;
pub mod synth;
pub mod trainer;

pub use bench::{bench_frontend, bench_latency, count_flops, count_params, matmul_flops, BenchReport, LatencyStats};
pub use adam::{clip_global_norm, global_norm, Adam, AdamConfig};
pub use schedule::{lr_conformer, lr_finetune, lr_transformer, LrSchedule, ScheduleKind};
pub use synth::{gen_synthetic, rule_decode, write_dataset, SynthConfig, SynthItem, SyntheticAvExample};
pub use model::{AvsrModel, Modality, ModelConfig, ModelInput};
pub use trainer::{
    derive_seed, list_checkpoints, load_params, model_from_checkpoint, AugmentConfig, Batch, DataConfig, DataSource,
    RunConfig, StepRecord, TrainReport, Trainer, METRICS_HEADER,
};
