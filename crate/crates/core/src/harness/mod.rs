//! Persistence, staged training, evaluation and the streaming pipeline.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod nav;
pub mod pipeline;
pub mod probe;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
pub use config::{PipelineConfig, Preset, StageConfig, TrainConfig};
pub use dataset::{Dataset, DatasetManifest, SampleRecord, Split};
pub use eval::{evaluate, EvalTable};
pub use nav::{eval_navigation_metrics, NavMetrics};
pub use pipeline::{run_log, Pipeline, RecordedLog, TraceRow};
pub use probe::{probe_classify, probe_classify_with, probe_fit_eval, ProbeConfig, ProbeReport};
pub use train::{train_all, train_stage, Models, StageReport, TrainPlan};
