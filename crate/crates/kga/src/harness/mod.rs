//! Experiment orchestration: configuration files, the per-seed pipeline
//! (data → original model → split → retraining oracle → unlearning method
//! → metrics), experiment presets, and report emission.
//!
//! Every stage draws its randomness from the run seed through named
//! streams, so re-running any stage reproduces exactly what a full run saw,
//! and two invocations with the same config produce byte-identical
//! canonical reports. Wall-clock timings are recorded separately and never
//! enter the canonical bytes.

mod config;
mod experiment;
mod presets;
mod report;

pub use config::{
    load_config, parse_config, DataConfig, ExperimentConfig, Method, MetricsConfig, ModelConfig, Overrides,
    SynthSizes, TaskKind,
};
pub use experiment::{
    attack_nonmembers, build_attacker, build_corpora, evaluate_run, generation_scores, load_seed, mia_over_run,
    persist_seed, resolve_arch, run_experiment, run_seed, Corpora, LoadedSeed, SeedArtifacts, UnlearnedModel,
};
pub use presets::{preset, Preset, PresetOverrides};
pub use report::{
    emit_report, emit_sweep, MetricsReport, ModelRole, ReportBundle, ReportFormat, SeedOutcome, SeedRow,
    SplitMetrics,
};
