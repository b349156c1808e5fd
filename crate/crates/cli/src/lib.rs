//! Configuration, synthetic data and the staged pipeline behind the
//! `skilledit` binary.

pub mod config;
pub mod pipeline;
pub mod synth;

pub use config::{RunConfig, Seeds};
pub use pipeline::{run_pipeline, run_sweep, MetricsReport, RunDir, SweepEntry};
pub use synth::{synth_generate, SynthCorpus, SyntheticTechniqueSpec};
