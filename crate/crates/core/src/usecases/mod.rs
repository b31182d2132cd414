//! Applications of per-example performance estimates.

pub mod offload;
pub mod posthoc;
pub mod sample_complexity;
pub mod selection;
pub mod shift;

pub use offload::{offload_scores, threshold_for_fraction, OffloadPredictor, OffloadScoreSet, SweepPoint};
pub use posthoc::{Estimator, FeaturePipeline, PipelineSpec, PosthocModel, TrainSpec};
pub use sample_complexity::{sample_complexity, SampleComplexityConfig, SampleComplexityRow};
pub use selection::{ModelSelector, SelectionResult};
pub use shift::{dataset_shift_pipeline, ShiftConfig, ShiftReport};
