//! Pipeline configuration and the cross-validated experiment runner.

mod config;
mod experiment;
mod features;

pub use config::{
    ConfigError, CvConfig, FcConfig, IcnConfig, IcnScope, LassoConfig, PathsConfig, PipelineConfig,
    SensitivityConfig,
};
pub use experiment::{
    aggregate, results_table, run_experiment, run_fold, write_predictions_csv, write_results_csv,
    Aggregate, ExperimentError, ExperimentResult, FeatureKind, FittedModel, FoldFeatures,
    FoldInput, FoldOutcome, ModelKind, Provenance, RESULTS_HEADER,
};
pub use features::{icn_features, nmf_params, IcnFeatures};
