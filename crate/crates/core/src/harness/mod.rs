//! Experiment configuration, fold preparation, model fitting and reporting.

pub mod config;
pub mod data;
pub mod explain;
pub mod fit;
pub mod report;
pub mod run;

pub use config::{DataSource, ExperimentConfig, ExplainConfig, ModelKind, ModelSpec, ParamSpace};
pub use data::{load_data, split_years, FoldData, FoldYears, RawData};
pub use explain::ExplainMethod;
pub use fit::{fit_model, ModelResult};
pub use report::{report, SkillTable};
pub use run::{evaluate_run, explain_run, load_run, run_experiment, run_with_data, RunManifest, RunOutput};
