//! Evaluation metrics computed in the toy embedder's space.
//!
//! Every function here is pure: equal inputs give bit-identical outputs.

mod error;
mod report;
mod scores;

pub use error::{MetricsError, Result};
pub use report::{read_metrics_csv, write_metrics_csv, write_metrics_json, MetricsReport};
pub use scores::{
    clap_score, diversity_std, evaluate_samples, frechet_distance, inception_score, kld_metric, Diversity,
    SampleMetrics, KLD_EPSILON,
};
