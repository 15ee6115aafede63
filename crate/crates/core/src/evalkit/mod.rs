//! Frozen-feature evaluation: clip features, MLP probes, metrics and the
//! aggregated score.

pub mod features;
pub mod probe;
pub mod score;

pub use features::{extract_features, read_features, write_features, FeatureExtractor, FeatureVector};
pub use probe::{eval_probe, train_probe, Labels, LossMode, Metric, Probe, ProbeConfig};
pub use score::{aggregate_score, MetricRow, ScoreTable};
