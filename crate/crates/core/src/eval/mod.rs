//! Ranking metrics, long-tail analysis, the ablation harness and gradient checks.

pub mod ablation;
pub mod gradcheck;
pub mod metrics;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use metrics::{evaluate_rankings, herb_frequency, longtail_groups, metrics_at_k, top_k, GroupReport, LongTailGroups, MetricsAtK, MetricsReport, DEFAULT_KS};
pub use ablation::{ablation_run, split_hash, AblationOptions, AblationRow, AblationTable};
