//! Routing diagnostics computed from routing logs and checkpoints.

pub mod log;
pub mod metrics;
pub mod report;

pub use log::{LogHeader, RoutingLog};
pub use metrics::{
    eae, eae_log, eca, expert_change_rate, expert_similarity, ewa, ewa_log, margin, router_margin,
    router_saturation, selection_counts, EcaMatrix, LayerValues, Similarity,
};
pub use report::{MetricReport, Scope};
