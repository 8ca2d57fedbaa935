//! Guided selective prediction.
//!
//! A classifier gets up to five attempts at each test instance: an unguided
//! prediction (stage 0) and four guided ones. It answers at the first stage
//! whose confidence clears a threshold and abstains otherwise. This crate
//! runs that cascade over recorded per-stage predictions, sweeps the
//! threshold to build stage-wise risk-coverage curves, and reports their
//! area and the improvement over stage 0. A seeded simulator produces record
//! sets with known ground truth.

pub mod cascade;
pub mod confidence;
pub mod ensemble;
pub mod metrics;
pub mod record;
pub mod simulator;

pub use cascade::{cascade_matrix, default_grid, run_cascade, CascadeOutcome, GridPolicy, ThresholdGrid};
pub use confidence::{bucketed_accuracy, max_prob, ConfidenceBucket, ProbVector};
pub use ensemble::aggregate_variants;
pub use metrics::{auc, evaluate, improvement, risk_coverage_curve, RiskCoveragePoint, StageReport};
pub use record::{parse_records, validate, write_records, InstanceRecord, Label, LabelSpace, RecordSet, StageOutput};
pub use simulator::{ground_truth_summary, simulate, SimConfig};
