//! Reliability harness for visual question answering with chain-of-thought
//! reasoning: corpus ingestion, question-type taxonomy, CoT templates, chat
//! backends, direct and multi-step reasoning, false-positive detection,
//! template refinement and scoring.

pub mod backend;
pub mod corpus;
pub mod cot;
pub mod fpdetect;
pub mod metrics;
pub mod reasoner;
pub mod refine;
pub mod scalar;
pub mod taxonomy;

pub use scalar::Scalar;

/// Run summary at double precision.
pub type Metrics = metrics::RunMetrics<f64>;
pub type Accuracy = metrics::Accuracy<f64>;
pub type TypeAccuracy = metrics::TypeAccuracy<f64>;
pub type DifficultyReport = metrics::DifficultyReport<f64>;
pub type SummaryRow = metrics::SummaryRow<f64>;
