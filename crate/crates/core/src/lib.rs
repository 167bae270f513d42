//! Risk-controlled decision guidance for multi-label classification.
//!
//! The pipeline has three steps. A fixed classifier's scores are turned into
//! prediction sets whose false-negative rate is bounded by conformal risk
//! control ([`riskcontrol`], [`operating_point`]). A vision-language model then
//! writes arguments for and against each flagged label ([`guidance`]). Finally
//! a reviewer, simulated or human, keeps or drops each flagged label
//! ([`decision`], [`api`]); unflagged labels stay absent. [`evaluation`]
//! compares the resulting decisions across pipeline configurations.

pub mod api;
pub mod decision;
pub mod endpoint;
pub mod error;
pub mod evaluation;
pub mod guidance;
pub mod ingestion;
pub mod jsonl;
pub mod operating_point;
pub mod pipeline;
pub mod provenance;
pub mod riskcontrol;

pub use error::{Error, Result};
pub use ingestion::{CaseEntry, CaseManifest, Dataset, LabelMatrix, LabelSchema, ScoreMatrix, Split};
pub use riskcontrol::{CalibrationResult, FalseNegativeRate, LambdaGrid, PredictionSet, SetLoss};
