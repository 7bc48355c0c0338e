//! Simulation core for studying federated learning under breast-density
//! heterogeneity.
//!
//! The crate is organised around the pipeline it supports:
//!
//! * [`synthdata`] generates density-attributed synthetic mammography
//!   cohorts and performs every split used downstream (dev/test, k-fold,
//!   client partitions, patch extraction).
//! * [`nnet`] holds the two toy convolutional classifiers (patch and
//!   whole-image) with hand-written backpropagation.
//! * [`fedcore`] runs FedAvg, FedProx and SCAFFOLD, plus the centralized,
//!   local-only, ensemble and model-soup baselines.
//! * [`evalstats`] implements the evaluation protocol: accuracy, binary and
//!   multiclass AUC-ROC, paired bootstrap, exact Wilcoxon signed-rank tests
//!   and significance grouping.

pub mod evalstats;
pub mod fedcore;
pub mod nnet;
pub mod rng;
pub mod synthdata;

pub use evalstats::{MetricKind, MetricResult, PredictionSet};
pub use fedcore::{Algorithm, FlConfig, TrainingHistory};
pub use nnet::{Batch, ModelKind, ModelSpec, ParamVector};
pub use synthdata::{Cohort, Density, GeneratorConfig, PatientRecord};
