//! Causal Healthcare Embedding (CHE): HSIC-driven sample weighting that
//! decorrelates the diagnosis and procedure streams of sequential
//! next-diagnosis predictors.
//!
//! The crate contains the differentiation engine ([`tensor`]), the two-stream
//! encoders ([`encoders`]), the dimension-wise HSIC estimator ([`hsic`]), the
//! alternating trainer ([`trainer`]), the permutation-weighting comparator
//! ([`pw`]), a synthetic cohort generator ([`synth`]), ranking metrics and
//! probes ([`metrics`]), gradient attributions ([`attribution`]) and the
//! experiment drivers used by the command-line tool ([`experiment`]).

pub mod attribution;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod hsic;
pub mod metrics;
pub mod pw;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use checkpoint::Checkpoint;
pub use data::{CodeVocab, PatientRecord, PredictionPoint, Visit};
pub use encoders::{Dims, Model, ModelKind};
pub use error::{Error, Result};
pub use hsic::{HsicConfig, SigmaPolicy};
pub use metrics::{EvalResult, Scorer};
pub use synth::{CausalSpec, Cohort, GeneratorConfig, Split};
pub use tensor::{Graph, Tensor, TensorError, Var};
pub use trainer::{Method, TrainConfig, TrainState};
pub use weights::SampleWeightTable;
