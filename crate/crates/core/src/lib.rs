//! Hesitation-triggered differential calibration for candidate-constrained
//! decoding.
//!
//! The engine is generic over the scalar type (`f32` or `f64`). Types
//! default to `f64`; the `*F32` aliases below name the single-precision
//! variants.

// `!(x > 0)` style checks are deliberate: NaN has to fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod calibration;
pub mod candidates;
pub mod error;
pub mod hesitation;
pub mod numerics;
pub mod scalar;
pub mod sidecar;

pub use backend::trace::{
    load_trace, validate_trace, validate_trace_bytes, StoredTokenPolicy, TraceHeader, TraceWriter,
};
pub use backend::{
    default_sampled_layers, greedy_prefix, last_k_layers, Backend, BranchKind, CountingBackend, DecodeState,
    StepLogits, SyntheticBackend, SyntheticScenario, TraceBackend, DEFAULT_SIGMA_NOISE,
};
pub use calibration::{
    apply_apc, calibrate, decode_step, differential_signals, select_with_hysteresis, CalibrationParams,
    DecodeStepResult, DifferentialSignals, EngineConfig, GateMode, HysteresisMode,
};
pub use candidates::{log_probs, score_candidates, AggMode, Candidate, CandidateScores, CandidateSet};
pub use error::{Error, Result};
pub use hesitation::{
    build_keyword_set, compute_step_hesitation, gate_weight, hesitation_score, keyword_distribution, layer_hesitation,
    HesitationConfig, HesitationReport, KeywordSet, LayerUpdateState,
};
pub use scalar::Scalar;
pub use sidecar::{verify_against_sidecar, Sidecar, VerifyReport};

pub type StepLogitsF32 = StepLogits<f32>;
pub type CandidateScoresF32 = CandidateScores<f32>;
pub type HesitationConfigF32 = HesitationConfig<f32>;
pub type HesitationReportF32 = HesitationReport<f32>;
pub type CalibrationParamsF32 = CalibrationParams<f32>;
pub type EngineConfigF32 = EngineConfig<f32>;
pub type DecodeStepResultF32 = DecodeStepResult<f32>;
