//! Probe-based differential calibration and output selection.
//!
//! A decode step runs the full branch, scores hesitation, and only when the
//! gate opens runs the two probes. Differential signals are the drop in
//! candidate support when visual evidence (`V0`) or query semantics (`X0`)
//! is removed; the calibrated score adds their weighted sum to the
//! full-branch score:
//!
//! ```text
//! d_v(c) = s_full(c) - s_v0(c)
//! d_x(c) = s_full(c) - s_x0(c)
//! s'(c)  = s_full(c) + w * (lambda_v * d_v(c) + lambda_x * d_x(c))
//! ```
//!
//! Selection respects the plausibility constraint (a candidate needs at
//! least one token in the full branch's top-K) and only moves away from the
//! full-branch winner when the challenger clears it by `epsilon`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BranchKind, DecodeState};
use crate::candidates::{log_probs, score_candidates, CandidateScores, CandidateSet};
use crate::error::{Error, Result};
use crate::hesitation::{compute_step_hesitation, HesitationConfig, HesitationReport};
use crate::numerics::top_k_indices;
use crate::scalar::Scalar;

/// When probes run and what weight multiplies the differential term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Probe only when `w_t > w_min`; weight the calibration by `w_t`.
    #[default]
    HardThenSoft,
    /// Probe every step; weight the calibration by `w_t`.
    SoftOnly,
    /// Probe every step with weight 1, ignoring hesitation.
    Static,
}

/// Reference score the challenger must beat by `epsilon`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HysteresisMode {
    /// The full-branch winner's calibrated score.
    #[default]
    CalibratedScale,
    /// The full-branch winner's uncalibrated score.
    MixedScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams<S = f64> {
    pub lambda_v: S,
    pub lambda_x: S,
    pub apc_top_k: usize,
    pub hysteresis_epsilon: S,
    #[serde(default)]
    pub gate_mode: GateMode,
    #[serde(default)]
    pub hysteresis_mode: HysteresisMode,
}

impl<S: Scalar> Default for CalibrationParams<S> {
    fn default() -> Self {
        Self {
            lambda_v: S::one(),
            lambda_x: S::one(),
            apc_top_k: 200,
            hysteresis_epsilon: S::of(0.05),
            gate_mode: GateMode::HardThenSoft,
            hysteresis_mode: HysteresisMode::CalibratedScale,
        }
    }
}

impl<S: Scalar> CalibrationParams<S> {
    pub fn validate(&self) -> Result<()> {
        if self.apc_top_k == 0 {
            return Err(Error::config("apc_top_k must be at least 1"));
        }
        if !(self.hysteresis_epsilon >= S::zero()) || !self.hysteresis_epsilon.is_finite() {
            return Err(Error::config(format!(
                "hysteresis_epsilon must be finite and >= 0, got {}",
                self.hysteresis_epsilon
            )));
        }
        if !self.lambda_v.is_finite() || !self.lambda_x.is_finite() {
            return Err(Error::config("calibration lambdas must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig<S = f64> {
    pub hesitation: HesitationConfig<S>,
    pub calibration: CalibrationParams<S>,
}

impl<S: Scalar> EngineConfig<S> {
    pub fn with_layers(sampled_layers: Vec<usize>) -> Self {
        Self {
            hesitation: HesitationConfig::with_layers(sampled_layers),
            calibration: CalibrationParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hesitation.validate()?;
        self.calibration.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferentialSignals<S = f64> {
    pub labels: Vec<String>,
    pub d_v: Vec<S>,
    pub d_x: Vec<S>,
}

pub fn differential_signals<S: Scalar>(
    s_full: &CandidateScores<S>,
    s_v0: &CandidateScores<S>,
    s_x0: &CandidateScores<S>,
) -> Result<DifferentialSignals<S>> {
    s_full.check_aligned(s_v0)?;
    s_full.check_aligned(s_x0)?;
    let diff = |other: &CandidateScores<S>| -> Vec<S> {
        s_full.scores.iter().zip(&other.scores).map(|(&f, &o)| f - o).collect()
    };
    Ok(DifferentialSignals {
        labels: s_full.labels.clone(),
        d_v: diff(s_v0),
        d_x: diff(s_x0),
    })
}

/// Calibrated scores. A zero weight or zero lambdas return `s_full` exactly.
pub fn calibrate<S: Scalar>(
    s_full: &CandidateScores<S>,
    signals: &DifferentialSignals<S>,
    w: S,
    params: &CalibrationParams<S>,
) -> CandidateScores<S> {
    debug_assert_eq!(s_full.labels, signals.labels);
    if w == S::zero() || (params.lambda_v == S::zero() && params.lambda_x == S::zero()) {
        return s_full.clone();
    }
    let scores = s_full
        .scores
        .iter()
        .zip(signals.d_v.iter().zip(&signals.d_x))
        .map(|(&s, (&dv, &dx))| s + w * (params.lambda_v * dv + params.lambda_x * dx))
        .collect();
    CandidateScores {
        labels: s_full.labels.clone(),
        scores,
    }
}

/// Per-candidate eligibility under the plausibility constraint: eligible iff
/// some token of the candidate is a finite entry of the full branch's top-K.
pub fn apply_apc<S: Scalar>(full_final_logits: &[S], k: usize, set: &CandidateSet) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::config("apc_top_k must be at least 1"));
    }
    set.check_vocab(full_final_logits.len())?;
    let mut in_top = vec![false; full_final_logits.len()];
    for i in top_k_indices(full_final_logits, k) {
        in_top[i] = full_final_logits[i] > S::neg_infinity();
    }
    Ok(set
        .candidates()
        .iter()
        .map(|c| c.token_ids.iter().any(|&t| in_top[t as usize]))
        .collect())
}

/// First-occurrence argmax over eligible entries.
pub fn masked_argmax<S: Scalar>(scores: &[S], eligible: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&s, &ok)) in scores.iter().zip(eligible).enumerate() {
        if !ok {
            continue;
        }
        match best {
            Some(b) if !(s > scores[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Index-level hysteresis: move to the calibrated argmax `c*` only when
/// `calibrated[c*] >= reference + epsilon`.
pub fn select_index<S: Scalar>(
    calibrated: &[S],
    eligible: &[bool],
    full_winner: usize,
    reference: S,
    epsilon: S,
) -> usize {
    match masked_argmax(calibrated, eligible) {
        Some(best) if best != full_winner && calibrated[best] >= reference + epsilon => best,
        _ => full_winner,
    }
}

/// Hysteresis on the calibrated scale, by label. Ties go to candidate order.
pub fn select_with_hysteresis<S: Scalar>(
    calibrated: &CandidateScores<S>,
    full_winner: &str,
    epsilon: S,
) -> Result<String> {
    let fw = calibrated
        .labels
        .iter()
        .position(|l| l == full_winner)
        .ok_or_else(|| Error::InvalidCandidates(format!("unknown full-branch winner `{full_winner}`")))?;
    let eligible = vec![true; calibrated.len()];
    let idx = select_index(&calibrated.scores, &eligible, fw, calibrated.scores[fw], epsilon);
    Ok(calibrated.labels[idx].clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeStepResult<S = f64> {
    pub chosen_label: String,
    pub chosen_index: usize,
    pub full_winner: String,
    pub full_scores: CandidateScores<S>,
    pub v0_scores: Option<CandidateScores<S>>,
    pub x0_scores: Option<CandidateScores<S>>,
    pub signals: Option<DifferentialSignals<S>>,
    pub calibrated_scores: Option<CandidateScores<S>>,
    pub eligible: Vec<bool>,
    pub apc_fallback: bool,
    pub hesitation: HesitationReport<S>,
    /// Whether the probes ran on this step.
    pub triggered: bool,
    /// Weight applied to the differential term (0 when not triggered).
    pub applied_weight: S,
    pub forward_passes: u32,
    pub flipped: bool,
}

/// One decoding step: full forward, hesitation, then probes and calibration
/// if the gate opens.
pub fn decode_step<S: Scalar, B: Backend<S> + ?Sized>(
    state: &DecodeState,
    backend: &B,
    config: &EngineConfig<S>,
    set: &CandidateSet,
) -> Result<DecodeStepResult<S>> {
    config.validate()?;
    set.check_vocab(backend.vocab_size())?;
    let mut forward_passes = 0u32;

    let full = backend.forward(state, BranchKind::Full, &config.hesitation.sampled_layers)?;
    forward_passes += full.forward_cost;
    let hesitation = compute_step_hesitation(&full, &config.hesitation, set)?;

    let full_scores = score_candidates(&log_probs(&full.final_logits)?, set)?;
    let eligible = apply_apc(&full.final_logits, config.calibration.apc_top_k, set)?;
    let apc_fallback = !eligible.iter().any(|&e| e);
    if apc_fallback {
        warn!(
            "step {} of `{}`: no candidate survives APC top-{}; falling back to full-branch argmax",
            state.step_index, state.scenario_id, config.calibration.apc_top_k
        );
    }
    let selectable = if apc_fallback {
        vec![true; set.len()]
    } else {
        eligible.clone()
    };
    let full_idx = masked_argmax(&full_scores.scores, &selectable).expect("candidate set is non-empty");

    let (triggered, weight) = match config.calibration.gate_mode {
        GateMode::HardThenSoft => (hesitation.triggered, hesitation.gate_weight),
        GateMode::SoftOnly => (true, hesitation.gate_weight),
        GateMode::Static => (true, S::one()),
    };

    let mut result = DecodeStepResult {
        chosen_label: set.candidates()[full_idx].label.clone(),
        chosen_index: full_idx,
        full_winner: set.candidates()[full_idx].label.clone(),
        full_scores,
        v0_scores: None,
        x0_scores: None,
        signals: None,
        calibrated_scores: None,
        eligible,
        apc_fallback,
        hesitation,
        triggered,
        applied_weight: S::zero(),
        forward_passes,
        flipped: false,
    };
    if !triggered {
        return Ok(result);
    }

    let v0 = backend.forward(state, BranchKind::V0, &[])?;
    result.forward_passes += v0.forward_cost;
    let x0 = backend.forward(state, BranchKind::X0, &[])?;
    result.forward_passes += x0.forward_cost;

    let s_v0 = score_candidates(&log_probs(&v0.final_logits)?, set)?;
    let s_x0 = score_candidates(&log_probs(&x0.final_logits)?, set)?;
    let signals = differential_signals(&result.full_scores, &s_v0, &s_x0)?;
    let calibrated = calibrate(&result.full_scores, &signals, weight, &config.calibration);

    let chosen = if apc_fallback {
        full_idx
    } else {
        let reference = match config.calibration.hysteresis_mode {
            HysteresisMode::CalibratedScale => calibrated.scores[full_idx],
            HysteresisMode::MixedScale => result.full_scores.scores[full_idx],
        };
        select_index(
            &calibrated.scores,
            &selectable,
            full_idx,
            reference,
            config.calibration.hysteresis_epsilon,
        )
    };

    result.chosen_index = chosen;
    result.chosen_label = set.candidates()[chosen].label.clone();
    result.flipped = chosen != full_idx;
    result.applied_weight = weight;
    result.v0_scores = Some(s_v0);
    result.x0_scores = Some(s_x0);
    result.signals = Some(signals);
    result.calibrated_scores = Some(calibrated);
    Ok(result)
}
