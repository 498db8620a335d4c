//! Reference values recorded next to a trace (`<trace>.ref.json`) and the
//! replay check against them.
//!
//! Scores are candidate log-scores normalised over the tokens the trace
//! actually stores, since that is all a replay can see. Under the full
//! policy this is the ordinary full-vocabulary score.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::trace::{select_stored_ids, StoredTokenPolicy};
use crate::backend::{Backend, BranchKind, DecodeState, StepLogits, TraceBackend};
use crate::candidates::{log_probs, score_candidates, CandidateSet};
use crate::error::{Error, Result};
use crate::numerics::argmax_first;
use crate::scalar::Scalar;

pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarStep {
    pub step: usize,
    /// Candidate log-scores per recorded branch, aligned with the sidecar's
    /// candidate set.
    pub scores: BTreeMap<BranchKind, Vec<f64>>,
    pub full_argmax: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub candidates: CandidateSet,
    pub steps: Vec<SidecarStep>,
}

/// `trace.jsonl` -> `trace.jsonl.ref.json`
pub fn sidecar_path(trace: impl AsRef<Path>) -> PathBuf {
    let mut s = trace.as_ref().as_os_str().to_owned();
    s.push(".ref.json");
    PathBuf::from(s)
}

impl Sidecar {
    pub fn new(candidates: CandidateSet) -> Self {
        Self {
            candidates,
            steps: Vec::new(),
        }
    }

    /// Record one step from full-precision, full-vocabulary logits, before
    /// they are narrowed for storage.
    pub fn push_step<S: Scalar>(&mut self, policy: StoredTokenPolicy, branches: &[&StepLogits<S>]) -> Result<()> {
        let step = self.steps.len();
        let full = branches
            .iter()
            .find(|b| b.branch == BranchKind::Full)
            .ok_or(Error::BranchNotRecorded {
                step,
                branch: BranchKind::Full,
            })?;
        let stored = select_stored_ids(policy, &full.final_logits, &self.candidates.all_token_ids());
        let visible = |row: &[S]| -> Vec<f64> {
            let wide: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
            match &stored {
                None => wide,
                Some(ids) => {
                    let mut out = vec![f64::NEG_INFINITY; wide.len()];
                    for &i in ids {
                        out[i as usize] = wide[i as usize];
                    }
                    out
                }
            }
        };
        let mut scores = BTreeMap::new();
        for b in branches {
            let lp = log_probs(&visible(&b.final_logits))?;
            scores.insert(b.branch, score_candidates(&lp, &self.candidates)?.scores);
        }
        let full_argmax = argmax_first(&visible(&full.final_logits)).ok_or(Error::EmptySupport)? as u32;
        self.steps.push(SidecarStep {
            step,
            scores,
            full_argmax,
        });
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::TraceParse {
            line: e.line(),
            message: format!("sidecar: {e}"),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sidecar serialises")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub steps_checked: usize,
    pub values_checked: usize,
    pub max_deviation: f64,
    pub worst: Option<(usize, BranchKind, String)>,
    pub argmax_mismatches: Vec<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

fn deviation(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

/// Recompute every sidecar value from the replayed trace and compare.
pub fn verify_against_sidecar(trace: &TraceBackend, sidecar: &Sidecar, tolerance: f64) -> Result<VerifyReport> {
    sidecar.candidates.check_vocab(Backend::<f64>::vocab_size(trace))?;
    if sidecar.steps.len() != trace.num_steps() {
        return Err(Error::Integrity(format!(
            "sidecar has {} steps, trace has {}",
            sidecar.steps.len(),
            trace.num_steps()
        )));
    }
    let labels = sidecar.candidates.labels();
    let mut report = VerifyReport {
        steps_checked: 0,
        values_checked: 0,
        max_deviation: 0.0,
        worst: None,
        argmax_mismatches: Vec::new(),
        tolerance,
        passed: false,
    };
    let mut state = DecodeState::new("replay", "", Vec::new());
    for (t, s) in sidecar.steps.iter().enumerate() {
        if s.step != t {
            return Err(Error::Integrity(format!(
                "sidecar step {} found at position {t}",
                s.step
            )));
        }
        state.step_index = t;
        for (&branch, expected) in &s.scores {
            if expected.len() != labels.len() {
                return Err(Error::LengthMismatch {
                    expected: labels.len(),
                    actual: expected.len(),
                });
            }
            let out: StepLogits<f64> = trace.forward(&state, branch, &[])?;
            let got = score_candidates(&log_probs(&out.final_logits)?, &sidecar.candidates)?;
            for (i, (&g, &e)) in got.scores.iter().zip(expected).enumerate() {
                let d = deviation(g, e);
                report.values_checked += 1;
                if !(d <= report.max_deviation) {
                    report.max_deviation = d;
                    report.worst = Some((t, branch, labels[i].clone()));
                }
            }
            if branch == BranchKind::Full && argmax_first(&out.final_logits) != Some(s.full_argmax as usize) {
                report.argmax_mismatches.push(t);
            }
        }
        report.steps_checked += 1;
    }
    report.passed = report.max_deviation <= tolerance && report.argmax_mismatches.is_empty();
    Ok(report)
}
