//! Candidate-level scoring: log-probabilities aggregated over each
//! candidate's surface-form token set.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, log_sum_exp};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggMode {
    #[default]
    LogSumExp,
    Max,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: String,
    pub token_ids: Vec<u32>,
}

impl Candidate {
    pub fn new(label: impl Into<String>, token_ids: impl Into<Vec<u32>>) -> Self {
        Self {
            label: label.into(),
            token_ids: token_ids.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CandidateSetRepr {
    candidates: Vec<Candidate>,
    #[serde(default)]
    agg_mode: AggMode,
}

/// The compact answer space. Labels are unique and every candidate has at
/// least one token; token sets of different candidates may overlap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CandidateSetRepr", into = "CandidateSetRepr")]
pub struct CandidateSet {
    candidates: Vec<Candidate>,
    agg_mode: AggMode,
}

impl TryFrom<CandidateSetRepr> for CandidateSet {
    type Error = Error;

    fn try_from(r: CandidateSetRepr) -> Result<Self> {
        CandidateSet::new(r.candidates, r.agg_mode)
    }
}

impl From<CandidateSet> for CandidateSetRepr {
    fn from(s: CandidateSet) -> Self {
        Self {
            candidates: s.candidates,
            agg_mode: s.agg_mode,
        }
    }
}

impl CandidateSet {
    pub fn new(candidates: Vec<Candidate>, agg_mode: AggMode) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidCandidates("candidate set is empty".into()));
        }
        let mut seen = HashSet::new();
        for c in &candidates {
            if c.token_ids.is_empty() {
                return Err(Error::InvalidCandidates(format!(
                    "candidate `{}` has no tokens",
                    c.label
                )));
            }
            if !seen.insert(c.label.as_str()) {
                return Err(Error::InvalidCandidates(format!("duplicate label `{}`", c.label)));
            }
        }
        Ok(Self { candidates, agg_mode })
    }

    /// Two-way yes/no set, the common polling shape.
    pub fn yes_no(yes: impl Into<Vec<u32>>, no: impl Into<Vec<u32>>) -> Self {
        Self::new(
            vec![Candidate::new("yes", yes), Candidate::new("no", no)],
            AggMode::LogSumExp,
        )
        .expect("static yes/no set is valid")
    }

    pub fn with_agg_mode(mut self, agg_mode: AggMode) -> Self {
        self.agg_mode = agg_mode;
        self
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn agg_mode(&self) -> AggMode {
        self.agg_mode
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.label.clone()).collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c.label == label)
    }

    /// Union of every candidate's tokens, ascending.
    pub fn all_token_ids(&self) -> BTreeSet<u32> {
        self.candidates
            .iter()
            .flat_map(|c| c.token_ids.iter().copied())
            .collect()
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        for c in &self.candidates {
            if let Some(&token) = c.token_ids.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::TokenOutOfRange {
                    candidate: c.label.clone(),
                    token,
                    vocab: vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Per-candidate log-scores aligned with a [`CandidateSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScores<S = f64> {
    pub labels: Vec<String>,
    pub scores: Vec<S>,
}

impl<S: Scalar> CandidateScores<S> {
    pub fn new(labels: Vec<String>, scores: Vec<S>) -> Result<Self> {
        if labels.len() != scores.len() {
            return Err(Error::LengthMismatch {
                expected: labels.len(),
                actual: scores.len(),
            });
        }
        Ok(Self { labels, scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<S> {
        self.labels.iter().position(|l| l == label).map(|i| self.scores[i])
    }

    pub fn check_aligned(&self, other: &Self) -> Result<()> {
        if self.labels != other.labels {
            return Err(Error::InvalidCandidates(format!(
                "misaligned candidate sets: {:?} vs {:?}",
                self.labels, other.labels
            )));
        }
        Ok(())
    }
}

/// Log-softmax of the final logits.
pub fn log_probs<S: Scalar>(final_logits: &[S]) -> Result<Vec<S>> {
    log_softmax(final_logits)
}

/// Aggregate each candidate's token log-probabilities.
pub fn score_candidates<S: Scalar>(log_probs: &[S], set: &CandidateSet) -> Result<CandidateScores<S>> {
    set.check_vocab(log_probs.len())?;
    let scores = set
        .candidates
        .iter()
        .map(|c| {
            let vals: Vec<S> = c.token_ids.iter().map(|&t| log_probs[t as usize]).collect();
            match set.agg_mode {
                AggMode::LogSumExp => log_sum_exp(&vals),
                AggMode::Max => Ok(vals.iter().copied().fold(S::neg_infinity(), S::max)),
            }
        })
        .collect::<Result<Vec<S>>>()?;
    Ok(CandidateScores {
        labels: set.labels(),
        scores,
    })
}
