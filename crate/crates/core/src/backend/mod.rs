//! Model backends: anything that can produce final and per-layer logit rows
//! for a decode state under one of the three branches.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::argmax_first;
use crate::scalar::Scalar;

pub mod synthetic;
pub mod trace;

pub use synthetic::{BranchRows, Script, ScriptedStep, SyntheticBackend, SyntheticScenario, DEFAULT_SIGMA_NOISE};
pub use trace::TraceBackend;

/// Which input the forward pass sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    /// Original image and query.
    Full,
    /// Visual evidence perturbed, text unchanged.
    V0,
    /// Image intact, query replaced by a format-preserving template.
    X0,
}

impl BranchKind {
    pub const ALL: [BranchKind; 3] = [BranchKind::Full, BranchKind::V0, BranchKind::X0];

    pub fn as_str(self) -> &'static str {
        match self {
            BranchKind::Full => "full",
            BranchKind::V0 => "v0",
            BranchKind::X0 => "x0",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(BranchKind::Full),
            "v0" => Some(BranchKind::V0),
            "x0" => Some(BranchKind::X0),
            _ => None,
        }
    }

    fn index(self) -> usize {
        match self {
            BranchKind::Full => 0,
            BranchKind::V0 => 1,
            BranchKind::X0 => 2,
        }
    }
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Immutable snapshot of one decoding position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeState {
    pub scenario_id: String,
    pub query_text: String,
    pub prefix_tokens: Vec<u32>,
    pub step_index: usize,
}

impl DecodeState {
    pub fn new(scenario_id: impl Into<String>, query_text: impl Into<String>, prefix_tokens: Vec<u32>) -> Self {
        let step_index = prefix_tokens.len();
        Self {
            scenario_id: scenario_id.into(),
            query_text: query_text.into(),
            prefix_tokens,
            step_index,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_index != self.prefix_tokens.len() {
            return Err(Error::InvalidState(format!(
                "step_index {} does not match prefix length {}",
                self.step_index,
                self.prefix_tokens.len()
            )));
        }
        Ok(())
    }

    /// The state one step later, after emitting `token`.
    pub fn advance(&self, token: u32) -> Self {
        let mut prefix = self.prefix_tokens.clone();
        prefix.push(token);
        Self::new(self.scenario_id.clone(), self.query_text.clone(), prefix)
    }
}

/// One branch's output at one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLogits<S = f64> {
    pub branch: BranchKind,
    pub final_logits: Vec<S>,
    pub layer_logits: BTreeMap<usize, Vec<S>>,
    pub forward_cost: u32,
}

impl<S: Scalar> StepLogits<S> {
    pub fn layer(&self, j: usize) -> Result<&[S]> {
        self.layer_logits
            .get(&j)
            .map(Vec::as_slice)
            .ok_or(Error::MissingLayer(j))
    }
}

/// Source of logit rows.
///
/// Implementations are read-only after construction: `forward` must be a
/// pure function of `(self, state, branch, layers)`. Each call is one
/// forward pass for cost accounting.
pub trait Backend<S: Scalar>: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Depth of the backbone.
    fn num_layers(&self) -> usize;

    /// Layer indices this backend can report, ascending.
    fn available_layers(&self) -> Vec<usize> {
        (0..self.num_layers()).collect()
    }

    fn forward(&self, state: &DecodeState, branch: BranchKind, layers: &[usize]) -> Result<StepLogits<S>>;
}

impl<S: Scalar, B: Backend<S> + ?Sized> Backend<S> for &B {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn num_layers(&self) -> usize {
        (**self).num_layers()
    }
    fn available_layers(&self) -> Vec<usize> {
        (**self).available_layers()
    }
    fn forward(&self, state: &DecodeState, branch: BranchKind, layers: &[usize]) -> Result<StepLogits<S>> {
        (**self).forward(state, branch, layers)
    }
}

impl<S: Scalar, B: Backend<S> + ?Sized> Backend<S> for Box<B> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn num_layers(&self) -> usize {
        (**self).num_layers()
    }
    fn available_layers(&self) -> Vec<usize> {
        (**self).available_layers()
    }
    fn forward(&self, state: &DecodeState, branch: BranchKind, layers: &[usize]) -> Result<StepLogits<S>> {
        (**self).forward(state, branch, layers)
    }
}

/// Wraps a backend and counts forward calls per branch.
#[derive(Debug)]
pub struct CountingBackend<B> {
    inner: B,
    calls: [AtomicU64; 3],
}

impl<B> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: Default::default(),
        }
    }

    pub fn calls(&self, branch: BranchKind) -> u64 {
        self.calls[branch.index()].load(Ordering::Relaxed)
    }

    pub fn total_calls(&self) -> u64 {
        BranchKind::ALL.iter().map(|&b| self.calls(b)).sum()
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<S: Scalar, B: Backend<S>> Backend<S> for CountingBackend<B> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }
    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }
    fn available_layers(&self) -> Vec<usize> {
        self.inner.available_layers()
    }
    fn forward(&self, state: &DecodeState, branch: BranchKind, layers: &[usize]) -> Result<StepLogits<S>> {
        self.calls[branch.index()].fetch_add(1, Ordering::Relaxed);
        self.inner.forward(state, branch, layers)
    }
}

/// Default sampled layers: the upper half of the backbone at stride 2,
/// ending on the last layer.
pub fn default_sampled_layers(num_layers: usize) -> Vec<usize> {
    if num_layers == 0 {
        return Vec::new();
    }
    let floor = num_layers / 2;
    let mut layers: Vec<usize> = (floor..num_layers).rev().step_by(2).collect();
    layers.reverse();
    layers
}

/// The deepest `k` of the available layers.
pub fn last_k_layers(available: &[usize], k: usize) -> Vec<usize> {
    let start = available.len().saturating_sub(k);
    available[start..].to_vec()
}

/// Greedy (temperature 0) token continuation on the full branch up to
/// `steps` tokens. Used to reach later positions in a scenario or trace.
pub fn greedy_prefix<S: Scalar, B: Backend<S> + ?Sized>(
    backend: &B,
    scenario_id: &str,
    query_text: &str,
    steps: usize,
) -> Result<DecodeState> {
    let mut state = DecodeState::new(scenario_id, query_text, Vec::new());
    for _ in 0..steps {
        let out = backend.forward(&state, BranchKind::Full, &[])?;
        let token = argmax_first(&out.final_logits).ok_or(Error::EmptySupport)?;
        state = state.advance(token as u32);
    }
    Ok(state)
}
