//! Layer-wise hesitation: how erratically the keyword-restricted preference
//! moves across the sampled late layers, squashed into a gate weight.
//!
//! Per step:
//!
//! 1. keyword set = top-k of the final logits ∪ all candidate tokens;
//! 2. each sampled layer's logits are restricted to the keyword set and
//!    passed through a tempered softmax;
//! 3. each layer-to-layer update is compared (cosine distance) against the
//!    EMA of updates including itself;
//! 4. the mean distance and the fraction of spikes form the score, and a
//!    sigmoid centred at `delta` with temperature `T` gives the weight.
//!
//! Updates are taken between consecutive members of the sampled set, not
//! consecutive physical layers. The first update seeds the EMA and scores 0,
//! so `|J|` sampled layers yield `|J| - 1` scores and the means run over those.

use serde::{Deserialize, Serialize};

use crate::backend::{BranchKind, StepLogits};
use crate::candidates::CandidateSet;
use crate::error::{Error, Result};
use crate::numerics::{cosine_distance, ema_update, sigmoid, softmax_tempered, top_k_indices};
use crate::scalar::Scalar;

/// Why a token is in the keyword set. A token can carry both tags.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub top_k_final: bool,
    pub candidate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordSet {
    token_ids: Vec<u32>,
    provenance: Vec<Provenance>,
}

impl KeywordSet {
    /// Sorted, unique.
    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn contains(&self, token: u32) -> bool {
        self.token_ids.binary_search(&token).is_ok()
    }
}

pub fn build_keyword_set<S: Scalar>(final_logits: &[S], k: usize, set: &CandidateSet) -> Result<KeywordSet> {
    if k == 0 || k > final_logits.len() {
        return Err(Error::config(format!(
            "keyword top-k must lie in [1, {}], got {k}",
            final_logits.len()
        )));
    }
    set.check_vocab(final_logits.len())?;
    let mut tags = std::collections::BTreeMap::<u32, Provenance>::new();
    for i in top_k_indices(final_logits, k) {
        tags.entry(i as u32).or_default().top_k_final = true;
    }
    for t in set.all_token_ids() {
        tags.entry(t).or_default().candidate = true;
    }
    let (token_ids, provenance) = tags.into_iter().unzip();
    Ok(KeywordSet { token_ids, provenance })
}

/// Tempered softmax over the keyword-restricted logits. Masked tokens get 0.
pub fn keyword_distribution<S: Scalar>(layer_logits: &[S], kset: &KeywordSet, tau_kw: S) -> Result<Vec<S>> {
    let restricted = kset
        .token_ids
        .iter()
        .map(|&t| {
            layer_logits.get(t as usize).copied().ok_or(Error::LengthMismatch {
                expected: t as usize + 1,
                actual: layer_logits.len(),
            })
        })
        .collect::<Result<Vec<S>>>()?;
    softmax_tempered(&restricted, tau_kw)
}

/// Running state across the sampled layers of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerUpdateState<S = f64> {
    pub prev_distribution: Vec<S>,
    pub ema: Vec<S>,
    pub initialized: bool,
    /// Whether the EMA has absorbed its first update yet.
    pub ema_seeded: bool,
}

impl<S: Scalar> LayerUpdateState<S> {
    pub fn new(first: Vec<S>) -> Self {
        let n = first.len();
        Self {
            prev_distribution: first,
            ema: vec![S::zero(); n],
            initialized: true,
            ema_seeded: false,
        }
    }

    pub fn uninitialized() -> Self {
        Self {
            prev_distribution: Vec::new(),
            ema: Vec::new(),
            initialized: false,
            ema_seeded: false,
        }
    }
}

/// One update: returns the cosine distance between the update and its EMA.
pub fn layer_hesitation<S: Scalar>(
    q_curr: &[S],
    state: LayerUpdateState<S>,
    alpha: S,
) -> Result<(S, LayerUpdateState<S>)> {
    if !state.initialized {
        return Err(Error::InvalidState(
            "layer hesitation needs a previous distribution".into(),
        ));
    }
    if q_curr.len() != state.prev_distribution.len() {
        return Err(Error::LengthMismatch {
            expected: state.prev_distribution.len(),
            actual: q_curr.len(),
        });
    }
    let delta: Vec<S> = q_curr
        .iter()
        .zip(&state.prev_distribution)
        .map(|(&c, &p)| c - p)
        .collect();
    let (r, ema) = if state.ema_seeded {
        let ema = ema_update(&state.ema, &delta, alpha)?;
        (cosine_distance(&delta, &ema)?, ema)
    } else {
        // Validate alpha even on the seeding update.
        ema_update(&delta, &delta, alpha)?;
        (S::zero(), delta)
    };
    Ok((
        r,
        LayerUpdateState {
            prev_distribution: q_curr.to_vec(),
            ema,
            initialized: true,
            ema_seeded: true,
        },
    ))
}

/// `(mean r, fraction of r strictly above tau_spike)`.
pub fn hesitation_components<S: Scalar>(per_layer_r: &[S], tau_spike: S) -> (S, S) {
    if per_layer_r.is_empty() {
        return (S::zero(), S::zero());
    }
    let n = S::of(per_layer_r.len() as f64);
    let core = per_layer_r.iter().copied().sum::<S>() / n;
    let spikes = per_layer_r.iter().filter(|&&r| r > tau_spike).count();
    (core, S::of(spikes as f64) / n)
}

pub fn hesitation_score<S: Scalar>(per_layer_r: &[S], gamma: S, tau_spike: S) -> S {
    let (core, spike) = hesitation_components(per_layer_r, tau_spike);
    gamma * core + spike
}

pub fn gate_weight<S: Scalar>(hes: S, delta: S, temperature: S) -> Result<S> {
    if !(temperature > S::zero()) {
        return Err(Error::config(format!(
            "gate temperature must be positive, got {temperature}"
        )));
    }
    Ok(sigmoid((hes - delta) / temperature))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HesitationConfig<S = f64> {
    /// Sampled layers, ascending.
    pub sampled_layers: Vec<usize>,
    pub keyword_top_k: usize,
    pub tau_kw: S,
    pub alpha: S,
    pub gamma: S,
    pub tau_spike: S,
    pub delta: S,
    pub gate_temperature: S,
    pub w_min: S,
}

impl<S: Scalar> HesitationConfig<S> {
    pub fn with_layers(sampled_layers: Vec<usize>) -> Self {
        Self {
            sampled_layers,
            keyword_top_k: 50,
            tau_kw: S::one(),
            alpha: S::of(0.6),
            gamma: S::one(),
            tau_spike: S::of(0.5),
            delta: S::of(0.5),
            gate_temperature: S::of(0.1),
            w_min: S::of(0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sampled_layers.len() < 2 {
            return bad(format!(
                "need at least two sampled layers, got {:?}",
                self.sampled_layers
            ));
        }
        if self.sampled_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "sampled layers must be strictly ascending, got {:?}",
                self.sampled_layers
            ));
        }
        if self.keyword_top_k == 0 {
            return bad("keyword_top_k must be positive".into());
        }
        if !(self.tau_kw > S::zero()) {
            return bad(format!("tau_kw must be positive, got {}", self.tau_kw));
        }
        if !(self.alpha >= S::zero() && self.alpha < S::one()) {
            return bad(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if !(self.gamma >= S::zero()) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.tau_spike > S::zero()) {
            return bad(format!("tau_spike must be positive, got {}", self.tau_spike));
        }
        if !self.delta.is_finite() {
            return bad("delta must be finite".into());
        }
        if !(self.gate_temperature > S::zero()) {
            return bad(format!(
                "gate_temperature must be positive, got {}",
                self.gate_temperature
            ));
        }
        if !(self.w_min >= S::zero() && self.w_min <= S::one()) {
            return bad(format!("w_min must lie in [0, 1], got {}", self.w_min));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HesitationReport<S = f64> {
    /// `(layer, r)` for every sampled layer after the first.
    pub per_layer_r: Vec<(usize, S)>,
    pub core: S,
    pub spike_fraction: S,
    pub hes: S,
    pub gate_weight: S,
    pub triggered: bool,
    pub keyword_count: usize,
}

/// Hesitation report for one step of the full branch.
///
/// `keyword_top_k` is clamped to the vocabulary size.
pub fn compute_step_hesitation<S: Scalar>(
    step: &StepLogits<S>,
    config: &HesitationConfig<S>,
    set: &CandidateSet,
) -> Result<HesitationReport<S>> {
    if step.branch != BranchKind::Full {
        return Err(Error::InvalidState(format!(
            "hesitation is computed on the full branch, got {}",
            step.branch
        )));
    }
    config.validate()?;
    let k = config.keyword_top_k.min(step.final_logits.len());
    let kset = build_keyword_set(&step.final_logits, k, set)?;

    let mut layers = config.sampled_layers.iter().copied();
    let first = layers.next().expect("validated |J| >= 2");
    let mut state = LayerUpdateState::new(keyword_distribution(step.layer(first)?, &kset, config.tau_kw)?);
    let mut per_layer_r = Vec::with_capacity(config.sampled_layers.len() - 1);
    for j in layers {
        let q = keyword_distribution(step.layer(j)?, &kset, config.tau_kw)?;
        let (r, next) = layer_hesitation(&q, state, config.alpha)?;
        state = next;
        per_layer_r.push((j, r));
    }

    let rs: Vec<S> = per_layer_r.iter().map(|&(_, r)| r).collect();
    let (core, spike_fraction) = hesitation_components(&rs, config.tau_spike);
    let hes = config.gamma * core + spike_fraction;
    let w = gate_weight(hes, config.delta, config.gate_temperature)?;
    Ok(HesitationReport {
        per_layer_r,
        core,
        spike_fraction,
        hes,
        gate_weight: w,
        triggered: w > config.w_min,
        keyword_count: kset.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn step_from_rows(final_logits: Vec<f64>, rows: &[(usize, Vec<f64>)]) -> StepLogits<f64> {
        StepLogits {
            branch: BranchKind::Full,
            final_logits,
            layer_logits: rows.iter().cloned().collect::<BTreeMap<_, _>>(),
            forward_cost: 1,
        }
    }

    #[test]
    fn keyword_set_examples() {
        let set = CandidateSet::new(vec![crate::Candidate::new("c", [3])], Default::default()).unwrap();
        let k = build_keyword_set(&[3.0f64, 1.0, 2.0, 0.0], 2, &set).unwrap();
        assert_eq!(k.token_ids(), &[0, 2, 3]);
        assert!(k.provenance()[2].candidate && !k.provenance()[2].top_k_final);

        let full = build_keyword_set(&[3.0f64, 1.0, 2.0, 0.0], 4, &set).unwrap();
        assert_eq!(full.token_ids(), &[0, 1, 2, 3]);

        let absorbed = CandidateSet::yes_no([0], [2]);
        let k = build_keyword_set(&[3.0f64, 1.0, 2.0, 0.0], 2, &absorbed).unwrap();
        assert_eq!(k.len(), 2);

        assert!(build_keyword_set(&[1.0f64], 0, &absorbed).is_err());
        assert!(build_keyword_set(&[1.0f64, 2.0], 3, &absorbed).is_err());
    }

    #[test]
    fn keyword_distribution_trivial() {
        let set = CandidateSet::yes_no([0], [1]);
        let kset = build_keyword_set(&[0.0f64, 0.0, 5.0], 3, &set).unwrap();
        let q = keyword_distribution(&[2.0f64, 2.0, 2.0], &kset, 0.7).unwrap();
        for v in q {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let single = CandidateSet::new(vec![crate::Candidate::new("a", [1])], Default::default()).unwrap();
        let kset = build_keyword_set(&[0.0f64, 9.0], 1, &single).unwrap();
        assert_eq!(keyword_distribution(&[4.0f64, -1.0], &kset, 1.0).unwrap(), vec![1.0]);
        let kset = build_keyword_set(&[0.0f64, 9.0, 1.0], 3, &single).unwrap();
        let q = keyword_distribution(&[0.0f64, f64::NEG_INFINITY, 1.0], &kset, 1.0).unwrap();
        assert_eq!(q[1], 0.0);
    }

    #[test]
    fn zero_update_scores_zero() {
        let q = vec![0.2f64, 0.8];
        let state = LayerUpdateState::new(q.clone());
        let (r, state) = layer_hesitation(&q, state, 0.6).unwrap();
        assert_eq!(r, 0.0);
        let (r, _) = layer_hesitation(&q, state, 0.6).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn layer_hesitation_errors() {
        let uninit = LayerUpdateState::<f64>::uninitialized();
        assert!(layer_hesitation(&[1.0], uninit, 0.5).is_err());
        let st = LayerUpdateState::new(vec![0.5f64, 0.5]);
        assert!(matches!(
            layer_hesitation(&[1.0], st, 0.5),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn score_examples() {
        assert_eq!(hesitation_score(&[0.0f64, 0.0, 0.0], 1.0, 0.5), 0.0);
        assert_eq!(hesitation_score(&[2.0f64, 2.0], 1.0, 1.0), 3.0);
        // Spike comparison is strict.
        assert_eq!(hesitation_components(&[0.5f64, 0.5], 0.5).1, 0.0);
    }

    #[test]
    fn gate_examples() {
        assert_eq!(gate_weight(0.3f64, 0.3, 0.1).unwrap(), 0.5);
        let w1 = gate_weight(1.0f64, 0.5, 1.0).unwrap();
        let w10 = gate_weight(1.0f64, 0.5, 10.0).unwrap();
        assert!((w10 - 0.5).abs() < (w1 - 0.5).abs());
        assert!(gate_weight(1.0f64, 0.5, 0.0).is_err());
        assert!(gate_weight(1.0f64, 0.5, -1.0).is_err());
    }

    #[test]
    fn constant_trajectory_never_hesitates() {
        let row = vec![1.0f64, 0.3, -2.0, 0.9];
        let step = step_from_rows(row.clone(), &[(2, row.clone()), (4, row.clone()), (6, row)]);
        let cfg = HesitationConfig::<f64>::with_layers(vec![2, 4, 6]);
        let set = CandidateSet::yes_no([0], [1]);
        let rep = compute_step_hesitation(&step, &cfg, &set).unwrap();
        assert!(rep.per_layer_r.iter().all(|&(_, r)| r == 0.0));
        assert_eq!(rep.hes, 0.0);
        let expected = sigmoid(-cfg.delta / cfg.gate_temperature);
        assert_eq!(rep.gate_weight, expected);
        assert_eq!(rep.triggered, expected > cfg.w_min);
    }

    #[test]
    fn two_layers_give_one_seed_update() {
        let step = step_from_rows(vec![0.0, 1.0], &[(0, vec![0.0, 1.0]), (1, vec![3.0, -1.0])]);
        let cfg = HesitationConfig::<f64>::with_layers(vec![0, 1]);
        let rep = compute_step_hesitation(&step, &cfg, &CandidateSet::yes_no([0], [1])).unwrap();
        assert_eq!(rep.per_layer_r, vec![(1, 0.0)]);
        assert_eq!(rep.hes, 0.0);
    }

    #[test]
    fn missing_layer_is_named() {
        let step = step_from_rows(vec![0.0, 1.0], &[(0, vec![0.0, 1.0])]);
        let cfg = HesitationConfig::<f64>::with_layers(vec![0, 3]);
        let err = compute_step_hesitation(&step, &cfg, &CandidateSet::yes_no([0], [1])).unwrap_err();
        assert!(matches!(err, Error::MissingLayer(3)));
    }

    #[test]
    fn rejects_probe_branch_and_bad_config() {
        let mut step = step_from_rows(vec![0.0, 1.0], &[(0, vec![0.0, 1.0]), (1, vec![0.0, 1.0])]);
        let set = CandidateSet::yes_no([0], [1]);
        let mut cfg = HesitationConfig::<f64>::with_layers(vec![0]);
        assert!(matches!(
            compute_step_hesitation(&step, &cfg, &set),
            Err(Error::Config(_))
        ));
        cfg.sampled_layers = vec![1, 0];
        assert!(matches!(
            compute_step_hesitation(&step, &cfg, &set),
            Err(Error::Config(_))
        ));
        cfg.sampled_layers = vec![0, 1];
        step.branch = BranchKind::X0;
        assert!(compute_step_hesitation(&step, &cfg, &set).is_err());
    }

    #[test]
    fn report_invariants_hold_for_f32() {
        let rows: Vec<(usize, Vec<f32>)> = vec![
            (0, vec![0.0, 0.0, 3.0]),
            (1, vec![2.02, 2.0, 0.0]),
            (2, vec![2.0, 2.02, 0.0]),
            (3, vec![2.02, 2.0, 0.0]),
        ];
        let step = StepLogits {
            branch: BranchKind::Full,
            final_logits: rows[3].1.clone(),
            layer_logits: rows.into_iter().collect(),
            forward_cost: 1,
        };
        let cfg = HesitationConfig::<f32>::with_layers(vec![0, 1, 2, 3]);
        let rep = compute_step_hesitation(&step, &cfg, &CandidateSet::yes_no([0], [1])).unwrap();
        assert!((rep.hes - (cfg.gamma * rep.core + rep.spike_fraction)).abs() < 1e-6);
        assert!((rep.spike_fraction - 2.0 / 3.0).abs() < 1e-6);
        assert!(rep.triggered);
    }
}
