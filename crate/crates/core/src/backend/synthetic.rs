//! Deterministic synthetic backend.
//!
//! Two modes share one scenario type:
//!
//! * **Procedural**: a small seeded residual stack maps
//!   `visual ⊕ query ⊕ prefix summary` to hidden states, and one shared head
//!   projects every layer to logits. `V0` adds Gaussian noise of scale
//!   `sigma_noise` to the visual embedding; `X0` swaps the query embedding for
//!   the template embedding.
//! * **Scripted**: explicit per-step rows. `V0` rows are either given
//!   verbatim or derived as `full + sigma_noise * v0_response`, the linear
//!   response of the logits to a unit visual perturbation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Backend, BranchKind, DecodeState, StepLogits};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Final row and per-layer rows of one branch.
type Rows = (Vec<f64>, BTreeMap<usize, Vec<f64>>);

/// Standard deviation of the V0 embedding noise.
pub const DEFAULT_SIGMA_NOISE: f64 = 0.8;
pub const DEFAULT_HIDDEN_DIM: usize = 16;
const PREFIX_DIM: usize = 4;
const INPUT_GAIN: f64 = 1.5;
const LAYER_GAIN: f64 = 1.6;
const RESIDUAL_STEP: f64 = 0.6;
const HEAD_GAIN: f64 = 3.0;

fn default_hidden_dim() -> usize {
    DEFAULT_HIDDEN_DIM
}

/// Logit rows for one branch at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRows {
    #[serde(rename = "final")]
    pub final_logits: Vec<f64>,
    pub layers: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedStep {
    pub full: BranchRows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v0: Option<BranchRows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v0_response: Option<BranchRows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<BranchRows>,
}

/// Step `t` of the script answers the decode state with `step_index == t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub steps: Vec<ScriptedStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub seed: u64,
    pub vocab_size: usize,
    pub num_layers: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default)]
    pub visual_embedding: Vec<f64>,
    #[serde(default)]
    pub query_embedding: Vec<f64>,
    #[serde(default)]
    pub template_embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<Script>,
}

impl SyntheticScenario {
    /// A procedural scenario with embeddings drawn from `seed`.
    pub fn procedural(seed: u64, vocab_size: usize, num_layers: usize, embed_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_E3B0);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let visual_embedding = draw(embed_dim);
        let query_embedding = draw(embed_dim);
        let template_embedding = draw(embed_dim);
        Self {
            seed,
            vocab_size,
            num_layers,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            visual_embedding,
            query_embedding,
            template_embedding,
            script: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("synthetic scenario needs a non-empty vocabulary"));
        }
        if self.num_layers == 0 {
            return Err(Error::config("synthetic scenario needs at least one layer"));
        }
        match &self.script {
            Some(script) => {
                for (t, step) in script.steps.iter().enumerate() {
                    let rows = [
                        Some(&step.full),
                        step.v0.as_ref(),
                        step.v0_response.as_ref(),
                        step.x0.as_ref(),
                    ];
                    for r in rows.into_iter().flatten() {
                        self.check_rows(t, r)?;
                    }
                }
            }
            None => {
                if self.hidden_dim == 0 {
                    return Err(Error::config("procedural scenario needs hidden_dim > 0"));
                }
                if self.query_embedding.len() != self.template_embedding.len() {
                    return Err(Error::config(format!(
                        "query embedding has {} dims but template has {}",
                        self.query_embedding.len(),
                        self.template_embedding.len()
                    )));
                }
                let all = [&self.visual_embedding, &self.query_embedding, &self.template_embedding];
                if all.iter().flat_map(|v| v.iter()).any(|x| !x.is_finite()) {
                    return Err(Error::config("scenario embeddings must be finite"));
                }
            }
        }
        Ok(())
    }

    fn check_rows(&self, step: usize, rows: &BranchRows) -> Result<()> {
        let check_len = |v: &Vec<f64>| {
            if v.len() != self.vocab_size {
                Err(Error::LengthMismatch {
                    expected: self.vocab_size,
                    actual: v.len(),
                })
            } else {
                Ok(())
            }
        };
        check_len(&rows.final_logits)?;
        for (&j, row) in &rows.layers {
            if j >= self.num_layers {
                return Err(Error::config(format!(
                    "scripted step {step} has layer {j} beyond depth {}",
                    self.num_layers
                )));
            }
            check_len(row)?;
        }
        Ok(())
    }
}

/// Weights of the procedural stack, drawn once from the scenario seed.
#[derive(Debug, Clone)]
struct Stack {
    input: Vec<Vec<f64>>,
    layers: Vec<Vec<Vec<f64>>>,
    head: Vec<Vec<f64>>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                })
                .collect()
        })
        .collect()
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

impl Stack {
    fn new(scenario: &SyntheticScenario) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        let h = scenario.hidden_dim;
        let d = scenario.visual_embedding.len() + scenario.query_embedding.len() + PREFIX_DIM;
        let input = gaussian_matrix(&mut rng, h, d, INPUT_GAIN / (d as f64).sqrt());
        let layers = (0..scenario.num_layers)
            .map(|_| gaussian_matrix(&mut rng, h, h, LAYER_GAIN / (h as f64).sqrt()))
            .collect();
        let head = gaussian_matrix(&mut rng, scenario.vocab_size, h, HEAD_GAIN / (h as f64).sqrt());
        Self { input, layers, head }
    }

    /// Logits for layers `0..=deepest`.
    fn run(&self, input: &[f64], deepest: usize) -> Vec<Vec<f64>> {
        let mut h: Vec<f64> = matvec(&self.input, input).into_iter().map(f64::tanh).collect();
        let mut out = Vec::with_capacity(deepest + 1);
        for layer in &self.layers[..=deepest] {
            let update = matvec(layer, &h);
            for (hi, ui) in h.iter_mut().zip(update) {
                *hi += RESIDUAL_STEP * ui.tanh();
            }
            out.push(matvec(&self.head, &h));
        }
        out
    }
}

/// Deterministic summary of the generated prefix.
fn prefix_summary(tokens: &[u32]) -> [f64; PREFIX_DIM] {
    let mut s = [0.0; PREFIX_DIM];
    if tokens.is_empty() {
        return s;
    }
    for (t, &tok) in tokens.iter().enumerate() {
        for (i, si) in s.iter_mut().enumerate() {
            *si += (0.37 * f64::from(tok + 1) * (i as f64 + 1.0) + 0.11 * t as f64).sin();
        }
    }
    let norm = (tokens.len() as f64).sqrt();
    s.map(|v| v / norm)
}

/// splitmix64 over the seed, step and prefix: the per-state noise seed.
fn state_seed(seed: u64, state: &DecodeState) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    let mut mix = |v: u64| {
        x = x.wrapping_add(v).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    };
    mix(state.step_index as u64);
    for &t in &state.prefix_tokens {
        mix(u64::from(t));
    }
    x
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    scenario: SyntheticScenario,
    sigma_noise: f64,
    noise_seed: u64,
    stack: Option<Stack>,
}

impl SyntheticBackend {
    pub fn new(scenario: SyntheticScenario, sigma_noise: f64) -> Result<Self> {
        if !(sigma_noise >= 0.0 && sigma_noise.is_finite()) {
            return Err(Error::config(format!("sigma_noise must be >= 0, got {sigma_noise}")));
        }
        scenario.validate()?;
        let stack = scenario.script.is_none().then(|| Stack::new(&scenario));
        Ok(Self {
            scenario,
            sigma_noise,
            noise_seed: 0,
            stack,
        })
    }

    /// Reseed the V0 noise without changing the scenario's weights.
    pub fn with_noise_seed(mut self, noise_seed: u64) -> Self {
        self.noise_seed = noise_seed;
        self
    }

    pub fn scenario(&self) -> &SyntheticScenario {
        &self.scenario
    }

    pub fn sigma_noise(&self) -> f64 {
        self.sigma_noise
    }

    fn check_layers(&self, step: usize, layers: &[usize]) -> Result<()> {
        match layers.iter().find(|&&j| j >= self.scenario.num_layers) {
            Some(&layer) => Err(Error::LayerNotRecorded { step, layer }),
            None => Ok(()),
        }
    }

    fn procedural(&self, stack: &Stack, state: &DecodeState, branch: BranchKind, layers: &[usize]) -> Rows {
        let sc = &self.scenario;
        let mut input = Vec::with_capacity(stack.input.first().map_or(0, Vec::len));
        match branch {
            BranchKind::V0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(state_seed(sc.seed ^ self.noise_seed.rotate_left(32), state));
                input.extend(sc.visual_embedding.iter().map(|&v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + self.sigma_noise * z
                }));
            }
            _ => input.extend_from_slice(&sc.visual_embedding),
        }
        match branch {
            BranchKind::X0 => input.extend_from_slice(&sc.template_embedding),
            _ => input.extend_from_slice(&sc.query_embedding),
        }
        input.extend_from_slice(&prefix_summary(&state.prefix_tokens));

        let mut rows = stack.run(&input, sc.num_layers - 1);
        let final_logits = rows.last().cloned().unwrap_or_default();
        let layer_logits = layers.iter().map(|&j| (j, std::mem::take(&mut rows[j]))).collect();
        (final_logits, layer_logits)
    }

    fn scripted(&self, script: &Script, state: &DecodeState, branch: BranchKind, layers: &[usize]) -> Result<Rows> {
        let t = state.step_index;
        let not_recorded = Error::BranchNotRecorded { step: t, branch };
        let step = script.steps.get(t).ok_or(not_recorded)?;
        let pick = |rows: &BranchRows| -> Result<Rows> {
            let mut out = BTreeMap::new();
            for &j in layers {
                let row = rows
                    .layers
                    .get(&j)
                    .ok_or(Error::LayerNotRecorded { step: t, layer: j })?;
                out.insert(j, row.clone());
            }
            Ok((rows.final_logits.clone(), out))
        };
        match branch {
            BranchKind::Full => pick(&step.full),
            BranchKind::X0 => step
                .x0
                .as_ref()
                .map_or(Err(Error::BranchNotRecorded { step: t, branch }), pick),
            BranchKind::V0 => {
                if let Some(v0) = &step.v0 {
                    return pick(v0);
                }
                let (mut final_logits, mut layer_logits) = pick(&step.full)?;
                if self.sigma_noise == 0.0 {
                    return Ok((final_logits, layer_logits));
                }
                let resp = step
                    .v0_response
                    .as_ref()
                    .ok_or(Error::BranchNotRecorded { step: t, branch })?;
                let sigma = self.sigma_noise;
                let perturb = |row: &mut Vec<f64>, delta: &[f64]| {
                    for (z, d) in row.iter_mut().zip(delta) {
                        *z += sigma * d;
                    }
                };
                perturb(&mut final_logits, &resp.final_logits);
                for (j, row) in layer_logits.iter_mut() {
                    let delta = resp
                        .layers
                        .get(j)
                        .ok_or(Error::LayerNotRecorded { step: t, layer: *j })?;
                    perturb(row, delta);
                }
                Ok((final_logits, layer_logits))
            }
        }
    }
}

impl<S: Scalar> Backend<S> for SyntheticBackend {
    fn vocab_size(&self) -> usize {
        self.scenario.vocab_size
    }

    fn num_layers(&self) -> usize {
        self.scenario.num_layers
    }

    fn forward(&self, state: &DecodeState, branch: BranchKind, layers: &[usize]) -> Result<StepLogits<S>> {
        state.validate()?;
        self.check_layers(state.step_index, layers)?;
        let (final_logits, layer_logits) = match (&self.scenario.script, &self.stack) {
            (Some(script), _) => self.scripted(script, state, branch, layers)?,
            (None, Some(stack)) => self.procedural(stack, state, branch, layers),
            (None, None) => unreachable!("procedural backend always owns a stack"),
        };
        let widen = |v: Vec<f64>| v.into_iter().map(S::of).collect::<Vec<S>>();
        Ok(StepLogits {
            branch,
            final_logits: widen(final_logits),
            layer_logits: layer_logits.into_iter().map(|(j, v)| (j, widen(v))).collect(),
            forward_cost: 1,
        })
    }
}
