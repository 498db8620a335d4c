//! Synthetic dataset generation.
//!
//! Scripted families share one token layout: token 0 is an anchor that holds
//! the early layers' mass, `yes = {1, 2}`, `no = {3, 4}`, and the rest is
//! filler with small per-instance logits.
//!
//! * `calm`: candidate logits rise steadily through the stack toward the
//!   truth; updates stay aligned so hesitation stays low.
//! * `oscillating`: mass jumps from the anchor onto the candidates at the
//!   first sampled layer, then the yes/no ranking swaps back and forth. Each
//!   swap points away from the running update average, so every sampled
//!   update after the first is a spike.
//! * `prior_bias`: half the instances are oscillating with a final lean to
//!   `yes` while the truth is `no`, and both probes push further toward
//!   `yes` (the answer survives losing the image and the question); the
//!   other half are calm and correctly answer `yes`.
//! * `mixed`: a weighted draw over the three above plus procedural
//!   scenarios, whose truth is their own full-branch answer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use htdc_core::backend::{BranchRows, Script, ScriptedStep};
use htdc_core::{
    default_sampled_layers, log_probs, score_candidates, Backend, BranchKind, CandidateSet, DecodeState,
    SyntheticBackend, SyntheticScenario, DEFAULT_SIGMA_NOISE,
};

use crate::dataset::{ProceduralSpec, ScenarioRef, TaskInstance};
use crate::error::{read_to_string, HarnessError, Result};

const YES: [u32; 2] = [1, 2];
const NO: [u32; 2] = [3, 4];
const ANCHOR: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Calm,
    Oscillating,
    PriorBias,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixWeights {
    pub calm: f64,
    pub oscillating: f64,
    pub prior_bias: f64,
    pub procedural: f64,
}

impl Default for MixWeights {
    fn default() -> Self {
        Self {
            calm: 1.0,
            oscillating: 1.0,
            prior_bias: 1.0,
            procedural: 1.0,
        }
    }
}

fn default_vocab() -> usize {
    24
}

fn default_layers() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub family: Family,
    pub count: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    #[serde(default)]
    pub seed: u64,
    /// Only for `mixed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<MixWeights>,
}

impl Recipe {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.as_ref().display())))
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Data(format!("recipe: {m}")));
        if self.count == 0 {
            return bad("count must be positive".into());
        }
        if self.vocab_size < 6 {
            return bad(format!("vocab_size must be at least 6, got {}", self.vocab_size));
        }
        if self.num_layers < 4 {
            return bad(format!("num_layers must be at least 4, got {}", self.num_layers));
        }
        if self.weights.is_some() && self.family != Family::Mixed {
            return bad("weights only apply to the mixed family".into());
        }
        if let Some(w) = &self.weights {
            let ws = [w.calm, w.oscillating, w.prior_bias, w.procedural];
            if ws.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || ws.iter().sum::<f64>() <= 0.0 {
                return bad("weights must be non-negative with a positive sum".into());
            }
        }
        Ok(())
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Label {
    Yes,
    No,
}

impl Label {
    fn name(self) -> &'static str {
        match self {
            Label::Yes => "yes",
            Label::No => "no",
        }
    }

    fn tokens(self) -> [u32; 2] {
        match self {
            Label::Yes => YES,
            Label::No => NO,
        }
    }

    fn other(self) -> Self {
        match self {
            Label::Yes => Label::No,
            Label::No => Label::Yes,
        }
    }
}

struct Builder<'a> {
    vocab: usize,
    layers: usize,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn filler(&mut self) -> Vec<f64> {
        let mut row: Vec<f64> = (0..self.vocab).map(|_| self.rng.random_range(-0.3..0.3)).collect();
        for t in YES.iter().chain(&NO) {
            row[*t as usize] = 0.0;
        }
        row[ANCHOR] = 0.0;
        row
    }

    fn set(row: &mut [f64], label: Label, v: f64) {
        for t in label.tokens() {
            row[t as usize] = v;
        }
    }

    fn rows(&self, per_layer: impl Fn(usize) -> Vec<f64>) -> BranchRows {
        let layers = (0..self.layers)
            .map(|l| (l, per_layer(l).into_iter().map(round6).collect()))
            .collect();
        let final_logits = per_layer(self.layers - 1).into_iter().map(round6).collect();
        BranchRows { final_logits, layers }
    }

    /// Final-row probe: `final + shift` on the two labels.
    fn probe(full_final: &[f64], lean: Label, shift: f64) -> BranchRows {
        let mut row = full_final.to_vec();
        for t in lean.tokens() {
            row[t as usize] += shift;
        }
        for t in lean.other().tokens() {
            row[t as usize] -= shift;
        }
        BranchRows {
            final_logits: row.into_iter().map(round6).collect(),
            layers: Default::default(),
        }
    }

    fn response(&self, lean: Label, shift: f64) -> BranchRows {
        let zero = vec![0.0; self.vocab];
        Self::probe(&zero, lean, shift)
    }

    /// Steady drift toward `lean`; the probes take evidence for `lean` away.
    fn calm(&mut self, lean: Label) -> ScriptedStep {
        let base = self.filler();
        let rise = self.rng.random_range(2.0..3.0);
        let anchor = self.rng.random_range(1.0..2.0);
        let last = (self.layers - 1) as f64;
        let full = self.rows(|l| {
            let p = l as f64 / last;
            let mut row = base.clone();
            row[ANCHOR] = anchor;
            Self::set(&mut row, lean, rise * p);
            Self::set(&mut row, lean.other(), 0.3 * rise * p);
            row
        });
        let v0_shift = self.rng.random_range(0.8..1.2);
        let x0_shift = self.rng.random_range(1.0..1.5);
        let v0_response = self.response(lean, -v0_shift);
        let x0 = Self::probe(&full.final_logits, lean, -x0_shift);
        ScriptedStep {
            full,
            v0: None,
            v0_response: Some(v0_response),
            x0: Some(x0),
        }
    }

    /// Anchor-to-candidates jump at the first sampled layer, then swaps
    /// ending on `final_lean` with margin `margin`.
    fn hesitant_rows(&mut self, final_lean: Label, margin: f64, counter_margin: f64) -> BranchRows {
        let base = self.filler();
        let j0 = default_sampled_layers(self.layers)[0];
        let anchor = self.rng.random_range(3.0..3.5);
        let height = self.rng.random_range(2.0..2.5);
        let last = self.layers - 1;
        let phase = |l: usize| (l + 1 - j0) / 2;
        self.rows(|l| {
            let mut row = base.clone();
            if l <= j0 {
                row[ANCHOR] = anchor;
                return row;
            }
            let lean = if (phase(last) - phase(l)) % 2 == 0 {
                final_lean
            } else {
                final_lean.other()
            };
            let m = if lean == final_lean { margin } else { counter_margin };
            Self::set(&mut row, lean, height + m);
            Self::set(&mut row, lean.other(), height);
            row
        })
    }

    fn oscillating(&mut self, truth: Label) -> ScriptedStep {
        let final_lean = if self.rng.random_bool(0.5) {
            Label::Yes
        } else {
            Label::No
        };
        let full = self.hesitant_rows(final_lean, 0.02, 0.02);
        let v0_response = self.response(truth, -0.5);
        let x0 = Self::probe(&full.final_logits, truth, -1.0);
        ScriptedStep {
            full,
            v0: None,
            v0_response: Some(v0_response),
            x0: Some(x0),
        }
    }

    /// Leans `yes` on a weak visual basis; dropping the image or the
    /// question makes it lean `yes` harder.
    fn biased(&mut self) -> ScriptedStep {
        let margin = self.rng.random_range(0.2..0.4);
        let full = self.hesitant_rows(Label::Yes, margin, 0.1);
        let v0_shift = self.rng.random_range(0.5..0.7);
        let x0_shift = self.rng.random_range(1.1..1.3);
        let v0_response = self.response(Label::Yes, v0_shift);
        let x0 = Self::probe(&full.final_logits, Label::Yes, x0_shift);
        ScriptedStep {
            full,
            v0: None,
            v0_response: Some(v0_response),
            x0: Some(x0),
        }
    }

    fn scenario(&mut self, step: ScriptedStep) -> ScenarioRef {
        ScenarioRef::Synthetic(SyntheticScenario {
            seed: self.rng.random(),
            vocab_size: self.vocab,
            num_layers: self.layers,
            hidden_dim: htdc_core::backend::synthetic::DEFAULT_HIDDEN_DIM,
            visual_embedding: Vec::new(),
            query_embedding: Vec::new(),
            template_embedding: Vec::new(),
            script: Some(Script { steps: vec![step] }),
        })
    }
}

fn instance(id: String, scenario: ScenarioRef, truth: &str) -> TaskInstance {
    TaskInstance {
        id,
        question: "Is there the object in the image?".into(),
        scenario,
        candidates: CandidateSet::yes_no(YES, NO),
        ground_truth: truth.into(),
        positive_label: Some("yes".into()),
    }
}

fn procedural(id: String, b: &mut Builder<'_>) -> Result<TaskInstance> {
    let spec = ProceduralSpec {
        seed: b.rng.random(),
        vocab_size: b.vocab,
        num_layers: b.layers,
        embed_dim: 8,
    };
    let backend = SyntheticBackend::new(spec.scenario(), DEFAULT_SIGMA_NOISE)?;
    let set = CandidateSet::yes_no(YES, NO);
    let out = Backend::<f64>::forward(&backend, &DecodeState::new(&id, "", Vec::new()), BranchKind::Full, &[])?;
    let scores = score_candidates(&log_probs(&out.final_logits)?, &set)?;
    let truth = if scores.scores[0] >= scores.scores[1] {
        "yes"
    } else {
        "no"
    };
    Ok(instance(id, ScenarioRef::Procedural(spec), truth))
}

#[derive(Clone, Copy)]
enum Kind {
    Calm,
    Oscillating,
    PriorBias,
    Procedural,
}

pub fn generate(recipe: &Recipe) -> Result<Vec<TaskInstance>> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut b = Builder {
        vocab: recipe.vocab_size,
        layers: recipe.num_layers,
        rng: &mut rng,
    };
    let weights = recipe.weights.clone().unwrap_or_default();
    let mix = [
        (Kind::Calm, weights.calm),
        (Kind::Oscillating, weights.oscillating),
        (Kind::PriorBias, weights.prior_bias),
        (Kind::Procedural, weights.procedural),
    ];
    let total: f64 = mix.iter().map(|m| m.1).sum();
    let mut out = Vec::with_capacity(recipe.count);
    for i in 0..recipe.count {
        let kind = match recipe.family {
            Family::Calm => Kind::Calm,
            Family::Oscillating => Kind::Oscillating,
            Family::PriorBias => Kind::PriorBias,
            Family::Mixed => {
                let mut u = b.rng.random_range(0.0..total);
                let mut pick = Kind::Procedural;
                for (k, w) in mix {
                    if u < w {
                        pick = k;
                        break;
                    }
                    u -= w;
                }
                pick
            }
        };
        let inst = match kind {
            Kind::Calm => {
                let truth = if b.rng.random_bool(0.5) { Label::Yes } else { Label::No };
                let step = b.calm(truth);
                instance(format!("calm-{i:05}"), b.scenario(step), truth.name())
            }
            Kind::Oscillating => {
                let truth = if b.rng.random_bool(0.5) { Label::Yes } else { Label::No };
                let step = b.oscillating(truth);
                instance(format!("osc-{i:05}"), b.scenario(step), truth.name())
            }
            Kind::PriorBias => {
                // Alternate within the pure family so the split is exact.
                let biased = match recipe.family {
                    Family::PriorBias => i % 2 == 0,
                    _ => b.rng.random_bool(0.5),
                };
                if biased {
                    let step = b.biased();
                    instance(format!("bias-{i:05}"), b.scenario(step), "no")
                } else {
                    let step = b.calm(Label::Yes);
                    instance(format!("ground-{i:05}"), b.scenario(step), "yes")
                }
            }
            Kind::Procedural => procedural(format!("proc-{i:05}"), &mut b)?,
        };
        out.push(inst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::to_jsonl;

    fn recipe(family: Family, count: usize, seed: u64) -> Recipe {
        Recipe {
            family,
            count,
            vocab_size: 24,
            num_layers: 16,
            seed,
            weights: None,
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = to_jsonl(&generate(&recipe(Family::Mixed, 40, 7)).unwrap());
        let b = to_jsonl(&generate(&recipe(Family::Mixed, 40, 7)).unwrap());
        let c = to_jsonl(&generate(&recipe(Family::Mixed, 40, 8)).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn unknown_family_is_rejected() {
        let r = serde_json::from_str::<Recipe>(r#"{"family":"chaotic","count":3}"#);
        assert!(r.unwrap_err().to_string().contains("unknown variant"));
    }

    #[test]
    fn prior_bias_split_is_exact() {
        let ds = generate(&recipe(Family::PriorBias, 200, 1)).unwrap();
        assert_eq!(ds.iter().filter(|i| i.ground_truth == "no").count(), 100);
    }

    #[test]
    fn recipe_bounds() {
        let mut r = recipe(Family::Calm, 0, 1);
        assert!(generate(&r).is_err());
        r.count = 1;
        r.vocab_size = 4;
        assert!(generate(&r).is_err());
        r.vocab_size = 24;
        r.weights = Some(MixWeights::default());
        assert!(generate(&r).is_err());
    }
}
