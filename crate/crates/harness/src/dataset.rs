//! Task datasets (JSON lines, one instance per line) and backend specs.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use htdc_core::{CandidateSet, SyntheticScenario};

use crate::error::{read_to_string, HarnessError, Result};

fn default_embed_dim() -> usize {
    8
}

/// Compact form of a procedural synthetic scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProceduralSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub num_layers: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

impl ProceduralSpec {
    pub fn scenario(&self) -> SyntheticScenario {
        SyntheticScenario::procedural(self.seed, self.vocab_size, self.num_layers, self.embed_dim)
    }
}

/// Where an instance's logits come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioRef {
    /// Inline scenario, decoded at its first step.
    Synthetic(SyntheticScenario),
    Procedural(ProceduralSpec),
    /// Position in the shared backend given on the command line, reached by
    /// greedy decoding.
    Step(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInstance {
    pub id: String,
    #[serde(default)]
    pub question: String,
    pub scenario: ScenarioRef,
    pub candidates: CandidateSet,
    pub ground_truth: String,
    /// Positive class for F1; defaults to the first candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_label: Option<String>,
}

impl TaskInstance {
    pub fn positive(&self) -> &str {
        self.positive_label
            .as_deref()
            .unwrap_or(&self.candidates.candidates()[0].label)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.candidates.index_of(&self.ground_truth).is_none() {
            return Err(format!(
                "ground_truth `{}` is not a candidate label ({:?})",
                self.ground_truth,
                self.candidates.labels()
            ));
        }
        if let Some(p) = &self.positive_label {
            if self.candidates.index_of(p).is_none() {
                return Err(format!("positive_label `{p}` is not a candidate label"));
            }
        }
        Ok(())
    }
}

pub fn parse_dataset(text: &str, source: &str) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| HarnessError::Data(format!("{source}:{}: {m}", i + 1));
        let inst: TaskInstance = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        inst.validate().map_err(at)?;
        if !ids.insert(inst.id.clone()) {
            return Err(at(format!("duplicate id `{}`", inst.id)));
        }
        out.push(inst);
    }
    if out.is_empty() {
        return Err(HarnessError::Data(format!("{source}: dataset is empty")));
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TaskInstance>> {
    let text = read_to_string(&path)?;
    parse_dataset(&text, &path.as_ref().display().to_string())
}

pub fn to_jsonl(instances: &[TaskInstance]) -> String {
    let mut s = String::new();
    for inst in instances {
        s.push_str(&serde_json::to_string(inst).expect("instance serialises"));
        s.push('\n');
    }
    s
}

/// `synthetic`, `synthetic:<scenario.json>` or `trace:<path>`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum BackendSpec {
    /// Each instance carries its own scenario.
    #[default]
    Synthetic,
    SyntheticFile(PathBuf),
    Trace(PathBuf),
}

impl FromStr for BackendSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "synthetic" => Ok(Self::Synthetic),
            Some(("synthetic", p)) if !p.is_empty() => Ok(Self::SyntheticFile(p.into())),
            Some(("trace", p)) if !p.is_empty() => Ok(Self::Trace(p.into())),
            _ => Err(HarnessError::Usage(format!(
                "backend must be `synthetic`, `synthetic:<scenario.json>` or `trace:<path>`, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Synthetic => f.write_str("synthetic"),
            Self::SyntheticFile(p) => write!(f, "synthetic:{}", p.display()),
            Self::Trace(p) => write!(f, "trace:{}", p.display()),
        }
    }
}
