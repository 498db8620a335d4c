//! Line-oriented trace format and the replay backend built on it.
//!
//! ```text
//! {"format":"htdc-trace","version":1,"vocab_size":V,"layers":[..],"stored_tokens":..,"dtype":"f32"}
//! {"step":0,"branches":{"full":B,"v0":B,"x0":B}}
//! ...
//! {"checksum":"<hex sha256 of every preceding byte>"}
//! ```
//!
//! `B` is `{"stored_ids":[..], "final":"<b64>", "layers":{"<j>":"<b64>"}}`
//! with rows as base64 little-endian `f32`. `stored_ids` is present only
//! under the `topn_union_candidates` policy; unstored tokens replay as
//! negative infinity.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::{Backend, BranchKind, DecodeState, StepLogits};
use crate::error::{Error, Result};
use crate::numerics::top_k_indices;
use crate::scalar::Scalar;

pub const TRACE_FORMAT: &str = "htdc-trace";
pub const TRACE_VERSION: u64 = 1;
pub const TRACE_DTYPE: &str = "f32";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoredTokenPolicy {
    Full,
    /// Top-`n` of the full branch's final logits, unioned with every
    /// candidate token.
    TopNUnionCandidates {
        n: usize,
    },
}

impl Serialize for StoredTokenPolicy {
    fn serialize<Ser: Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        match self {
            StoredTokenPolicy::Full => s.serialize_str("full"),
            StoredTokenPolicy::TopNUnionCandidates { n } => {
                let mut m = s.serialize_map(Some(2))?;
                m.serialize_entry("policy", "topn_union_candidates")?;
                m.serialize_entry("n", n)?;
                m.end()
            }
        }
    }
}

impl StoredTokenPolicy {
    fn from_value(v: &Value) -> Option<Self> {
        match v {
            Value::String(s) if s == "full" => Some(Self::Full),
            Value::Object(m) => {
                if m.len() != 2 || m.get("policy")?.as_str()? != "topn_union_candidates" {
                    return None;
                }
                let n = m.get("n")?.as_u64()?;
                (n >= 1).then_some(Self::TopNUnionCandidates { n: n as usize })
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u64,
    pub vocab_size: usize,
    pub layers: Vec<usize>,
    pub stored_tokens: StoredTokenPolicy,
    pub dtype: String,
    /// Absent means all three branches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branches_recorded: Option<Vec<BranchKind>>,
}

impl TraceHeader {
    pub fn new(vocab_size: usize, layers: Vec<usize>, stored_tokens: StoredTokenPolicy) -> Self {
        Self {
            format: TRACE_FORMAT.into(),
            version: TRACE_VERSION,
            vocab_size,
            layers,
            stored_tokens,
            dtype: TRACE_DTYPE.into(),
            branches_recorded: None,
        }
    }

    /// Header for a trace that records only the full branch.
    pub fn full_only(mut self) -> Self {
        self.branches_recorded = Some(vec![BranchKind::Full]);
        self
    }

    pub fn recorded_branches(&self) -> Vec<BranchKind> {
        self.branches_recorded
            .clone()
            .unwrap_or_else(|| BranchKind::ALL.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchRecord {
    pub final_logits: Vec<f32>,
    pub layers: BTreeMap<usize, Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Shared by every branch of the step; `None` under the full policy.
    pub stored_ids: Option<Vec<u32>>,
    pub branches: BTreeMap<BranchKind, BranchRecord>,
}

/// One rule violation found while reading a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub line: usize,
    pub rule: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceValidation {
    pub valid: bool,
    pub steps: usize,
    pub violations: Vec<Violation>,
}

struct Parsed {
    header: Option<TraceHeader>,
    steps: Vec<StepRecord>,
    violations: Vec<Violation>,
}

fn encode_row(row: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(row.len() * 4);
    for v in row {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_row(s: &str) -> std::result::Result<Vec<f32>, String> {
    let bytes = B64.decode(s).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} bytes is not a whole number of f32 values", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

struct Ctx {
    violations: Vec<Violation>,
}

impl Ctx {
    fn flag(&mut self, line: usize, rule: &'static str, message: impl Into<String>) {
        self.violations.push(Violation {
            line,
            rule,
            message: message.into(),
        });
    }
}

fn parse_header(line: usize, text: &str, ctx: &mut Ctx) -> Option<TraceHeader> {
    let v: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => {
            ctx.flag(line, "json", format!("header is not valid JSON: {e}"));
            return None;
        }
    };
    let Some(m) = v.as_object() else {
        ctx.flag(line, "header", "header must be a JSON object");
        return None;
    };
    let before = ctx.violations.len();
    let known = [
        "format",
        "version",
        "vocab_size",
        "layers",
        "stored_tokens",
        "dtype",
        "branches_recorded",
    ];
    for k in m.keys().filter(|k| !known.contains(&k.as_str())) {
        ctx.flag(line, "header", format!("unknown header field `{k}`"));
    }
    if m.get("format").and_then(Value::as_str) != Some(TRACE_FORMAT) {
        ctx.flag(line, "format", format!("format must be \"{TRACE_FORMAT}\""));
    }
    if m.get("version").and_then(Value::as_u64) != Some(TRACE_VERSION) {
        ctx.flag(line, "version", format!("unsupported version {:?}", m.get("version")));
    }
    let vocab_size = match m.get("vocab_size").and_then(Value::as_u64) {
        Some(v) if v > 0 => v as usize,
        _ => {
            ctx.flag(line, "vocab_size", "vocab_size must be a positive integer");
            0
        }
    };
    let layers: Vec<usize> = match m.get("layers").and_then(Value::as_array) {
        Some(arr) => {
            let ls: Option<Vec<usize>> = arr.iter().map(|x| x.as_u64().map(|u| u as usize)).collect();
            match ls {
                Some(ls) if !ls.is_empty() && ls.windows(2).all(|w| w[0] < w[1]) => ls,
                _ => {
                    ctx.flag(
                        line,
                        "layers",
                        "layers must be a non-empty strictly ascending list of integers",
                    );
                    Vec::new()
                }
            }
        }
        None => {
            ctx.flag(line, "layers", "missing layers list");
            Vec::new()
        }
    };
    let stored_tokens = match m.get("stored_tokens").and_then(StoredTokenPolicy::from_value) {
        Some(p) => p,
        None => {
            ctx.flag(
                line,
                "stored_tokens",
                "stored_tokens must be \"full\" or {\"policy\":\"topn_union_candidates\",\"n\":N}",
            );
            StoredTokenPolicy::Full
        }
    };
    if m.get("dtype").and_then(Value::as_str) != Some(TRACE_DTYPE) {
        ctx.flag(line, "dtype", format!("dtype must be \"{TRACE_DTYPE}\""));
    }
    let branches_recorded = match m.get("branches_recorded") {
        None => None,
        Some(v) => {
            let parsed: Option<Vec<BranchKind>> = v
                .as_array()
                .and_then(|a| a.iter().map(|b| b.as_str().and_then(BranchKind::parse)).collect());
            match parsed {
                Some(bs) if bs.contains(&BranchKind::Full) && bs.iter().collect::<BTreeSet<_>>().len() == bs.len() => {
                    Some(bs)
                }
                _ => {
                    ctx.flag(
                        line,
                        "branches_recorded",
                        "branches_recorded must list unique branch names including \"full\"",
                    );
                    None
                }
            }
        }
    };
    if ctx.violations.len() > before {
        return None;
    }
    Some(TraceHeader {
        format: TRACE_FORMAT.into(),
        version: TRACE_VERSION,
        vocab_size,
        layers,
        stored_tokens,
        dtype: TRACE_DTYPE.into(),
        branches_recorded,
    })
}

fn parse_row(line: usize, what: &str, v: Option<&Value>, expected_len: usize, ctx: &mut Ctx) -> Option<Vec<f32>> {
    let Some(s) = v.and_then(Value::as_str) else {
        ctx.flag(line, "step_schema", format!("{what} must be a base64 string"));
        return None;
    };
    match decode_row(s) {
        Err(e) => {
            ctx.flag(line, "base64", format!("{what}: {e}"));
            None
        }
        Ok(row) if row.len() != expected_len => {
            ctx.flag(
                line,
                "row_length",
                format!("{what} has {} values, expected {expected_len}", row.len()),
            );
            None
        }
        Ok(row) if row.iter().any(|x| x.is_nan()) => {
            ctx.flag(line, "nan", format!("{what} contains NaN"));
            None
        }
        Ok(row) => Some(row),
    }
}

fn parse_branch(
    line: usize,
    name: &str,
    v: &Value,
    header: &TraceHeader,
    ctx: &mut Ctx,
) -> Option<(Option<Vec<u32>>, BranchRecord)> {
    let Some(m) = v.as_object() else {
        ctx.flag(line, "step_schema", format!("branch `{name}` must be an object"));
        return None;
    };
    let before = ctx.violations.len();
    for k in m
        .keys()
        .filter(|k| !["stored_ids", "final", "layers"].contains(&k.as_str()))
    {
        ctx.flag(line, "step_schema", format!("branch `{name}` has unknown field `{k}`"));
    }
    let stored_ids: Option<Vec<u32>> = match (header.stored_tokens, m.get("stored_ids")) {
        (StoredTokenPolicy::Full, None) => None,
        (StoredTokenPolicy::Full, Some(_)) => {
            ctx.flag(
                line,
                "stored_ids",
                format!("branch `{name}`: stored_ids present under the full policy"),
            );
            None
        }
        (StoredTokenPolicy::TopNUnionCandidates { .. }, None) => {
            ctx.flag(
                line,
                "stored_ids",
                format!("branch `{name}`: stored_ids required under topn_union_candidates"),
            );
            None
        }
        (StoredTokenPolicy::TopNUnionCandidates { n }, Some(v)) => {
            let ids: Option<Vec<u32>> = v.as_array().and_then(|a| {
                a.iter()
                    .map(|x| x.as_u64().and_then(|u| u32::try_from(u).ok()))
                    .collect()
            });
            match ids {
                Some(ids)
                    if ids.windows(2).all(|w| w[0] < w[1])
                        && ids.iter().all(|&t| (t as usize) < header.vocab_size)
                        && ids.len() >= n.min(header.vocab_size) =>
                {
                    Some(ids)
                }
                _ => {
                    ctx.flag(
                        line,
                        "stored_ids",
                        format!("branch `{name}`: stored_ids must be ascending unique ids below vocab_size, at least min(n, vocab_size) long"),
                    );
                    None
                }
            }
        }
    };
    let row_len = stored_ids.as_ref().map_or(header.vocab_size, Vec::len);
    let final_logits = parse_row(line, &format!("branch `{name}` final"), m.get("final"), row_len, ctx);
    let mut layers = BTreeMap::new();
    match m.get("layers").and_then(Value::as_object) {
        None => ctx.flag(
            line,
            "step_schema",
            format!("branch `{name}`: layers must be an object"),
        ),
        Some(lm) => {
            for (k, row) in lm {
                match k.parse::<usize>() {
                    Ok(j) if header.layers.contains(&j) => {
                        if let Some(r) = parse_row(line, &format!("branch `{name}` layer {j}"), Some(row), row_len, ctx)
                        {
                            layers.insert(j, r);
                        }
                    }
                    _ => ctx.flag(
                        line,
                        "layer_coverage",
                        format!("branch `{name}`: layer `{k}` not declared in header"),
                    ),
                }
            }
            for j in header.layers.iter().filter(|j| !lm.contains_key(&j.to_string())) {
                ctx.flag(line, "layer_coverage", format!("branch `{name}`: missing layer {j}"));
            }
        }
    }
    if ctx.violations.len() > before {
        return None;
    }
    Some((
        stored_ids,
        BranchRecord {
            final_logits: final_logits?,
            layers,
        },
    ))
}

fn parse_step(
    line: usize,
    expected_step: usize,
    text: &str,
    header: &TraceHeader,
    ctx: &mut Ctx,
) -> Option<StepRecord> {
    let v: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => {
            ctx.flag(line, "json", format!("not valid JSON: {e}"));
            return None;
        }
    };
    let Some(m) = v.as_object() else {
        ctx.flag(line, "step_schema", "step line must be a JSON object");
        return None;
    };
    let before = ctx.violations.len();
    for k in m.keys().filter(|k| !["step", "branches"].contains(&k.as_str())) {
        ctx.flag(line, "step_schema", format!("unknown field `{k}`"));
    }
    match m.get("step").and_then(Value::as_u64) {
        Some(s) if s as usize == expected_step => {}
        Some(s) => ctx.flag(line, "step_order", format!("expected step {expected_step}, found {s}")),
        None => ctx.flag(line, "step_schema", "missing integer `step`"),
    }
    let empty = Map::new();
    let branches_v = match m.get("branches").and_then(Value::as_object) {
        Some(b) => b,
        None => {
            ctx.flag(line, "step_schema", "missing `branches` object");
            &empty
        }
    };
    let recorded = header.recorded_branches();
    for name in branches_v.keys() {
        match BranchKind::parse(name) {
            Some(b) if recorded.contains(&b) => {}
            _ => ctx.flag(
                line,
                "branch_unexpected",
                format!("branch `{name}` is not declared as recorded"),
            ),
        }
    }
    let mut stored: Option<Option<Vec<u32>>> = None;
    let mut branches = BTreeMap::new();
    for b in &recorded {
        let Some(bv) = branches_v.get(b.as_str()) else {
            ctx.flag(line, "branch_missing", format!("branch `{b}` missing"));
            continue;
        };
        if let Some((ids, rec)) = parse_branch(line, b.as_str(), bv, header, ctx) {
            match &stored {
                None => stored = Some(ids),
                Some(prev) if *prev != ids => {
                    ctx.flag(
                        line,
                        "stored_ids",
                        format!("branch `{b}` stores a different token set than the other branches"),
                    );
                }
                Some(_) => {}
            }
            branches.insert(*b, rec);
        }
    }
    if ctx.violations.len() > before {
        return None;
    }
    Some(StepRecord {
        stored_ids: stored.flatten(),
        branches,
    })
}

fn checksum_of(line: &str) -> Option<String> {
    let v: Value = serde_json::from_str(line).ok()?;
    let m = v.as_object()?;
    if m.len() != 1 {
        return None;
    }
    let h = m.get("checksum")?.as_str()?;
    (h.len() == 64 && h.bytes().all(|c| c.is_ascii_hexdigit())).then(|| h.to_ascii_lowercase())
}

fn parse(bytes: &[u8]) -> Parsed {
    let mut ctx = Ctx { violations: Vec::new() };
    let Ok(text) = std::str::from_utf8(bytes) else {
        ctx.flag(0, "utf8", "trace is not valid UTF-8");
        return Parsed {
            header: None,
            steps: Vec::new(),
            violations: ctx.violations,
        };
    };

    // (line number, byte offset, content)
    let mut lines: Vec<(usize, usize, &str)> = Vec::new();
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        lines.push((i + 1, offset, l.strip_suffix('\n').unwrap_or(l)));
        offset += l.len();
    }

    let mut body = &lines[..];
    match lines.last() {
        Some(&(n, start, last)) if lines.len() >= 2 => match checksum_of(last) {
            Some(expected) => {
                let actual = hex::encode(Sha256::digest(&bytes[..start]));
                if actual != expected {
                    ctx.flag(
                        n,
                        "checksum",
                        format!("checksum mismatch: recorded {expected}, computed {actual}"),
                    );
                }
                body = &lines[..lines.len() - 1];
            }
            None => ctx.flag(n, "checksum", "last line is not a checksum record (truncated trace?)"),
        },
        _ => ctx.flag(lines.len(), "checksum", "trace has no checksum line"),
    }

    let Some(&(hn, _, htext)) = body.first() else {
        ctx.flag(1, "header", "missing header line");
        return Parsed {
            header: None,
            steps: Vec::new(),
            violations: ctx.violations,
        };
    };
    let header = parse_header(hn, htext, &mut ctx);
    let mut steps = Vec::new();
    if let Some(h) = &header {
        for (i, &(n, _, t)) in body[1..].iter().enumerate() {
            if t.trim().is_empty() {
                ctx.flag(n, "step_schema", "blank line");
                continue;
            }
            if let Some(s) = parse_step(n, i, t, h, &mut ctx) {
                steps.push(s);
            }
        }
    }
    Parsed {
        header,
        steps,
        violations: ctx.violations,
    }
}

/// Check every rule and collect all violations.
pub fn validate_trace_bytes(bytes: &[u8]) -> TraceValidation {
    let p = parse(bytes);
    TraceValidation {
        valid: p.violations.is_empty(),
        steps: p.steps.len(),
        violations: p.violations,
    }
}

pub fn validate_trace(path: impl AsRef<Path>) -> Result<TraceValidation> {
    Ok(validate_trace_bytes(&std::fs::read(path)?))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<TraceBackend> {
    TraceBackend::from_bytes(&std::fs::read(path)?)
}

/// Replay backend over a fully validated trace.
#[derive(Debug, Clone)]
pub struct TraceBackend {
    header: TraceHeader,
    steps: Vec<StepRecord>,
}

impl TraceBackend {
    /// Fails closed: any violation rejects the whole trace.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let p = parse(bytes);
        let first = |pred: &dyn Fn(&Violation) -> bool| p.violations.iter().find(|v| pred(v)).cloned();
        let to_parse_err = |v: Violation| Error::TraceParse {
            line: v.line,
            message: format!("[{}] {}", v.rule, v.message),
        };
        if let Some(v) = first(&|v| v.line <= 1 && v.rule != "checksum") {
            return Err(to_parse_err(v));
        }
        if let Some(v) = first(&|v| v.rule == "checksum") {
            return Err(Error::Integrity(format!("line {}: {}", v.line, v.message)));
        }
        if let Some(v) = p.violations.into_iter().next() {
            return Err(to_parse_err(v));
        }
        Ok(Self {
            header: p.header.expect("no violations implies a header"),
            steps: p.steps,
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn layers(&self) -> &[usize] {
        &self.header.layers
    }

    pub fn stored_tokens(&self) -> StoredTokenPolicy {
        self.header.stored_tokens
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, t: usize) -> Option<&StepRecord> {
        self.steps.get(t)
    }
}

impl<S: Scalar> Backend<S> for TraceBackend {
    fn vocab_size(&self) -> usize {
        self.header.vocab_size
    }

    fn num_layers(&self) -> usize {
        self.header.layers.last().map_or(0, |&l| l + 1)
    }

    fn available_layers(&self) -> Vec<usize> {
        self.header.layers.clone()
    }

    fn forward(&self, state: &DecodeState, branch: BranchKind, layers: &[usize]) -> Result<StepLogits<S>> {
        let t = state.step_index;
        let not_recorded = || Error::BranchNotRecorded { step: t, branch };
        let step = self.steps.get(t).ok_or_else(not_recorded)?;
        let rec = step.branches.get(&branch).ok_or_else(not_recorded)?;
        let vocab = self.header.vocab_size;
        let expand = |row: &[f32]| -> Vec<S> {
            match &step.stored_ids {
                None => row.iter().map(|&v| S::of(f64::from(v))).collect(),
                Some(ids) => {
                    let mut out = vec![S::neg_infinity(); vocab];
                    for (&id, &v) in ids.iter().zip(row) {
                        out[id as usize] = S::of(f64::from(v));
                    }
                    out
                }
            }
        };
        let mut layer_logits = BTreeMap::new();
        for &j in layers {
            let row = rec
                .layers
                .get(&j)
                .ok_or(Error::LayerNotRecorded { step: t, layer: j })?;
            layer_logits.insert(j, expand(row));
        }
        Ok(StepLogits {
            branch,
            final_logits: expand(&rec.final_logits),
            layer_logits,
            forward_cost: 1,
        })
    }
}

/// Token ids kept for one step, ascending; `None` under the full policy.
pub fn select_stored_ids<S: Scalar>(
    policy: StoredTokenPolicy,
    full_final: &[S],
    candidate_ids: &BTreeSet<u32>,
) -> Option<Vec<u32>> {
    match policy {
        StoredTokenPolicy::Full => None,
        StoredTokenPolicy::TopNUnionCandidates { n } => {
            let mut ids: BTreeSet<u32> = top_k_indices(full_final, n).into_iter().map(|i| i as u32).collect();
            ids.extend(candidate_ids.iter().copied());
            Some(ids.into_iter().collect())
        }
    }
}

/// Builds a trace file from full-vocabulary rows, applying the header's
/// stored-token policy.
#[derive(Debug)]
pub struct TraceWriter {
    header: TraceHeader,
    candidate_ids: BTreeSet<u32>,
    buf: Vec<u8>,
    next_step: usize,
}

#[derive(Serialize)]
struct BranchLine<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    stored_ids: Option<&'a [u32]>,
    #[serde(rename = "final")]
    final_logits: String,
    layers: BTreeMap<usize, String>,
}

#[derive(Serialize)]
struct StepLine<'a> {
    step: usize,
    branches: BTreeMap<&'static str, BranchLine<'a>>,
}

fn narrow<S: Scalar>(row: &[S]) -> Vec<f32> {
    row.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()
}

impl TraceWriter {
    pub fn new(header: TraceHeader, candidate_ids: impl IntoIterator<Item = u32>) -> Result<Self> {
        let mut buf = serde_json::to_vec(&header).map_err(|e| Error::config(e.to_string()))?;
        buf.push(b'\n');
        let w = Self {
            header,
            candidate_ids: candidate_ids.into_iter().collect(),
            buf,
            next_step: 0,
        };
        // Round-trip the header through the reader's rules.
        let mut ctx = Ctx { violations: Vec::new() };
        let line = std::str::from_utf8(&w.buf).expect("serde_json emits UTF-8");
        if parse_header(1, line.trim_end(), &mut ctx).is_none() {
            let v = &ctx.violations[0];
            return Err(Error::config(format!(
                "invalid trace header: [{}] {}",
                v.rule, v.message
            )));
        }
        Ok(w)
    }

    /// Append one step. `branches` must hold a full-vocabulary [`StepLogits`]
    /// for every recorded branch, each carrying every header layer.
    pub fn push_step<S: Scalar>(&mut self, branches: &[&StepLogits<S>]) -> Result<()> {
        let recorded = self.header.recorded_branches();
        let vocab = self.header.vocab_size;
        let full = branches
            .iter()
            .find(|b| b.branch == BranchKind::Full)
            .ok_or(Error::BranchNotRecorded {
                step: self.next_step,
                branch: BranchKind::Full,
            })?;
        let stored_ids = select_stored_ids(self.header.stored_tokens, &full.final_logits, &self.candidate_ids);
        let restrict = |row: &[S]| -> Result<String> {
            if row.len() != vocab {
                return Err(Error::LengthMismatch {
                    expected: vocab,
                    actual: row.len(),
                });
            }
            let narrow_row = narrow(row);
            Ok(match &stored_ids {
                None => encode_row(&narrow_row),
                Some(ids) => encode_row(&ids.iter().map(|&i| narrow_row[i as usize]).collect::<Vec<_>>()),
            })
        };
        let mut lines = BTreeMap::new();
        for b in &recorded {
            let logits = branches
                .iter()
                .find(|x| x.branch == *b)
                .ok_or(Error::BranchNotRecorded {
                    step: self.next_step,
                    branch: *b,
                })?;
            let mut layers = BTreeMap::new();
            for &j in &self.header.layers {
                layers.insert(j, restrict(logits.layer(j)?)?);
            }
            lines.insert(
                b.as_str(),
                BranchLine {
                    stored_ids: stored_ids.as_deref(),
                    final_logits: restrict(&logits.final_logits)?,
                    layers,
                },
            );
        }
        let line = StepLine {
            step: self.next_step,
            branches: lines,
        };
        serde_json::to_writer(&mut self.buf, &line).map_err(|e| Error::config(e.to_string()))?;
        self.buf.push(b'\n');
        self.next_step += 1;
        Ok(())
    }

    /// Append the checksum line and return the file contents.
    pub fn finish(mut self) -> Vec<u8> {
        let digest = hex::encode(Sha256::digest(&self.buf));
        self.buf
            .extend_from_slice(format!("{{\"checksum\":\"{digest}\"}}\n").as_bytes());
        self.buf
    }
}
