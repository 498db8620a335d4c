//! Decode every instance once and aggregate.

use std::time::Instant;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use htdc_core::{
    decode_step, greedy_prefix, load_trace, Backend, CountingBackend, DecodeState, SyntheticBackend, SyntheticScenario,
    TraceBackend,
};

use crate::config::HarnessConfig;
use crate::dataset::{to_jsonl, BackendSpec, ScenarioRef, TaskInstance};
use crate::error::{read_to_string, HarnessError, Result};
use crate::metrics::{timing, Confusion, Timing};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub id: String,
    pub chosen: Option<String>,
    pub truth: String,
    pub positive: String,
    pub correct: bool,
    pub triggered: bool,
    pub flipped: bool,
    pub apc_fallback: bool,
    pub forward_passes: u32,
    pub w_t: f64,
    pub hes: f64,
    /// Largest |d_v| over candidates; 0 when the probes did not run.
    pub max_abs_d_v: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub instances: Vec<InstanceResult>,
    pub decoded: usize,
    pub failed: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: Confusion,
    pub trigger_rate: f64,
    pub n_fwd: f64,
    pub flip_rate: f64,
    pub max_abs_d_v: f64,
    pub backend: String,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    /// Excluded from `fingerprint`.
    pub wall_ms_per_step: Timing,
    /// SHA-256 of this report's canonical JSON without timing.
    pub fingerprint: String,
}

impl RunReport {
    fn compute_fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serialises");
        let m = v.as_object_mut().expect("report is an object");
        m.remove("wall_ms_per_step");
        m.remove("fingerprint");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

enum Shared {
    None,
    Synthetic(SyntheticBackend),
    Trace(TraceBackend),
}

impl Shared {
    fn open(spec: &BackendSpec, cfg: &HarnessConfig) -> Result<Self> {
        Ok(match spec {
            BackendSpec::Synthetic => Shared::None,
            BackendSpec::SyntheticFile(p) => {
                let sc: SyntheticScenario = serde_json::from_str(&read_to_string(p)?)
                    .map_err(|e| HarnessError::Data(format!("{}: {e}", p.display())))?;
                Shared::Synthetic(
                    SyntheticBackend::new(sc, cfg.backend.sigma_noise)
                        .map_err(|e| HarnessError::Data(format!("{}: {e}", p.display())))?
                        .with_noise_seed(cfg.run.seed),
                )
            }
            BackendSpec::Trace(p) => {
                Shared::Trace(load_trace(p).map_err(|e| HarnessError::Data(format!("{}: {e}", p.display())))?)
            }
        })
    }

    fn backend(&self) -> Option<&dyn Backend<f64>> {
        match self {
            Shared::None => None,
            Shared::Synthetic(b) => Some(b),
            Shared::Trace(b) => Some(b),
        }
    }
}

enum Owned<'a> {
    Local(SyntheticBackend),
    Shared(&'a dyn Backend<f64>),
}

impl Owned<'_> {
    fn get(&self) -> &dyn Backend<f64> {
        match self {
            Owned::Local(b) => b,
            Owned::Shared(b) => *b,
        }
    }
}

fn resolve<'a>(
    inst: &TaskInstance,
    shared: &'a Shared,
    cfg: &HarnessConfig,
) -> Result<(Owned<'a>, DecodeState), String> {
    let local = |sc: SyntheticScenario| -> Result<(Owned<'a>, DecodeState), String> {
        if shared.backend().is_some() {
            return Err(
                "instance carries its own scenario but a shared backend was given; use `--backend synthetic`".into(),
            );
        }
        let b = SyntheticBackend::new(sc, cfg.backend.sigma_noise)
            .map_err(|e| e.to_string())?
            .with_noise_seed(cfg.run.seed);
        Ok((Owned::Local(b), DecodeState::new(&inst.id, &inst.question, Vec::new())))
    };
    match &inst.scenario {
        ScenarioRef::Synthetic(sc) => local(sc.clone()),
        ScenarioRef::Procedural(p) => local(p.scenario()),
        ScenarioRef::Step(t) => {
            let b = shared
                .backend()
                .ok_or("instance references a step but no shared backend was given (`--backend trace:<path>`)")?;
            let state = greedy_prefix(b, &inst.id, &inst.question, *t).map_err(|e| e.to_string())?;
            Ok((Owned::Shared(b), state))
        }
    }
}

fn decode_one(inst: &TaskInstance, shared: &Shared, cfg: &HarnessConfig) -> Result<InstanceResult> {
    let mut res = InstanceResult {
        id: inst.id.clone(),
        chosen: None,
        truth: inst.ground_truth.clone(),
        positive: inst.positive().to_string(),
        correct: false,
        triggered: false,
        flipped: false,
        apc_fallback: false,
        forward_passes: 0,
        w_t: 0.0,
        hes: 0.0,
        max_abs_d_v: 0.0,
        error: None,
        wall_ms: 0.0,
    };
    let (backend, state) = match resolve(inst, shared, cfg) {
        Ok(x) => x,
        Err(e) => {
            warn!("instance `{}`: {e}", inst.id);
            res.error = Some(e);
            return Ok(res);
        }
    };
    let b = backend.get();
    let engine = cfg.engine_config(&b.available_layers(), b.num_layers())?;
    let counting = CountingBackend::new(b);
    let start = Instant::now();
    let out = decode_step(&state, &counting, &engine, &inst.candidates);
    res.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let out = match out {
        Ok(o) => o,
        Err(htdc_core::Error::Config(m)) => return Err(HarnessError::Usage(format!("instance `{}`: {m}", inst.id))),
        Err(e) => {
            warn!("instance `{}`: {e}", inst.id);
            res.error = Some(e.to_string());
            return Ok(res);
        }
    };
    if counting.total_calls() != u64::from(out.forward_passes) {
        return Err(HarnessError::Invariant(format!(
            "instance `{}`: engine reported {} forward passes, backend saw {}",
            inst.id,
            out.forward_passes,
            counting.total_calls()
        )));
    }
    if out.forward_passes != 1 + 2 * u32::from(out.triggered) {
        return Err(HarnessError::Invariant(format!(
            "instance `{}`: {} forward passes with triggered = {}",
            inst.id, out.forward_passes, out.triggered
        )));
    }
    debug!(
        "{}: {} (hes {:.4}, w {:.4})",
        inst.id, out.chosen_label, out.hesitation.hes, out.hesitation.gate_weight
    );
    res.correct = out.chosen_label == inst.ground_truth;
    res.chosen = Some(out.chosen_label);
    res.triggered = out.triggered;
    res.flipped = out.flipped;
    res.apc_fallback = out.apc_fallback;
    res.forward_passes = out.forward_passes;
    res.w_t = out.hesitation.gate_weight;
    res.hes = out.hesitation.hes;
    res.max_abs_d_v = out
        .signals
        .map_or(0.0, |s| s.d_v.iter().fold(0.0, |m: f64, d| m.max(d.abs())));
    Ok(res)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Usage(format!("cannot start {workers} workers: {e}")))
}

/// Decode every instance. Per-instance failures are recorded in the report
/// (`failed > 0`); configuration problems and invariant violations abort.
pub fn run(cfg: &HarnessConfig, instances: &[TaskInstance], spec: &BackendSpec) -> Result<RunReport> {
    cfg.validate()?;
    let shared = Shared::open(spec, cfg)?;
    let results: Vec<InstanceResult> = pool(cfg.run.workers)?.install(|| {
        instances
            .par_iter()
            .map(|i| decode_one(i, &shared, cfg))
            .collect::<Result<_>>()
    })?;
    aggregate(results, cfg, instances, spec)
}

fn aggregate(
    mut results: Vec<InstanceResult>,
    cfg: &HarnessConfig,
    instances: &[TaskInstance],
    spec: &BackendSpec,
) -> Result<RunReport> {
    results.sort_by(|a, b| a.id.cmp(&b.id));
    let ok: Vec<&InstanceResult> = results.iter().filter(|r| r.error.is_none()).collect();
    let n = ok.len();
    let rate = |count: usize| if n == 0 { 0.0 } else { count as f64 / n as f64 };
    let mut confusion = Confusion::default();
    for r in &ok {
        confusion.add(r.chosen.as_deref().unwrap_or_default(), &r.truth, &r.positive);
    }
    let triggers = ok.iter().filter(|r| r.triggered).count();
    let passes: u64 = ok.iter().map(|r| u64::from(r.forward_passes)).sum();
    let trigger_rate = rate(triggers);
    let n_fwd = if n == 0 { 0.0 } else { passes as f64 / n as f64 };
    if n > 0 && (n_fwd - (1.0 + 2.0 * trigger_rate)).abs() > 1e-12 {
        return Err(HarnessError::Invariant(format!(
            "n_fwd = {n_fwd} but 1 + 2 r = {}",
            1.0 + 2.0 * trigger_rate
        )));
    }
    let walls: Vec<f64> = ok.iter().map(|r| r.wall_ms).collect();
    let mut report = RunReport {
        decoded: n,
        failed: results.len() - n,
        accuracy: rate(ok.iter().filter(|r| r.correct).count()),
        f1: confusion.f1(),
        confusion,
        trigger_rate,
        n_fwd,
        flip_rate: rate(ok.iter().filter(|r| r.flipped).count()),
        max_abs_d_v: ok.iter().fold(0.0, |m: f64, r| m.max(r.max_abs_d_v)),
        backend: spec.to_string(),
        config_fingerprint: cfg.fingerprint(),
        dataset_fingerprint: hex::encode(Sha256::digest(to_jsonl(instances).as_bytes())),
        wall_ms_per_step: timing(&walls),
        fingerprint: String::new(),
        instances: results,
    };
    report.fingerprint = report.compute_fingerprint();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ProceduralSpec;
    use htdc_core::CandidateSet;

    fn procedural(n: usize) -> Vec<TaskInstance> {
        (0..n)
            .map(|i| TaskInstance {
                id: format!("p{i:03}"),
                question: String::new(),
                scenario: ScenarioRef::Procedural(ProceduralSpec {
                    seed: i as u64,
                    vocab_size: 24,
                    num_layers: 8,
                    embed_dim: 8,
                }),
                candidates: CandidateSet::yes_no([1, 2], [3, 4]),
                ground_truth: "yes".into(),
                positive_label: None,
            })
            .collect()
    }

    #[test]
    fn static_mode_costs_three_passes() {
        let mut cfg = HarnessConfig::default();
        cfg.calibration.gate_mode = htdc_core::GateMode::Static;
        let r = run(&cfg, &procedural(20), &BackendSpec::Synthetic).unwrap();
        assert_eq!(r.n_fwd, 3.0);
        assert_eq!(r.trigger_rate, 1.0);
    }

    #[test]
    fn regular_decoder_never_probes() {
        let mut cfg = HarnessConfig::default();
        cfg.run.decoder = crate::config::Decoder::Regular;
        let r = run(&cfg, &procedural(20), &BackendSpec::Synthetic).unwrap();
        assert_eq!(r.n_fwd, 1.0);
        assert_eq!(r.flip_rate, 0.0);
    }

    #[test]
    fn worker_count_does_not_change_the_fingerprint() {
        let ds = procedural(30);
        let mut cfg = HarnessConfig::default();
        cfg.run.workers = 1;
        let a = run(&cfg, &ds, &BackendSpec::Synthetic).unwrap();
        cfg.run.workers = 4;
        let b = run(&cfg, &ds, &BackendSpec::Synthetic).unwrap();
        let strip = |r: &RunReport| {
            r.instances
                .iter()
                .map(|i| InstanceResult {
                    wall_ms: 0.0,
                    ..i.clone()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.fingerprint, b.fingerprint);
    }

    #[test]
    fn unresolvable_instances_are_reported() {
        let mut ds = procedural(3);
        ds[1].scenario = ScenarioRef::Step(0);
        let r = run(&HarnessConfig::default(), &ds, &BackendSpec::Synthetic).unwrap();
        assert_eq!(r.failed, 1);
        assert_eq!(r.decoded, 2);
        assert!(r.instances[1].error.as_deref().unwrap().contains("shared backend"));
    }
}
