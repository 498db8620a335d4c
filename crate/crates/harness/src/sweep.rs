//! One-axis ablation sweeps: one full run per value, everything else fixed.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use htdc_core::GateMode;

use crate::config::HarnessConfig;
use crate::dataset::{BackendSpec, TaskInstance};
use crate::error::{write, HarnessError, Result};
use crate::report::write_run_artifacts;
use crate::runner::{run, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    GateModeStaticVsDynamic,
    SigmaNoise,
    LayerDepthK,
    Lambda,
    Epsilon,
    WMin,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::GateModeStaticVsDynamic,
        SweepAxis::SigmaNoise,
        SweepAxis::LayerDepthK,
        SweepAxis::Lambda,
        SweepAxis::Epsilon,
        SweepAxis::WMin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::GateModeStaticVsDynamic => "gate_mode_static_vs_dynamic",
            SweepAxis::SigmaNoise => "sigma_noise",
            SweepAxis::LayerDepthK => "layer_depth_k",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::WMin => "w_min",
        }
    }

    /// Apply one value of this axis to `cfg`.
    pub fn apply(self, cfg: &mut HarnessConfig, value: &str) -> Result<()> {
        let bad = |why: &str| HarnessError::Usage(format!("{}: bad value `{value}`: {why}", self.name()));
        let num = || value.parse::<f64>().map_err(|_| bad("not a number"));
        match self {
            SweepAxis::GateModeStaticVsDynamic => {
                cfg.calibration.gate_mode = match value {
                    "static" => GateMode::Static,
                    "dynamic" | "hard_then_soft" => GateMode::HardThenSoft,
                    "soft_only" => GateMode::SoftOnly,
                    _ => return Err(bad("expected static, dynamic or soft_only")),
                }
            }
            SweepAxis::SigmaNoise => cfg.backend.sigma_noise = num()?,
            SweepAxis::LayerDepthK => {
                let k = value.parse::<usize>().map_err(|_| bad("not a layer count"))?;
                cfg.hesitation.sampled_layers = None;
                cfg.hesitation.layer_depth_k = Some(k);
            }
            SweepAxis::Lambda => {
                let l = num()?;
                cfg.calibration.lambda_v = l;
                cfg.calibration.lambda_x = l;
            }
            SweepAxis::Epsilon => cfg.calibration.hysteresis_epsilon = num()?,
            SweepAxis::WMin => cfg.hesitation.w_min = num()?,
        }
        cfg.validate()
    }
}

impl FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = SweepAxis::ALL.iter().map(|a| a.name()).collect();
            HarnessError::Usage(format!("unknown axis `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub report: RunReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

pub fn parse_values(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect()
}

pub fn sweep(
    base: &HarnessConfig,
    instances: &[TaskInstance],
    spec: &BackendSpec,
    axis: SweepAxis,
    values: &[String],
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(HarnessError::Usage("sweep needs at least one value".into()));
    }
    // Validate every value before spending time on runs.
    let configs = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            axis.apply(&mut c, v)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = values
        .iter()
        .zip(&configs)
        .map(|(v, c)| {
            Ok(SweepRow {
                value: v.clone(),
                report: run(c, instances, spec)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport { axis, rows })
}

pub fn sweep_md(s: &SweepReport) -> String {
    let mut out = format!(
        "# Sweep over `{}`\n\n| value | accuracy | f1 | trigger rate | n_fwd | flip rate | max abs d_v | wall ms/step |\n|---|---|---|---|---|---|---|---|\n",
        s.axis.name()
    );
    for r in &s.rows {
        let p = &r.report;
        let _ = writeln!(
            out,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.value, p.accuracy, p.f1, p.trigger_rate, p.n_fwd, p.flip_rate, p.max_abs_d_v, p.wall_ms_per_step.mean
        );
    }
    out
}

pub fn write_sweep_artifacts(dir: &Path, s: &SweepReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for r in &s.rows {
        write_run_artifacts(&dir.join(format!("{}={}", s.axis.name(), r.value)), &r.report)?;
    }
    write(
        dir.join("sweep.json"),
        serde_json::to_string_pretty(s).expect("sweep serialises") + "\n",
    )?;
    write(dir.join("sweep.md"), sweep_md(s))
}
